"""Dataset ingestion: segment, embed, and export container plus queries.

Input is a dataset manifest JSON ({"images": [{"id", "path", "captions"}]})
with image paths resolved relative to the manifest file.  Each caption becomes
one query whose ground truth is its own image; sub-queries come from an
optional decomposition file (JSON lines {"query_id", "subs"}) or, failing
that, a naive comma/conjunction split of the caption.

Per-item failures (undecodable image, embedding error) are logged and the
item skipped; the export aborts if more than ``max_skip_fraction`` of all
items (images plus captions) were skipped, so a broken embedder cannot
silently produce a hollowed-out container.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .container import write_container, write_query_file
from .embedding import Embedder
from .segmentation import PipelineError, segment_image

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = (1, 4, 9, 16, 25, 36, 49, 64)
MAX_SKIP_FRACTION = 0.01
UNIT_NORM_TOL = 1e-4

_SPLIT_PATTERN = re.compile(r"[,;]| and | with ", flags=re.IGNORECASE)


@dataclass(frozen=True)
class DatasetImage:
    image_id: str
    path: Path
    captions: tuple[str, ...]


@dataclass(frozen=True)
class ExportReport:
    n_images: int
    n_skipped_images: int
    n_queries: int
    n_skipped_captions: int
    dim: int
    levels: tuple[int, ...]
    index_dir: Path
    query_path: Path


def _require_keys(obj: Mapping, required: set[str], what: str) -> None:
    missing = required - obj.keys()
    extra = obj.keys() - required
    if missing:
        raise PipelineError(f"{what}: missing keys {sorted(missing)}")
    if extra:
        raise PipelineError(f"{what}: unknown keys {sorted(extra)}")


def load_dataset_manifest(path: str | Path) -> list[DatasetImage]:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PipelineError(f"malformed dataset manifest: {exc}")
    if not isinstance(obj, dict):
        raise PipelineError("dataset manifest must hold a JSON object")
    _require_keys(obj, {"images"}, "dataset manifest")
    images = []
    seen: set[str] = set()
    for entry in obj["images"]:
        _require_keys(entry, {"id", "path", "captions"}, "dataset image")
        image_id = entry["id"]
        if not isinstance(image_id, str) or not image_id:
            raise PipelineError("image id must be a non-empty string")
        if image_id in seen:
            raise PipelineError(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        captions = entry["captions"]
        if (not isinstance(captions, list) or not captions
                or not all(isinstance(c, str) and c.strip() for c in captions)):
            raise PipelineError(
                f"image {image_id!r}: captions must be a non-empty list of text")
        images.append(DatasetImage(image_id, path.parent / entry["path"],
                                   tuple(captions)))
    return images


def load_decompositions(path: str | Path) -> dict[str, tuple[str, ...]]:
    out: dict[str, tuple[str, ...]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PipelineError(f"decomposition line {lineno}: {exc}")
            _require_keys(obj, {"query_id", "subs"}, f"decomposition line {lineno}")
            subs = obj["subs"]
            if (not isinstance(subs, list) or not subs
                    or not all(isinstance(s, str) and s.strip() for s in subs)):
                raise PipelineError(
                    f"decomposition line {lineno}: subs must be a non-empty list of text")
            if obj["query_id"] in out:
                raise PipelineError(
                    f"decomposition line {lineno}: duplicate query id {obj['query_id']!r}")
            out[obj["query_id"]] = tuple(subs)
    return out


def split_caption(text: str) -> list[str]:
    """Comma/conjunction split; a caption with no separators is one sub-query."""
    parts = [p.strip() for p in _SPLIT_PATTERN.split(text)]
    return [p for p in parts if p] or [text.strip()]


def load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise PipelineError(f"cannot decode {path}: {exc}")


def _unit_rows(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(rows.astype(np.float64), axis=1, keepdims=True)
    if (norms == 0).any():
        raise PipelineError(f"{what}: embedder returned a zero vector")
    return (rows / norms).astype(np.float32)


def embed_and_export(images: Sequence[DatasetImage], out_index: str | Path,
                     out_queries: str | Path, *, embedder: Embedder,
                     levels: Sequence[int] = DEFAULT_LEVELS,
                     decompositions: Mapping[str, Sequence[str]] | None = None,
                     max_skip_fraction: float = MAX_SKIP_FRACTION) -> ExportReport:
    levels = tuple(int(c) for c in levels)
    if not levels or levels[0] != 1:
        raise PipelineError("levels must start with the whole-image level 1")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise PipelineError("levels must be strictly ascending")
    if not images:
        raise PipelineError("dataset manifest names no images")
    decompositions = decompositions or {}

    vectors_by_image: dict[str, list[np.ndarray]] = {}
    skipped_images = 0
    for item in images:
        try:
            raster = load_image(item.path)
            patches = segment_image(item.image_id, raster, levels)
            rasters = [p.raster for level in levels for p in patches[level]]
            flat = _unit_rows(np.asarray(embedder.embed_images(rasters)),
                              f"image {item.image_id!r}")
            if flat.shape != (sum(levels), embedder.dim):
                raise PipelineError(
                    f"image {item.image_id!r}: embedder returned shape {flat.shape}")
            split_at = np.cumsum(levels)[:-1]
            vectors_by_image[item.image_id] = np.split(flat, split_at)
        except Exception as exc:  # per-item isolation, accounted below
            skipped_images += 1
            logger.warning("skipping image %r: %s", item.image_id, exc)

    queries: list[dict] = []
    skipped_captions = 0
    for item in images:
        if item.image_id not in vectors_by_image:
            skipped_captions += len(item.captions)
            continue
        for ci, caption in enumerate(item.captions):
            query_id = f"{item.image_id}#c{ci}"
            try:
                subs_text = list(decompositions.get(query_id) or split_caption(caption))
                embedded = _unit_rows(
                    np.asarray(embedder.embed_texts([caption] + subs_text)),
                    f"query {query_id!r}")
                queries.append({
                    "query_id": query_id,
                    "global": embedded[0],
                    "subs": embedded[1:],
                    "ground_truth": item.image_id,
                })
            except Exception as exc:
                skipped_captions += 1
                logger.warning("skipping caption %r: %s", query_id, exc)

    total_items = len(images) + sum(len(i.captions) for i in images)
    skipped = skipped_images + skipped_captions
    if skipped / total_items > max_skip_fraction:
        raise PipelineError(
            f"aborting export: {skipped} of {total_items} items failed "
            f"(more than {max_skip_fraction:.1%})")

    index_dir = write_container(out_index, embedder.dim, levels, vectors_by_image)
    query_path = write_query_file(out_queries, queries)
    return ExportReport(
        n_images=len(vectors_by_image),
        n_skipped_images=skipped_images,
        n_queries=len(queries),
        n_skipped_captions=skipped_captions,
        dim=embedder.dim,
        levels=levels,
        index_dir=index_dir,
        query_path=query_path,
    )
