"""Writers for the retrieval engine's on-disk interchange formats.

Kept deliberately independent of the engine's own implementation: the export
emits exactly what the published container and query-file formats describe,
and the engine's validator is the integration test.  Container directory:
``manifest.json`` plus ``vectors.bin`` (concatenated little-endian float32,
image-major then level-major, at the offsets named in the manifest).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

FORMAT_NAME = "HMIR"
FORMAT_VERSION = 1


def write_container(out_dir: str | Path, dim: int, levels: Sequence[int],
                    vectors_by_image: Mapping[str, Sequence[np.ndarray]], *,
                    normalized: bool = True) -> Path:
    """``vectors_by_image[id]`` holds one (count, dim) float array per level.

    Images are written in id order with contiguous offsets.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    levels = [int(c) for c in levels]
    images = []
    offset = 0
    with open(out_dir / "vectors.bin", "wb") as payload:
        for image_id in sorted(vectors_by_image):
            offsets = []
            for count, arr in zip(levels, vectors_by_image[image_id]):
                a = np.ascontiguousarray(arr, dtype="<f4")
                if a.shape != (count, dim):
                    raise ValueError(
                        f"image {image_id!r}: expected {(count, dim)} vectors, got {a.shape}")
                offsets.append(offset)
                payload.write(a.tobytes())
                offset += a.nbytes
            images.append({"id": image_id, "offsets": offsets})
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dim": dim,
        "normalized": normalized,
        "levels": levels,
        "images": images,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return out_dir


def write_query_file(path: str | Path,
                     queries: Sequence[Mapping[str, object]]) -> Path:
    """JSON lines: {"query_id", "global", "subs", "ground_truth"} per query."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({
                "query_id": q["query_id"],
                "global": [float(x) for x in q["global"]],
                "subs": [[float(x) for x in sub] for sub in q["subs"]],
                "ground_truth": q["ground_truth"],
            }) + "\n")
    return path
