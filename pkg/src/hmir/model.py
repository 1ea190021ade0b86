"""Core data model: the segment-embedding index, decomposed queries, scheduler
configuration, and ranked results.

The on-disk container ("HMIR") is a directory holding ``manifest.json`` plus a
``vectors.bin`` payload of little-endian float32 rows.  Image order inside an
index is canonical (sorted by id) so that rewriting a container is
byte-reproducible and tie-breaking by id equals tie-breaking by position.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_NAME = "HMIR"
FORMAT_VERSION = 1

# Accepted deviation from unit L2 norm when a container declares normalized=true.
UNIT_NORM_TOL = 1e-4

MODES = ("single", "flat_mvr", "hierarchical")
AGGREGATIONS = ("product", "log_sum")

_F32 = np.dtype("<f4")


class ValidationError(ValueError):
    """Input data violates a model or container invariant."""


def _require_keys(obj: dict, required: set[str], context: str,
                  optional: frozenset[str] = frozenset()) -> None:
    if not isinstance(obj, dict):
        raise ValidationError(f"{context}: expected a JSON object")
    keys = set(obj)
    missing = required - keys
    if missing:
        raise ValidationError(f"{context}: missing keys {sorted(missing)}")
    unknown = keys - required - optional
    if unknown:
        raise ValidationError(f"{context}: unknown keys {sorted(unknown)}")


class HierarchicalIndex:
    """Immutable per-image segment embeddings across granularity levels.

    ``vectors_at_position(g)`` has shape ``(n_images, level_counts[g], dim)``
    float32.  Level 0 always holds one whole-image vector per image; segment
    counts are non-decreasing with level position.  Arrays are marked read-only
    so a loaded index can be shared across query workers.
    """

    def __init__(self, image_ids: Sequence[str], level_counts: Sequence[int],
                 level_vectors: Sequence[np.ndarray], *, normalized: bool = False,
                 dim: int | None = None):
        ids = [str(i) for i in image_ids]
        counts = list(level_counts)
        if not counts:
            raise ValidationError("index needs at least one granularity level")
        for c in counts:
            if not isinstance(c, (int, np.integer)) or isinstance(c, bool) or c < 1:
                raise ValidationError(f"segment count {c!r} is not a positive integer")
        counts = [int(c) for c in counts]
        if counts[0] != 1:
            raise ValidationError("the first level must hold exactly one whole-image segment")
        for a, b in zip(counts, counts[1:]):
            if b < a:
                raise ValidationError("segment counts must be non-decreasing across levels")
        if len(level_vectors) != len(counts):
            raise ValidationError("one vector array is required per level")

        seen: set[str] = set()
        for image_id in ids:
            if image_id in seen:
                raise ValidationError(f"duplicate image id {image_id!r}")
            seen.add(image_id)
        n = len(ids)

        arrays: list[np.ndarray] = []
        for g, (count, arr) in enumerate(zip(counts, level_vectors), start=1):
            a = np.asarray(arr, dtype=np.float32)
            if a.ndim != 3:
                raise ValidationError(f"level {g}: vector array must be 3-D (images, segments, dim)")
            if a.shape[0] != n or a.shape[1] != count:
                raise ValidationError(
                    f"level {g}: expected shape ({n}, {count}, dim), got {a.shape}")
            arrays.append(a)

        if dim is None:
            dim = arrays[0].shape[2]
        dim = int(dim)
        if dim < 1:
            raise ValidationError("embedding dimension must be at least 1")
        for g, a in enumerate(arrays, start=1):
            if a.shape[2] != dim:
                raise ValidationError(f"level {g}: dimension {a.shape[2]} != index dimension {dim}")

        # Canonical image order: sorted ascending by id.
        order = sorted(range(n), key=ids.__getitem__)
        ids = [ids[i] for i in order]
        if n:
            arrays = [np.ascontiguousarray(a[order]) for a in arrays]

        for g, a in enumerate(arrays, start=1):
            bad = ~np.isfinite(a)
            if bad.any():
                i, j, _ = np.argwhere(bad)[0]
                raise ValidationError(
                    f"image {ids[int(i)]!r} level {g} segment {int(j)}: non-finite value")
            if normalized and a.size:
                norms = np.linalg.norm(a.astype(np.float64), axis=2)
                off = np.abs(norms - 1.0) > UNIT_NORM_TOL
                if off.any():
                    i, j = np.argwhere(off)[0]
                    raise ValidationError(
                        f"image {ids[int(i)]!r} level {g} segment {int(j)}: "
                        f"norm {norms[i, j]:.6f} not within {UNIT_NORM_TOL} of 1.0")

        for a in arrays:
            a.setflags(write=False)

        self._ids: tuple[str, ...] = tuple(ids)
        self._counts: tuple[int, ...] = tuple(counts)
        self._arrays: tuple[np.ndarray, ...] = tuple(arrays)
        self._dim = dim
        self._normalized = bool(normalized)
        self._pos = {image_id: i for i, image_id in enumerate(self._ids)}

    @property
    def image_ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def level_counts(self) -> tuple[int, ...]:
        return self._counts

    @property
    def n_images(self) -> int:
        return len(self._ids)

    @property
    def n_levels(self) -> int:
        return len(self._counts)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def normalized(self) -> bool:
        return self._normalized

    @property
    def whole_image_vectors(self) -> np.ndarray:
        """(n_images, dim) view of the level with a single segment per image."""
        return self._arrays[0][:, 0, :]

    def position(self, image_id: str) -> int:
        try:
            return self._pos[image_id]
        except KeyError:
            raise ValidationError(f"unknown image id {image_id!r}") from None

    def has_image(self, image_id: str) -> bool:
        return image_id in self._pos

    def level_position(self, count: int) -> int:
        """Position of the first level with the given segment count."""
        try:
            return self._counts.index(count)
        except ValueError:
            raise ValidationError(f"index has no level with {count} segments") from None

    def has_level(self, count: int) -> bool:
        return count in self._counts

    def vectors_at_position(self, position: int) -> np.ndarray:
        return self._arrays[position]

    def vectors_for_count(self, count: int) -> np.ndarray:
        return self._arrays[self.level_position(count)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HierarchicalIndex):
            return NotImplemented
        return (self._ids == other._ids and self._counts == other._counts
                and self._dim == other._dim and self._normalized == other._normalized
                and all(np.array_equal(a, b) for a, b in zip(self._arrays, other._arrays)))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return (f"HierarchicalIndex(images={self.n_images}, dim={self._dim}, "
                f"levels={list(self._counts)}, normalized={self._normalized})")


def save_index(index: HierarchicalIndex, path: str | Path) -> None:
    """Write a canonical container: sorted image ids, contiguous offsets."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    counts = index.level_counts
    item = _F32.itemsize
    level_bytes = [c * index.dim * item for c in counts]

    images = []
    offset = 0
    for image_id in index.image_ids:
        offsets = []
        for nb in level_bytes:
            offsets.append(offset)
            offset += nb
        images.append({"id": image_id, "offsets": offsets})

    payload = bytearray()
    for i in range(index.n_images):
        for p in range(len(counts)):
            payload += index.vectors_at_position(p)[i].astype(_F32, copy=False).tobytes()

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dim": index.dim,
        "normalized": index.normalized,
        "levels": list(counts),
        "images": images,
    }
    (root / "vectors.bin").write_bytes(bytes(payload))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_index(path: str | Path) -> HierarchicalIndex:
    """Load and validate a container directory.

    Offsets in the manifest are honored as written, so non-canonical files
    load fine; the in-memory index is always canonically ordered.
    """
    root = Path(path)
    text = (root / "manifest.json").read_text(encoding="utf-8")
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed manifest: {exc}") from exc

    _require_keys(manifest, {"format", "version", "dim", "normalized", "levels", "images"},
                  "manifest")
    if manifest["format"] != FORMAT_NAME:
        raise ValidationError(f"manifest: format {manifest['format']!r} is not {FORMAT_NAME!r}")
    if manifest["version"] != FORMAT_VERSION:
        raise ValidationError(f"manifest: unsupported version {manifest['version']!r}")
    dim = manifest["dim"]
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        raise ValidationError("manifest: dim must be a positive integer")
    normalized = manifest["normalized"]
    if not isinstance(normalized, bool):
        raise ValidationError("manifest: normalized must be a boolean")
    counts = manifest["levels"]
    if not isinstance(counts, list) or not counts:
        raise ValidationError("manifest: levels must be a non-empty list")
    for c in counts:
        if not isinstance(c, int) or isinstance(c, bool) or c < 1:
            raise ValidationError(f"manifest: segment count {c!r} is not a positive integer")
    entries = manifest["images"]
    if not isinstance(entries, list):
        raise ValidationError("manifest: images must be a list")

    blob = (root / "vectors.bin").read_bytes()
    item = _F32.itemsize
    n = len(entries)
    ids: list[str] = []
    level_arrays = [np.empty((n, c, dim), dtype=np.float32) for c in counts]
    for i, entry in enumerate(entries):
        _require_keys(entry, {"id", "offsets"}, f"image entry {i}")
        image_id = entry["id"]
        if not isinstance(image_id, str):
            raise ValidationError(f"image entry {i}: id must be a string")
        offsets = entry["offsets"]
        if not isinstance(offsets, list) or len(offsets) != len(counts):
            raise ValidationError(f"image {image_id!r}: expected {len(counts)} offsets")
        ids.append(image_id)
        for g, (count, off) in enumerate(zip(counts, offsets), start=1):
            if not isinstance(off, int) or isinstance(off, bool) or off < 0:
                raise ValidationError(f"image {image_id!r} level {g}: bad offset {off!r}")
            need = count * dim * item
            if off + need > len(blob):
                raise ValidationError(
                    f"image {image_id!r} level {g}: vector data runs past end of payload")
            rows = np.frombuffer(blob, dtype=_F32, count=count * dim, offset=off)
            level_arrays[g - 1][i] = rows.reshape(count, dim)

    return HierarchicalIndex(ids, counts, level_arrays, normalized=normalized, dim=dim)


@dataclass(eq=False)
class DecomposedQuery:
    """One retrieval request: a whole-query vector plus sub-query vectors."""

    query_id: str
    global_vec: np.ndarray
    subs: np.ndarray
    ground_truth: str | None = None

    def __post_init__(self) -> None:
        qid = self.query_id
        g = np.array(self.global_vec, dtype=np.float32, copy=True)
        s = np.array(self.subs, dtype=np.float32, copy=True)
        if g.ndim != 1 or g.shape[0] < 1:
            raise ValidationError(f"query {qid!r}: global vector must be 1-D and non-empty")
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValidationError(f"query {qid!r}: needs at least one sub-query vector")
        if s.shape[1] != g.shape[0]:
            raise ValidationError(
                f"query {qid!r}: sub-query dimension {s.shape[1]} != global dimension {g.shape[0]}")
        if not np.isfinite(g).all() or not np.isfinite(s).all():
            raise ValidationError(f"query {qid!r}: non-finite vector value")
        g.setflags(write=False)
        s.setflags(write=False)
        self.global_vec = g
        self.subs = s
        if self.ground_truth is not None and not isinstance(self.ground_truth, str):
            raise ValidationError(f"query {qid!r}: ground truth must be a string or null")

    @property
    def dim(self) -> int:
        return int(self.global_vec.shape[0])

    @property
    def n_subs(self) -> int:
        return int(self.subs.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DecomposedQuery):
            return NotImplemented
        return (self.query_id == other.query_id
                and self.ground_truth == other.ground_truth
                and np.array_equal(self.global_vec, other.global_vec)
                and np.array_equal(self.subs, other.subs))


def load_queries(path: str | Path, *, index: HierarchicalIndex | None = None,
                 check_ground_truth: bool = False) -> list[DecomposedQuery]:
    """Read a JSON-lines query file; one object per line.

    Dimensions are checked against ``index`` when given, otherwise for mutual
    consistency.  ``check_ground_truth`` additionally requires every named
    ground-truth image to exist in the index.
    """
    queries: list[DecomposedQuery] = []
    seen: set[str] = set()
    dim = index.dim if index is not None else None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"query line {lineno}: malformed JSON: {exc}") from exc
            _require_keys(obj, {"query_id", "global", "subs"}, f"query line {lineno}",
                          optional=frozenset({"ground_truth"}))
            qid = obj["query_id"]
            if not isinstance(qid, str):
                raise ValidationError(f"query line {lineno}: query_id must be a string")
            if qid in seen:
                raise ValidationError(f"duplicate query id {qid!r}")
            seen.add(qid)
            gt = obj.get("ground_truth")
            try:
                query = DecomposedQuery(qid, np.asarray(obj["global"], dtype=np.float64),
                                        np.asarray(obj["subs"], dtype=np.float64), gt)
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ValidationError):
                    raise
                raise ValidationError(f"query {qid!r}: bad vector payload: {exc}") from exc
            if dim is None:
                dim = query.dim
            elif query.dim != dim:
                raise ValidationError(
                    f"query {qid!r}: dimension {query.dim} != expected {dim}")
            if check_ground_truth and index is not None and gt is not None:
                if not index.has_image(gt):
                    raise ValidationError(f"query {qid!r}: ground truth {gt!r} not in index")
            queries.append(query)
    return queries


def save_queries(queries: Iterable[DecomposedQuery], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            obj = {
                "query_id": q.query_id,
                "global": [float(x) for x in q.global_vec],
                "subs": [[float(x) for x in row] for row in q.subs],
                "ground_truth": q.ground_truth,
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class SchedulerConfig:
    """How a query is processed: mode, level subset, pruning and exit knobs.

    ``initial_ratio`` and ``decay`` drive the survivor schedule (wire names
    ``T`` and ``alpha``); ``exit_tau`` is the rank-stability exit threshold,
    ``None`` meaning disabled.  ``levels`` names segment counts; empty means
    every index level for hierarchical mode.  Flat mode requires exactly one
    decomposition level and always adds the whole-image similarity term;
    its sub-query aggregation is always the product.
    """

    k: int = 10
    mode: str = "hierarchical"
    levels: tuple[int, ...] = ()
    initial_ratio: float = 1.0
    decay: float = 1.0
    exit_tau: float | None = None
    aggregation: str = "product"
    include_global_additive: bool = False

    def __post_init__(self) -> None:
        if not isinstance(self.k, int) or isinstance(self.k, bool) or self.k < 1:
            raise ValidationError("K must be a positive integer")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"aggregation must be one of {AGGREGATIONS}")
        levels = tuple(int(c) for c in self.levels)
        if any(c < 1 for c in levels):
            raise ValidationError("levels must be positive segment counts")
        if len(set(levels)) != len(levels):
            raise ValidationError("levels must not repeat")
        object.__setattr__(self, "levels", tuple(sorted(levels)))
        if not (isinstance(self.initial_ratio, (int, float)) and 0.0 < self.initial_ratio <= 1.0):
            raise ValidationError("T must lie in (0, 1]")
        if not (isinstance(self.decay, (int, float)) and 0.0 < self.decay <= 1.0):
            raise ValidationError("alpha must lie in (0, 1]")
        if self.exit_tau is not None:
            if not isinstance(self.exit_tau, (int, float)) or not -1.0 <= self.exit_tau <= 1.0:
                raise ValidationError("tau must lie in [-1, 1] or be disabled")

    def resolved_levels(self, index: HierarchicalIndex) -> tuple[int, ...]:
        """Segment counts this config uses against ``index``, ascending."""
        if self.mode == "single":
            return ()
        levels = self.levels or tuple(dict.fromkeys(index.level_counts))
        for c in levels:
            index.level_position(c)
        if self.mode == "flat_mvr" and len(levels) != 1:
            raise ValidationError(
                f"flat_mvr needs exactly one decomposition level, got {list(levels)}")
        return levels

    def validate_for(self, index: HierarchicalIndex) -> None:
        self.resolved_levels(index)

    def to_json_dict(self) -> dict:
        return {
            "K": self.k,
            "mode": self.mode,
            "levels": list(self.levels),
            "T": self.initial_ratio,
            "alpha": self.decay,
            "tau": "disabled" if self.exit_tau is None else self.exit_tau,
            "aggregation": self.aggregation,
            "include_global_additive": self.include_global_additive,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SchedulerConfig":
        _require_keys(obj, set(), "config", optional=frozenset(
            {"K", "mode", "levels", "T", "alpha", "tau", "aggregation",
             "include_global_additive"}))
        kwargs: dict = {}
        if "K" in obj:
            kwargs["k"] = obj["K"]
        if "mode" in obj:
            kwargs["mode"] = obj["mode"]
        if "levels" in obj:
            levels = obj["levels"]
            if not isinstance(levels, list):
                raise ValidationError("config: levels must be a list")
            kwargs["levels"] = tuple(levels)
        if "T" in obj:
            kwargs["initial_ratio"] = obj["T"]
        if "alpha" in obj:
            kwargs["decay"] = obj["alpha"]
        if "tau" in obj:
            tau = obj["tau"]
            if tau in (None, "disabled"):
                kwargs["exit_tau"] = None
            elif isinstance(tau, (int, float)) and not isinstance(tau, bool):
                kwargs["exit_tau"] = float(tau)
            else:
                raise ValidationError(f'config: tau must be a number or "disabled", got {tau!r}')
        if "aggregation" in obj:
            kwargs["aggregation"] = obj["aggregation"]
        if "include_global_additive" in obj:
            flag = obj["include_global_additive"]
            if not isinstance(flag, bool):
                raise ValidationError("config: include_global_additive must be a boolean")
            kwargs["include_global_additive"] = flag
        return cls(**kwargs)


@dataclass(frozen=True)
class RankedResult:
    """Top candidates as (image id, score), best first.

    Scores descend; equal scores are ordered by ascending id; ids are unique.
    """

    entries: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        entries = tuple((str(i), float(s)) for i, s in self.entries)
        object.__setattr__(self, "entries", entries)
        seen: set[str] = set()
        for image_id, _ in entries:
            if image_id in seen:
                raise ValidationError(f"ranked result repeats image {image_id!r}")
            seen.add(image_id)
        for (id_a, s_a), (id_b, s_b) in zip(entries, entries[1:]):
            if s_a < s_b or (s_a == s_b and id_a >= id_b):
                raise ValidationError(
                    "ranked result must descend by score with ties ordered by id")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.entries)

    def rank_of(self, image_id: str) -> int | None:
        """1-based rank of ``image_id``, or None if absent."""
        for rank, (candidate, _) in enumerate(self.entries, start=1):
            if candidate == image_id:
                return rank
        return None

    def __len__(self) -> int:
        return len(self.entries)
