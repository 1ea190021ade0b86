"""Synthetic datasets with planted matches at known granularities.

Every vector is a random unit vector except the planted ones: each query's
sub-queries are copied (plus optional Gaussian noise, then renormalized) into
that query's ground-truth image at designated levels.  Sub-query ``s`` plants
at ``planted_levels[s % len(planted_levels)]`` and occupies the next free
segment slot of that level.  Generation is fully determined by the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DecomposedQuery, HierarchicalIndex, ValidationError, _require_keys


@dataclass(frozen=True)
class SynthSpec:
    n_images: int
    dim: int
    levels: tuple[int, ...]
    n_queries: int
    subs_per_query: int
    planted_levels: tuple[int, ...]
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_images", "dim", "n_queries", "subs_per_query", "seed"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValidationError(f"{name} must be an integer")
        if not isinstance(self.noise, (int, float)) or isinstance(self.noise, bool):
            raise ValidationError("noise must be a number")
        object.__setattr__(self, "levels", tuple(int(c) for c in self.levels))
        object.__setattr__(self, "planted_levels",
                           tuple(int(c) for c in self.planted_levels))
        if self.n_images < 1:
            raise ValidationError("n_images must be at least 1")
        if self.dim < 1:
            raise ValidationError("dim must be at least 1")
        if not self.levels or self.levels[0] != 1:
            raise ValidationError("levels must start with the whole-image level 1")
        if any(b < a for a, b in zip(self.levels, self.levels[1:])):
            raise ValidationError("levels must be non-decreasing")
        if len(set(self.levels)) != len(self.levels):
            raise ValidationError("levels must not repeat")
        if self.n_queries < 0 or self.n_queries > self.n_images:
            raise ValidationError("n_queries must lie in [0, n_images]")
        if self.subs_per_query < 1:
            raise ValidationError("subs_per_query must be at least 1")
        if not self.planted_levels:
            raise ValidationError("at least one planted level is required")
        for c in self.planted_levels:
            if c not in self.levels:
                raise ValidationError(f"planted level {c} is not in levels")
        # Each planted sub-query needs its own segment slot at its level.
        per_level = {c: 0 for c in self.planted_levels}
        for s in range(self.subs_per_query):
            per_level[self.planted_levels[s % len(self.planted_levels)]] += 1
        for c, used in per_level.items():
            if used > c:
                raise ValidationError(
                    f"{used} sub-queries plant at level {c}, which has only {c} segments")
        if self.noise < 0:
            raise ValidationError("noise must be non-negative")

    def to_json_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "dim": self.dim,
            "levels": list(self.levels),
            "n_queries": self.n_queries,
            "subs_per_query": self.subs_per_query,
            "planted_levels": list(self.planted_levels),
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SynthSpec":
        _require_keys(obj, {"n_images", "dim", "levels", "n_queries", "subs_per_query",
                            "planted_levels"}, "synth spec",
                      optional=frozenset({"noise", "seed"}))
        return cls(
            n_images=obj["n_images"],
            dim=obj["dim"],
            levels=tuple(obj["levels"]),
            n_queries=obj["n_queries"],
            subs_per_query=obj["subs_per_query"],
            planted_levels=tuple(obj["planted_levels"]),
            noise=obj.get("noise", 0.0),
            seed=obj.get("seed", 0),
        )


def load_synth_spec(path: str | Path) -> SynthSpec:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed synth spec: {exc}") from exc
    return SynthSpec.from_json_dict(obj)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / norms


def generate(spec: SynthSpec) -> tuple[HierarchicalIndex, list[DecomposedQuery]]:
    """Build a normalized index plus queries whose ground truth is planted.

    Query ``i`` targets image ``i``.  With ``noise=0`` the planted segment is
    the sub-query vector itself, so its best similarity at the planted level
    is 1.0 under cosine.  Query global vectors are random unit vectors.
    """
    rng = np.random.default_rng(spec.seed)
    ids = [f"img{i:05d}" for i in range(spec.n_images)]

    arrays = [
        _unit_rows(rng.standard_normal((spec.n_images, count, spec.dim)))
        for count in spec.levels
    ]

    queries: list[DecomposedQuery] = []
    for qi in range(spec.n_queries):
        subs = _unit_rows(rng.standard_normal((spec.subs_per_query, spec.dim)))
        global_vec = _unit_rows(rng.standard_normal(spec.dim))
        next_slot = {c: 0 for c in spec.planted_levels}
        for s in range(spec.subs_per_query):
            level = spec.planted_levels[s % len(spec.planted_levels)]
            slot = next_slot[level]
            next_slot[level] = slot + 1
            if spec.noise > 0:
                planted = _unit_rows(subs[s] + spec.noise * rng.standard_normal(spec.dim))
            else:
                planted = subs[s]
            arrays[spec.levels.index(level)][qi, slot] = planted
        queries.append(DecomposedQuery(
            query_id=f"q{qi:05d}",
            global_vec=global_vec.astype(np.float32),
            subs=subs.astype(np.float32),
            ground_truth=ids[qi],
        ))

    arrays32 = [a.astype(np.float32) for a in arrays]
    index = HierarchicalIndex(ids, spec.levels, arrays32, normalized=True, dim=spec.dim)
    return index, queries
