"""Similarity primitives and the three retrieval scoring modes.

All similarity math runs in float64 regardless of the stored float32 payload.
Batched operations compute each image's block independently of batch size, so
exhaustive scoring and the level-by-level scheduler produce bit-identical
values when pruning is disabled.
"""

from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np

from .model import (DecomposedQuery, HierarchicalIndex, RankedResult, SchedulerConfig,
                    ValidationError)

# Floor applied inside log_sum aggregation so non-positive maxima stay finite.
LOG_FLOOR = 1e-9


class Similarity(str, Enum):
    DOT = "dot"
    COSINE = "cosine"
    NEG_L1 = "neg_l1"


def sim(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray,
        kind: Similarity | str = Similarity.COSINE) -> float:
    """Similarity of two vectors of equal dimension.

    Cosine of a zero vector is defined as 0.0; neg_l1 is the negated L1
    distance, so larger is closer for every kind.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValidationError("similarity needs two 1-D vectors of equal dimension")
    kind = Similarity(kind)
    if kind is Similarity.DOT:
        return float(x @ y)
    if kind is Similarity.COSINE:
        nx = float(np.linalg.norm(x))
        ny = float(np.linalg.norm(y))
        if nx == 0.0 or ny == 0.0:
            return 0.0
        return float((x @ y) / (nx * ny))
    return float(-np.abs(x - y).sum())


def pair_sims(segments: np.ndarray, subs: np.ndarray,
              kind: Similarity | str = Similarity.COSINE) -> np.ndarray:
    """All (image, segment, sub-query) similarities.

    ``segments`` is (images, segments, dim); ``subs`` is (subs, dim); the
    result is (images, segments, subs) float64.  Each image's block is a
    fixed-shape computation, so results do not depend on how many images are
    in the batch.
    """
    seg = np.asarray(segments).astype(np.float64, copy=False)
    q = np.asarray(subs).astype(np.float64, copy=False)
    if seg.ndim != 3 or q.ndim != 2 or seg.shape[2] != q.shape[1]:
        raise ValidationError("pair_sims needs (images, segments, dim) and (subs, dim) arrays")
    kind = Similarity(kind)
    if kind is Similarity.NEG_L1:
        diff = seg[:, :, None, :] - q[None, None, :, :]
        return -np.abs(diff).sum(axis=3)
    dots = seg @ q.T
    if kind is Similarity.DOT:
        return dots
    seg_norms = np.linalg.norm(seg, axis=2)
    sub_norms = np.linalg.norm(q, axis=1)
    denom = seg_norms[:, :, None] * sub_norms[None, None, :]
    out = np.zeros_like(dots)
    np.divide(dots, denom, out=out, where=denom > 0)
    return out


def global_similarities(query: DecomposedQuery, index: HierarchicalIndex,
                        kind: Similarity | str = Similarity.COSINE) -> np.ndarray:
    """(n_images,) similarity of the whole-query vector to whole-image vectors."""
    whole = index.whole_image_vectors
    return pair_sims(whole[:, None, :], query.global_vec[None, :], kind)[:, 0, 0]


def subquery_level_maxima(query: DecomposedQuery, index: HierarchicalIndex, level: int,
                          kind: Similarity | str = Similarity.COSINE) -> np.ndarray:
    """(n_images, n_subs) best similarity per sub-query at one level."""
    sims = pair_sims(index.vectors_for_count(level), query.subs, kind)
    return sims.max(axis=1)


def aggregate_maxima(best: np.ndarray, aggregation: str = "product") -> np.ndarray:
    """Collapse per-sub-query maxima (images, subs) to one score per image.

    The product is accumulated in ascending sub-query order so repeated runs
    are bit-identical; log_sum floors each factor at LOG_FLOOR before the log.
    """
    b = np.asarray(best, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] < 1:
        raise ValidationError("aggregate_maxima needs a non-empty (images, subs) array")
    if aggregation == "product":
        out = b[:, 0].copy()
        for k in range(1, b.shape[1]):
            out *= b[:, k]
        return out
    if aggregation == "log_sum":
        logs = np.log(np.maximum(b, LOG_FLOOR))
        out = logs[:, 0].copy()
        for k in range(1, b.shape[1]):
            out += logs[:, k]
        return out
    raise ValidationError(f"unknown aggregation {aggregation!r}")


def _check_query(query: DecomposedQuery, index: HierarchicalIndex) -> None:
    if query.dim != index.dim:
        raise ValidationError(
            f"query {query.query_id!r}: dimension {query.dim} != index dimension {index.dim}")


def score_single(query: DecomposedQuery, index: HierarchicalIndex, *,
                 kind: Similarity | str = Similarity.COSINE) -> np.ndarray:
    """Whole-query vs whole-image similarity for every image."""
    _check_query(query, index)
    return global_similarities(query, index, kind)


def score_flat_mvr(query: DecomposedQuery, index: HierarchicalIndex, level: int, *,
                   kind: Similarity | str = Similarity.COSINE) -> np.ndarray:
    """Whole-image similarity plus the product of per-sub-query maxima at one level."""
    _check_query(query, index)
    best = subquery_level_maxima(query, index, level, kind)
    return global_similarities(query, index, kind) + aggregate_maxima(best, "product")


def score_hierarchical(query: DecomposedQuery, index: HierarchicalIndex,
                       levels: Sequence[int], *,
                       kind: Similarity | str = Similarity.COSINE,
                       aggregation: str = "product",
                       include_global_additive: bool = False) -> np.ndarray:
    """Aggregate of per-sub-query maxima taken across all given levels.

    Each sub-query's best match may come from any level; the whole-image term
    is added only when ``include_global_additive`` is set.
    """
    _check_query(query, index)
    ordered = sorted(levels)
    if not ordered:
        raise ValidationError("hierarchical scoring needs at least one level")
    best: np.ndarray | None = None
    for level in ordered:
        level_best = subquery_level_maxima(query, index, level, kind)
        best = level_best if best is None else np.maximum(best, level_best)
    scores = aggregate_maxima(best, aggregation)
    if include_global_additive:
        scores = scores + global_similarities(query, index, kind)
    return scores


def top_k(index: HierarchicalIndex, scores: np.ndarray, k: int) -> RankedResult:
    """Canonical top-k: descending score, ties broken by ascending image id."""
    s = np.asarray(scores, dtype=np.float64)
    n = index.n_images
    if s.shape != (n,):
        raise ValidationError(f"expected {n} scores, got shape {s.shape}")
    if k < 1:
        raise ValidationError("k must be at least 1")
    order = np.lexsort((np.arange(n), -s))[:k]
    return RankedResult(tuple((index.image_ids[i], float(s[i])) for i in order))


def oracle_topk(query: DecomposedQuery, index: HierarchicalIndex, config: SchedulerConfig,
                *, kind: Similarity | str = Similarity.COSINE) -> RankedResult:
    """Exhaustive reference ranking for the configured mode: every image is
    scored in full, with no pruning and no early exit."""
    levels = config.resolved_levels(index)
    if config.mode == "single":
        scores = score_single(query, index, kind=kind)
    elif config.mode == "flat_mvr":
        scores = score_flat_mvr(query, index, levels[0], kind=kind)
    else:
        scores = score_hierarchical(
            query, index, levels, kind=kind, aggregation=config.aggregation,
            include_global_additive=config.include_global_additive)
    return top_k(index, scores, config.k)
