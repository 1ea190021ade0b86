"""Level-by-level query processing with candidate pruning and rank-stability
early exit.

Levels are visited in ascending segment-count order.  After scoring a level,
candidates are sorted by their aggregated score and truncated to the schedule's
survivor count; the loop stops early once the top-k list agrees with the
previous level's list at or above the configured Kendall tau threshold.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .model import (DecomposedQuery, HierarchicalIndex, RankedResult, SchedulerConfig,
                    ValidationError)
from .scoring import (Similarity, aggregate_maxima, global_similarities, pair_sims,
                      score_single, top_k)


@dataclass(frozen=True)
class PruneSchedule:
    """Retained candidate fraction after each processed level.

    ``retain[p]`` applies after the (p+1)-th processed level and equals
    ``decay**(p+1) * initial_ratio``.  Before the first level the implicit
    fraction is 1.0: every image enters level one.
    """

    initial_ratio: float
    decay: float
    retain: tuple[float, ...]

    @property
    def entering(self) -> tuple[float, ...]:
        """Fraction of candidates entering each level (starts at 1.0)."""
        return (1.0,) + self.retain[:-1]

    def survivor_counts(self, n_images: int, k: int) -> tuple[int, ...]:
        """Candidates kept after each level: floor(n * t), clamped to [k, n]."""
        return tuple(min(n_images, max(math.floor(n_images * t), k)) for t in self.retain)


def prune_schedule(initial_ratio: float, decay: float,
                   levels: Sequence[int]) -> PruneSchedule:
    if not (isinstance(initial_ratio, (int, float)) and 0.0 < initial_ratio <= 1.0):
        raise ValidationError("T must lie in (0, 1]")
    if not (isinstance(decay, (int, float)) and 0.0 < decay <= 1.0):
        raise ValidationError("alpha must lie in (0, 1]")
    retain = tuple(decay ** g * initial_ratio for g in range(1, len(levels) + 1))
    return PruneSchedule(float(initial_ratio), float(decay), retain)


def kendall_tau(rank_a: Sequence[Hashable], rank_b: Sequence[Hashable]) -> float:
    """Rank agreement of two top-k lists over the union of their items.

    An item absent from one list takes rank ``len(list) + 1`` there; pairs
    tied in either list count as neither concordant nor discordant, while the
    denominator stays n(n-1)/2 over the union.  Fewer than two distinct items
    yield 1.0 by definition.
    """
    a = list(rank_a)
    b = list(rank_b)
    if not a or not b:
        raise ValidationError("kendall_tau needs two non-empty rankings")
    if len(set(a)) != len(a) or len(set(b)) != len(b):
        raise ValidationError("rankings must not repeat items")
    pos_a = {item: r for r, item in enumerate(a, start=1)}
    pos_b = {item: r for r, item in enumerate(b, start=1)}
    universe = a + [item for item in b if item not in pos_a]
    n = len(universe)
    if n < 2:
        return 1.0
    fill_a = len(a) + 1
    fill_b = len(b) + 1
    ra = np.fromiter((pos_a.get(x, fill_a) for x in universe), dtype=np.int64, count=n)
    rb = np.fromiter((pos_b.get(x, fill_b) for x in universe), dtype=np.int64, count=n)
    da = np.sign(ra[:, None] - ra[None, :])
    db = np.sign(rb[:, None] - rb[None, :])
    # The sign product is symmetric with zero diagonal, so the full sum is
    # exactly twice the concordant-minus-discordant pair count.
    net = int((da * db).sum()) // 2
    return net / (n * (n - 1) // 2)


def _select_top(agg: np.ndarray, m: int) -> np.ndarray:
    """Ascending positions of the ``m`` best scores, high first, position
    (= image id, since callers keep candidates in id order) breaking ties.

    Equivalent to ``np.lexsort((positions, -agg))[:m]`` followed by a sort,
    but via a partition, so large candidate sets are never fully sorted.
    """
    if m >= agg.size:
        return np.arange(agg.size)
    cutoff = np.argpartition(agg, agg.size - m)[agg.size - m:]
    threshold = agg[cutoff].min()
    above = np.flatnonzero(agg > threshold)
    at = np.flatnonzero(agg == threshold)[:m - above.size]
    return np.sort(np.concatenate((above, at)))


@dataclass
class QueryState:
    """Bookkeeping from one scheduled query.

    ``score_matrix`` holds the running per-sub-query maxima for every image
    (frozen rows for pruned images); ``exit_level`` is the 1-based position at
    which the stability exit fired, or None.  ``sched_overhead_s`` covers only
    top-k selection, truncation, and tau computation.  Survivor tuples are in
    id order; only ``topk_history`` entries are score-ordered.
    """

    score_matrix: np.ndarray | None
    survivors: tuple[str, ...]
    topk_history: tuple[tuple[str, ...], ...]
    survivor_history: tuple[tuple[str, ...], ...]
    levels_processed: int
    exit_level: int | None
    pairs_scored: int
    sched_overhead_s: float
    min_subquery_best: float


def process_query(query: DecomposedQuery, index: HierarchicalIndex,
                  config: SchedulerConfig, *,
                  kind: Similarity | str = Similarity.COSINE
                  ) -> tuple[RankedResult, QueryState]:
    """Run one query through the configured scheduler.

    With pruning disabled (T = alpha = 1) and the exit disabled, the returned
    ranking is bit-identical to ``oracle_topk`` for the same config.  Pruned
    images never reappear in the result, even if their frozen score would
    place them in the top k.
    """
    if query.dim != index.dim:
        raise ValidationError(
            f"query {query.query_id!r}: dimension {query.dim} != index dimension {index.dim}")
    config.validate_for(index)

    if config.mode == "single":
        scores = score_single(query, index, kind=kind)
        result = top_k(index, scores, config.k)
        state = QueryState(None, index.image_ids, (), (), 0, None, 0, 0.0, math.inf)
        return result, state

    levels = config.resolved_levels(index)
    include_global = config.mode == "flat_mvr" or config.include_global_additive
    aggregation = "product" if config.mode == "flat_mvr" else config.aggregation

    n = index.n_images
    ids = index.image_ids
    schedule = prune_schedule(config.initial_ratio, config.decay, levels)
    counts = schedule.survivor_counts(n, config.k)
    n_subs = query.n_subs

    best = np.full((n, n_subs), -np.inf, dtype=np.float64)
    g_sims = global_similarities(query, index, kind) if include_global else None
    surv = np.arange(n)
    top_positions = np.empty(0, dtype=np.int64)
    top_scores = np.empty(0, dtype=np.float64)
    topk_hist: list[tuple[str, ...]] = []
    surv_hist: list[tuple[str, ...]] = []
    pairs = 0
    overhead = 0.0
    exit_level: int | None = None
    processed = 0
    min_best = math.inf

    for position, level in enumerate(levels, start=1):
        seg = index.vectors_for_count(level)
        sims = pair_sims(seg[surv], query.subs, kind)
        level_best = sims.max(axis=1)
        pairs += surv.size * seg.shape[1] * n_subs
        updated = np.maximum(best[surv], level_best)
        best[surv] = updated
        agg = aggregate_maxima(updated, aggregation)
        if g_sims is not None:
            agg = agg + g_sims[surv]
        if updated.size:
            min_best = min(min_best, float(updated.min()))

        started = time.perf_counter()
        sel = _select_top(agg, min(config.k, agg.size))
        sel = sel[np.lexsort((sel, -agg[sel]))]
        top_scores = agg[sel]
        top_positions = surv[sel]
        cut = counts[position - 1]
        if cut < surv.size:
            # The top-k is a prefix of the same preference order, so the cut
            # never drops a current top-k member (cut >= k by the schedule).
            surv = surv[_select_top(agg, cut)]
        top_ids = tuple(ids[i] for i in top_positions)
        overhead += time.perf_counter() - started

        topk_hist.append(top_ids)
        surv_hist.append(tuple(ids[i] for i in surv))
        processed = position

        if (config.exit_tau is not None and len(topk_hist) >= 2
                and topk_hist[-1] and topk_hist[-2]):
            started = time.perf_counter()
            tau = kendall_tau(topk_hist[-1], topk_hist[-2])
            overhead += time.perf_counter() - started
            if tau >= config.exit_tau:
                exit_level = position
                break

    result = RankedResult(tuple(
        (ids[p], float(s)) for p, s in zip(top_positions, top_scores)))
    state = QueryState(best, tuple(ids[i] for i in surv), tuple(topk_hist),
                       tuple(surv_hist), processed, exit_level, pairs, overhead,
                       min_best)
    return result, state
