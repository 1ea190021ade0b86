"""Retrieval-quality metrics, per-level diagnostics, and throughput benchmarks.

Reported throughput covers only query processing: queries arrive already
decomposed and embedded.  Diagnostics replay a capped query sample through a
pruning-free level sweep to expose where in the hierarchy the ground truth
settles and how quickly rankings stabilize.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from statistics import fmean
from typing import Sequence

import numpy as np

from .model import (DecomposedQuery, HierarchicalIndex, RankedResult, SchedulerConfig,
                    ValidationError)
from .scheduler import QueryState, kendall_tau, process_query
from .scoring import Similarity, aggregate_maxima, global_similarities, pair_sims


def ndcg_at_k(result: RankedResult, ground_truth_id: str, k: int) -> float:
    """NDCG@k with one relevant item: 1/log2(1+rank), 0 if outside the top k."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    rank = result.rank_of(ground_truth_id)
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(1.0 + rank)


def recall_at_k(result: RankedResult, ground_truth_id: str, k: int) -> float:
    if k < 1:
        raise ValidationError("k must be at least 1")
    rank = result.rank_of(ground_truth_id)
    return 1.0 if rank is not None and rank <= k else 0.0


def run_queries(index: HierarchicalIndex, queries: Sequence[DecomposedQuery],
                config: SchedulerConfig, *,
                kind: Similarity | str = Similarity.COSINE,
                workers: int = 1) -> list[tuple[RankedResult, QueryState]]:
    """Process every query, preserving input order.  Results are identical
    for any worker count; threads only overlap the numeric work."""
    if workers < 1:
        raise ValidationError("workers must be at least 1")
    if workers == 1 or len(queries) <= 1:
        return [process_query(q, index, config, kind=kind) for q in queries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda q: process_query(q, index, config, kind=kind), queries))


@dataclass(frozen=True)
class LevelProfile:
    """Cumulative ranking behavior at one level of the sweep."""

    level: int
    gt_ranks: tuple[int, ...]
    taus: tuple[float, ...]

    @property
    def mean_gt_rank(self) -> float:
        return fmean(self.gt_ranks)

    @property
    def recall_at_10(self) -> float:
        return sum(1 for r in self.gt_ranks if r <= 10) / len(self.gt_ranks)

    @property
    def mean_tau(self) -> float | None:
        return fmean(self.taus) if self.taus else None


@dataclass(frozen=True)
class Diagnostics:
    """Pruning-free per-level profile over a query sample.

    ``best_match_counts[level]`` counts how often that level supplied a
    sub-query's best similarity on the ground-truth image (ties go to the
    coarsest level).
    """

    sample_size: int
    levels: tuple[int, ...]
    per_level: tuple[LevelProfile, ...]
    best_match_counts: dict[int, int]

    def to_json_dict(self) -> dict:
        return {
            "sample_size": self.sample_size,
            "levels": list(self.levels),
            "per_level": [
                {
                    "level": lp.level,
                    "mean_gt_rank": lp.mean_gt_rank,
                    "recall_at_10": lp.recall_at_10,
                    "mean_tau": lp.mean_tau,
                    "gt_ranks": list(lp.gt_ranks),
                    "taus": list(lp.taus),
                }
                for lp in self.per_level
            ],
            "best_match_counts": {str(k): v for k, v in sorted(self.best_match_counts.items())},
        }


@dataclass(frozen=True)
class EvalReport:
    n_queries: int
    k: int
    mode: str
    workers: int
    ndcg_at_1: float
    ndcg_at_10: float
    recall_at_k: dict[int, float]
    qps: float
    mean_pairs_scored: float
    mean_sched_overhead_ms: float
    exit_level_histogram: dict[int, int]
    min_subquery_best: float
    diagnostics: Diagnostics | None = None

    def to_json_dict(self) -> dict:
        out = {
            "n_queries": self.n_queries,
            "k": self.k,
            "mode": self.mode,
            "workers": self.workers,
            "ndcg_at_1": self.ndcg_at_1,
            "ndcg_at_10": self.ndcg_at_10,
            "recall_at_k": {str(k): v for k, v in sorted(self.recall_at_k.items())},
            "qps": self.qps,
            "mean_pairs_scored": self.mean_pairs_scored,
            "mean_sched_overhead_ms": self.mean_sched_overhead_ms,
            "exit_level_histogram": {str(k): v for k, v in
                                     sorted(self.exit_level_histogram.items())},
            "min_subquery_best": self.min_subquery_best,
            "diagnostics": self.diagnostics.to_json_dict() if self.diagnostics else None,
        }
        return out


def _require_ground_truth(queries: Sequence[DecomposedQuery]) -> None:
    missing = [q.query_id for q in queries if q.ground_truth is None]
    if missing:
        raise ValidationError(
            f"{len(missing)} queries lack ground truth (first: {missing[:3]})")


def evaluate(index: HierarchicalIndex, queries: Sequence[DecomposedQuery],
             config: SchedulerConfig, *,
             kind: Similarity | str = Similarity.COSINE, workers: int = 1,
             diagnostics: bool = False, diag_sample: int = 256) -> EvalReport:
    """Accuracy and work metrics for a labeled query set under one config."""
    if not queries:
        raise ValidationError("evaluation needs at least one query")
    _require_ground_truth(queries)
    config.validate_for(index)

    started = time.perf_counter()
    outs = run_queries(index, queries, config, kind=kind, workers=workers)
    elapsed = max(time.perf_counter() - started, 1e-9)

    ndcg1 = fmean(ndcg_at_k(r, q.ground_truth, 1) for q, (r, _) in zip(queries, outs))
    ndcg10 = fmean(ndcg_at_k(r, q.ground_truth, 10) for q, (r, _) in zip(queries, outs))
    recall_ks = sorted({k for k in (1, 5, 10, config.k) if k <= config.k})
    recalls = {
        k: fmean(recall_at_k(r, q.ground_truth, k) for q, (r, _) in zip(queries, outs))
        for k in recall_ks
    }
    exit_hist = Counter(state.levels_processed for _, state in outs)
    diag = None
    if diagnostics:
        diag = _diagnose(index, queries[:diag_sample], config, kind)
    return EvalReport(
        n_queries=len(queries),
        k=config.k,
        mode=config.mode,
        workers=workers,
        ndcg_at_1=ndcg1,
        ndcg_at_10=ndcg10,
        recall_at_k=recalls,
        qps=len(queries) / elapsed,
        mean_pairs_scored=fmean(state.pairs_scored for _, state in outs),
        mean_sched_overhead_ms=fmean(state.sched_overhead_s for _, state in outs) * 1e3,
        exit_level_histogram=dict(sorted(exit_hist.items())),
        min_subquery_best=min(state.min_subquery_best for _, state in outs),
        diagnostics=diag,
    )


def _diagnose(index: HierarchicalIndex, sample: Sequence[DecomposedQuery],
              config: SchedulerConfig, kind: Similarity | str) -> Diagnostics:
    levels = config.resolved_levels(index)
    if not levels:
        raise ValidationError("diagnostics need a decomposition mode (flat_mvr or hierarchical)")
    include_global = config.mode == "flat_mvr" or config.include_global_additive
    aggregation = "product" if config.mode == "flat_mvr" else config.aggregation
    ids = index.image_ids
    n = index.n_images
    ranks: list[list[int]] = [[] for _ in levels]
    taus: list[list[float]] = [[] for _ in levels]
    best_counts: Counter[int] = Counter()

    for q in sample:
        if q.ground_truth is None or not index.has_image(q.ground_truth):
            raise ValidationError(
                f"query {q.query_id!r}: diagnostics need an in-index ground truth")
        gt_pos = index.position(q.ground_truth)
        g_sims = global_similarities(q, index, kind) if include_global else None
        best: np.ndarray | None = None
        prev_top: tuple[str, ...] | None = None
        gt_best_by_level = np.empty((len(levels), q.n_subs))
        for p, level in enumerate(levels):
            level_best = pair_sims(index.vectors_for_count(level), q.subs, kind).max(axis=1)
            gt_best_by_level[p] = level_best[gt_pos]
            best = level_best if best is None else np.maximum(best, level_best)
            agg = aggregate_maxima(best, aggregation)
            if g_sims is not None:
                agg = agg + g_sims
            order = np.lexsort((np.arange(n), -agg))
            ranks[p].append(int(np.nonzero(order == gt_pos)[0][0]) + 1)
            top = tuple(ids[i] for i in order[:config.k])
            if prev_top is not None:
                taus[p].append(kendall_tau(top, prev_top))
            prev_top = top
        for s in range(q.n_subs):
            best_counts[levels[int(np.argmax(gt_best_by_level[:, s]))]] += 1

    per_level = tuple(
        LevelProfile(level, tuple(ranks[p]), tuple(taus[p]))
        for p, level in enumerate(levels)
    )
    return Diagnostics(len(sample), levels, per_level, dict(best_counts))


@dataclass(frozen=True)
class BenchReport:
    qps: float
    n_queries: int
    iterations: int
    warmup: int
    workers: int
    mean_query_ms: float
    mean_sched_overhead_ms: float
    mean_pairs_scored: float

    def to_json_dict(self) -> dict:
        return {
            "qps": self.qps,
            "n_queries": self.n_queries,
            "iterations": self.iterations,
            "warmup": self.warmup,
            "workers": self.workers,
            "mean_query_ms": self.mean_query_ms,
            "mean_sched_overhead_ms": self.mean_sched_overhead_ms,
            "mean_pairs_scored": self.mean_pairs_scored,
        }


def bench(index: HierarchicalIndex, queries: Sequence[DecomposedQuery],
          config: SchedulerConfig, *, warmup: int = 1, iterations: int = 3,
          workers: int = 1, kind: Similarity | str = Similarity.COSINE) -> BenchReport:
    """Timed end-to-end runs over the query set; rankings are unaffected by
    repetition, only the timing varies between runs."""
    if not queries:
        raise ValidationError("bench needs at least one query")
    if iterations < 1:
        raise ValidationError("iterations must be at least 1")
    if warmup < 0:
        raise ValidationError("warmup must be non-negative")
    config.validate_for(index)

    for _ in range(warmup):
        run_queries(index, queries, config, kind=kind, workers=workers)

    states: list[QueryState] = []
    started = time.perf_counter()
    for _ in range(iterations):
        outs = run_queries(index, queries, config, kind=kind, workers=workers)
        states.extend(state for _, state in outs)
    elapsed = max(time.perf_counter() - started, 1e-9)

    total = len(queries) * iterations
    return BenchReport(
        qps=total / elapsed,
        n_queries=len(queries),
        iterations=iterations,
        warmup=warmup,
        workers=workers,
        mean_query_ms=elapsed / total * 1e3,
        mean_sched_overhead_ms=fmean(s.sched_overhead_s for s in states) * 1e3,
        mean_pairs_scored=fmean(s.pairs_scored for s in states),
    )
