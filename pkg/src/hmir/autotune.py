"""Offline configuration search under latency budgets.

``set_gran`` builds a granularity set in two phases: grow level counts by a
fixed stride until the evaluated accuracy converges, then repeatedly drop the
level whose removal costs the least accuracy, never removing a level adjacent
to the one removed just before, and stopping (with the final removal rolled
back) once accuracy would fall below the converged baseline.  ``configure``
sweeps a parameter grid and keeps, per latency budget, the best-scoring
configuration whose predicted latency fits.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from statistics import fmean
from typing import Callable, Sequence

from .model import (DecomposedQuery, HierarchicalIndex, SchedulerConfig,
                    ValidationError, _require_keys)
from .scheduler import process_query, prune_schedule
from .scoring import Similarity
from .evaluation import ndcg_at_k

logger = logging.getLogger(__name__)

# evaluator(levels, exit_tau, decay, initial_ratio) -> accuracy in [0, 1]
Evaluator = Callable[[tuple[int, ...], float | None, float, float], float]

EPS_CONV = 1e-3
EPS_DROP = 1e-3


@dataclass(frozen=True)
class LatencyModel:
    """Inputs to the analytic cost model: one term per level, each weighted by
    the fraction of candidates the schedule retains."""

    n_subqueries: float
    n_images: int
    level_counts: tuple[int, ...]
    retain: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.n_subqueries <= 0 or self.n_images < 0:
            raise ValidationError("latency model needs positive sub-query and image counts")
        if len(self.level_counts) != len(self.retain):
            raise ValidationError("one retain fraction is required per level")
        if not self.level_counts:
            raise ValidationError("latency model needs at least one level")


def predict_latency(model: LatencyModel, *, convention: str = "level") -> float:
    """Predicted pair-similarity work: n_subqueries * sum(count * t * n_images).

    ``convention`` picks which retain fraction weights each level: "level"
    uses the level's own fraction; "entering" uses the previous level's (1.0
    for the first), which matches the pairs actually scored by the scheduler.
    """
    if convention == "level":
        ts = model.retain
    elif convention == "entering":
        ts = (1.0,) + model.retain[:-1]
    else:
        raise ValidationError(f'convention must be "level" or "entering", got {convention!r}')
    return float(model.n_subqueries
                 * sum(c * t * model.n_images for c, t in zip(model.level_counts, ts)))


@dataclass(frozen=True)
class SearchRanges:
    """Discrete grids for the configuration search."""

    taus: tuple[float | None, ...]
    strides: tuple[int, ...]
    alphas: tuple[float, ...]
    ratios: tuple[float, ...]
    budgets: tuple[float, ...]

    def __post_init__(self) -> None:
        for name in ("taus", "strides", "alphas", "ratios", "budgets"):
            if not getattr(self, name):
                raise ValidationError(f"search range {name} must be non-empty")
        for s in self.strides:
            if not isinstance(s, int) or isinstance(s, bool) or s < 1:
                raise ValidationError("strides must be positive integers")
        budgets = tuple(float(b) for b in self.budgets)
        if any(b <= a for a, b in zip(budgets, budgets[1:])):
            raise ValidationError("budgets must be strictly ascending")
        if any(b <= 0 for b in budgets):
            raise ValidationError("budgets must be positive")
        object.__setattr__(self, "budgets", budgets)

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SearchRanges":
        _require_keys(obj, {"tau", "S", "alpha", "T", "budgets"}, "search ranges")
        taus = []
        for t in obj["tau"]:
            if t in (None, "disabled"):
                taus.append(None)
            else:
                taus.append(float(t))
        return cls(
            taus=tuple(taus),
            strides=tuple(obj["S"]),
            alphas=tuple(float(a) for a in obj["alpha"]),
            ratios=tuple(float(t) for t in obj["T"]),
            budgets=tuple(obj["budgets"]),
        )


@dataclass(frozen=True)
class RemovalStep:
    """One pass of the removal phase: every candidate's accuracy-without, the
    levels blocked by the adjacency rule, and what (if anything) was removed."""

    candidates: tuple[tuple[int, float], ...]
    blocked: tuple[int, ...]
    removed: int | None
    accuracy: float | None
    stop_reason: str | None


@dataclass(frozen=True)
class SetGranResult:
    levels: tuple[int, ...]
    converged_accuracy: float
    growth: tuple[tuple[tuple[int, ...], float], ...]
    removals: tuple[RemovalStep, ...]


def set_gran(stride: int, exit_tau: float | None, decay: float, initial_ratio: float,
             evaluator: Evaluator, *, max_count: int = 64, eps_conv: float = EPS_CONV,
             eps_drop: float = EPS_DROP, min_levels: int = 2) -> SetGranResult:
    """Choose a granularity set for the given scheduling parameters.

    Growth walks 1, 1+stride, 1+2*stride, ... up to ``max_count`` and stops
    once consecutive accuracies differ by less than ``eps_conv`` (after at
    least ``min_levels`` levels).  The result always keeps at least two
    levels.
    """
    if not isinstance(stride, int) or isinstance(stride, bool) or stride < 1:
        raise ValidationError("stride must be a positive integer")
    if max_count < 1 or min_levels < 2:
        raise ValidationError("max_count must be >= 1 and min_levels >= 2")

    levels = [1]
    acc = evaluator(tuple(levels), exit_tau, decay, initial_ratio)
    growth: list[tuple[tuple[int, ...], float]] = [(tuple(levels), acc)]
    prev = acc
    while levels[-1] + stride <= max_count:
        levels.append(levels[-1] + stride)
        acc = evaluator(tuple(levels), exit_tau, decay, initial_ratio)
        growth.append((tuple(levels), acc))
        if len(levels) >= min_levels and abs(acc - prev) < eps_conv:
            break
        prev = acc
    baseline = growth[-1][1]

    removals: list[RemovalStep] = []
    blocked: set[int] = set()
    while len(levels) > 2:
        candidates = tuple(
            (lvl, evaluator(tuple(l for l in levels if l != lvl), exit_tau, decay,
                            initial_ratio))
            for lvl in levels
        )
        entering_blocked = tuple(sorted(blocked))
        eligible = [(lvl, a) for lvl, a in candidates if lvl not in blocked]
        if not eligible:
            removals.append(RemovalStep(candidates, entering_blocked, None, None,
                                        "no_eligible_candidate"))
            break
        # Least accuracy loss wins; ties go to the coarsest eligible level.
        rm_level, rm_acc = max(eligible, key=lambda c: c[1])
        if rm_acc <= baseline - eps_drop:
            removals.append(RemovalStep(candidates, entering_blocked, None, rm_acc,
                                        "accuracy_floor"))
            break
        at = levels.index(rm_level)
        blocked = set()
        if at > 0:
            blocked.add(levels[at - 1])
        if at + 1 < len(levels):
            blocked.add(levels[at + 1])
        levels.pop(at)
        removals.append(RemovalStep(candidates, entering_blocked, rm_level, rm_acc, None))

    return SetGranResult(tuple(levels), baseline, tuple(growth), tuple(removals))


def make_accuracy_evaluator(index: HierarchicalIndex,
                            queries: Sequence[DecomposedQuery], *, k: int = 10,
                            kind: Similarity | str = Similarity.COSINE,
                            aggregation: str = "product",
                            include_global_additive: bool = False) -> Evaluator:
    """Mean NDCG@k of the hierarchical scheduler over a labeled dev set.

    Proposed levels missing from the index are dropped (with a one-time
    warning); a proposal with no usable level scores 0.0.
    """
    available = set(index.level_counts)
    warned = [False]

    def evaluator(levels: tuple[int, ...], exit_tau: float | None, decay: float,
                  initial_ratio: float) -> float:
        usable = tuple(l for l in levels if l in available)
        if len(usable) != len(levels) and not warned[0]:
            warned[0] = True
            logger.warning("ignoring proposed levels missing from the index: %s",
                           sorted(set(levels) - available))
        if not usable:
            return 0.0
        cfg = SchedulerConfig(k=k, mode="hierarchical", levels=usable,
                              initial_ratio=initial_ratio, decay=decay,
                              exit_tau=exit_tau, aggregation=aggregation,
                              include_global_additive=include_global_additive)
        return fmean(
            ndcg_at_k(process_query(q, index, cfg, kind=kind)[0], q.ground_truth, k)
            for q in queries
        )

    return evaluator


@dataclass(frozen=True)
class BudgetEntry:
    budget: float
    config: SchedulerConfig | None
    accuracy: float | None
    predicted_latency: float | None


@dataclass(frozen=True)
class ConfigTable:
    """Best configuration found per latency budget, ascending by budget."""

    entries: tuple[BudgetEntry, ...]

    def to_json_obj(self) -> list[dict]:
        return [
            {
                "budget": e.budget,
                "config": e.config.to_json_dict() if e.config else None,
                "accuracy": e.accuracy,
                "predicted_latency": e.predicted_latency,
            }
            for e in self.entries
        ]


def _better(accuracy: float, latency: float, key: tuple,
            incumbent: BudgetEntry, incumbent_key: tuple | None) -> bool:
    if incumbent.config is None:
        return True
    if accuracy != incumbent.accuracy:
        return accuracy > incumbent.accuracy
    if latency != incumbent.predicted_latency:
        return latency < incumbent.predicted_latency
    return incumbent_key is not None and key < incumbent_key


def configure(ranges: SearchRanges, index: HierarchicalIndex,
              queries: Sequence[DecomposedQuery], *, evaluator: Evaluator | None = None,
              k: int = 10, kind: Similarity | str = Similarity.COSINE,
              aggregation: str = "product", include_global_additive: bool = False,
              latency_convention: str = "level", max_count: int = 64,
              eps_conv: float = EPS_CONV, eps_drop: float = EPS_DROP,
              min_levels: int = 2) -> ConfigTable:
    """Grid-search scheduler configurations and fill the per-budget table.

    A grid point is installed at a budget when its predicted latency fits and
    it beats the incumbent on accuracy (then lower latency, then a fixed
    lexicographic key, for determinism).  Budgets with no feasible point map
    to an empty entry.  Accuracy is non-decreasing across ascending budgets
    because every grid point is offered to every budget.
    """
    if not queries:
        raise ValidationError("configure needs a non-empty dev query set")
    if evaluator is None:
        missing = [q.query_id for q in queries if q.ground_truth is None]
        if missing:
            raise ValidationError("default evaluator needs ground truth on every dev query")
        evaluator = make_accuracy_evaluator(
            index, queries, k=k, kind=kind, aggregation=aggregation,
            include_global_additive=include_global_additive)
    available = set(index.level_counts)
    mean_subs = fmean(q.n_subs for q in queries)

    cache: dict[tuple, tuple[tuple[int, ...], float, float]] = {}
    best: dict[float, BudgetEntry] = {b: BudgetEntry(b, None, None, None)
                                      for b in ranges.budgets}
    best_key: dict[float, tuple | None] = {b: None for b in ranges.budgets}

    for budget in ranges.budgets:
        for stride, tau, alpha, ratio in itertools.product(
                ranges.strides, ranges.taus, ranges.alphas, ranges.ratios):
            point = (stride, tau, alpha, ratio)
            if point not in cache:
                result = set_gran(stride, tau, alpha, ratio, evaluator,
                                  max_count=max_count, eps_conv=eps_conv,
                                  eps_drop=eps_drop, min_levels=min_levels)
                usable = tuple(l for l in result.levels if l in available)
                if usable:
                    accuracy = evaluator(usable, tau, alpha, ratio)
                    schedule = prune_schedule(ratio, alpha, usable)
                    latency = predict_latency(
                        LatencyModel(mean_subs, index.n_images, usable, schedule.retain),
                        convention=latency_convention)
                    cache[point] = (usable, accuracy, latency)
                else:
                    cache[point] = ((), 0.0, float("inf"))
            usable, accuracy, latency = cache[point]
            if not usable or latency > budget:
                continue
            key = (ratio, alpha, tau if tau is not None else 2.0, usable)
            if _better(accuracy, latency, key, best[budget], best_key[budget]):
                config = SchedulerConfig(
                    k=k, mode="hierarchical", levels=usable, initial_ratio=ratio,
                    decay=alpha, exit_tau=tau, aggregation=aggregation,
                    include_global_additive=include_global_additive)
                best[budget] = BudgetEntry(budget, config, accuracy, latency)
                best_key[budget] = key

    return ConfigTable(tuple(best[b] for b in ranges.budgets))
