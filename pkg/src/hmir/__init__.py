"""Hierarchical multi-vector image retrieval.

A library and CLI for scoring decomposed queries against per-image segment
embeddings stored at multiple granularity levels, with candidate pruning,
rank-stability early exit, evaluation tooling, and latency-budgeted
configuration search.
"""

from .model import (AGGREGATIONS, MODES, DecomposedQuery, HierarchicalIndex,
                    RankedResult, SchedulerConfig, ValidationError, load_index,
                    load_queries, save_index, save_queries)
from .scoring import (LOG_FLOOR, Similarity, aggregate_maxima, global_similarities,
                      oracle_topk, pair_sims, score_flat_mvr, score_hierarchical,
                      score_single, sim, subquery_level_maxima, top_k)
from .scheduler import (PruneSchedule, QueryState, kendall_tau, process_query,
                        prune_schedule)
from .autotune import (BudgetEntry, ConfigTable, LatencyModel, SearchRanges,
                       SetGranResult, configure, make_accuracy_evaluator,
                       predict_latency, set_gran)
from .evaluation import (BenchReport, Diagnostics, EvalReport, LevelProfile, bench,
                         evaluate, ndcg_at_k, recall_at_k, run_queries)
from .synth import SynthSpec, generate, load_synth_spec

__version__ = "0.1.0"

__all__ = [
    "AGGREGATIONS", "MODES", "DecomposedQuery", "HierarchicalIndex", "RankedResult",
    "SchedulerConfig", "ValidationError", "load_index", "load_queries", "save_index",
    "save_queries", "LOG_FLOOR", "Similarity", "aggregate_maxima",
    "global_similarities", "oracle_topk", "pair_sims", "score_flat_mvr",
    "score_hierarchical", "score_single", "sim", "subquery_level_maxima", "top_k",
    "PruneSchedule", "QueryState", "kendall_tau", "process_query", "prune_schedule",
    "BudgetEntry", "ConfigTable", "LatencyModel", "SearchRanges", "SetGranResult",
    "configure", "make_accuracy_evaluator", "predict_latency", "set_gran",
    "BenchReport", "Diagnostics", "EvalReport", "LevelProfile", "bench", "evaluate",
    "ndcg_at_k", "recall_at_k", "run_queries", "SynthSpec", "generate",
    "load_synth_spec", "__version__",
]
