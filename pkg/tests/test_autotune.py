"""Latency model, granularity search, and the budgeted grid sweep.

Most tests drive set_gran and configure with small stub evaluators whose exact
traces were worked out by hand; the stubs make every growth, removal, blocking,
and tie-break decision checkable step by step.
"""

import numpy as np
import pytest

from hmir import (DecomposedQuery, HierarchicalIndex, LatencyModel, SearchRanges,
                  SchedulerConfig, SynthSpec, ValidationError, configure, generate,
                  make_accuracy_evaluator, predict_latency, set_gran)


def constant(levels, exit_tau, decay, initial_ratio):
    return 0.75


class TestLatencyModel:
    def test_frozen_worked_example(self):
        model = LatencyModel(2, 100, (4, 16), (0.5, 0.25))
        assert predict_latency(model) == 1200.0

    def test_entering_convention_shifts_fractions(self):
        model = LatencyModel(2, 100, (4, 16), (0.5, 0.25))
        # First level sees everyone; each later level sees the previous cut.
        assert predict_latency(model, convention="entering") == 2400.0

    def test_fractional_subquery_count(self):
        model = LatencyModel(2.5, 10, (4,), (1.0,))
        assert predict_latency(model) == 100.0

    def test_bad_convention(self):
        model = LatencyModel(1, 1, (1,), (1.0,))
        with pytest.raises(ValidationError, match="convention"):
            predict_latency(model, convention="both")

    def test_model_validation(self):
        with pytest.raises(ValidationError):
            LatencyModel(0, 10, (1,), (1.0,))
        with pytest.raises(ValidationError):
            LatencyModel(2, 10, (1, 4), (1.0,))
        with pytest.raises(ValidationError):
            LatencyModel(2, 10, (), ())


class TestSearchRanges:
    def test_json_round_trip_with_disabled_tau(self):
        ranges = SearchRanges.from_json_dict({
            "tau": ["disabled", 0.9, None], "S": [3, 5], "alpha": [0.8],
            "T": [0.2], "budgets": [100, 200]})
        assert ranges.taus == (None, 0.9, None)
        assert ranges.strides == (3, 5)
        assert ranges.budgets == (100.0, 200.0)

    def test_missing_key(self):
        with pytest.raises(ValidationError, match="missing keys"):
            SearchRanges.from_json_dict({"tau": [None], "S": [1], "alpha": [1.0],
                                         "T": [1.0]})

    def test_grid_validation(self):
        with pytest.raises(ValidationError, match="non-empty"):
            SearchRanges((), (1,), (1.0,), (1.0,), (10.0,))
        with pytest.raises(ValidationError, match="positive integers"):
            SearchRanges((None,), (0,), (1.0,), (1.0,), (10.0,))
        with pytest.raises(ValidationError, match="ascending"):
            SearchRanges((None,), (1,), (1.0,), (1.0,), (20.0, 10.0))
        with pytest.raises(ValidationError, match="positive"):
            SearchRanges((None,), (1,), (1.0,), (1.0,), (-5.0, 10.0))


class TestSetGranGrowth:
    def test_constant_accuracy_full_trace(self):
        """stride 3, cap 13, floor 5 levels: grow to (1,4,7,10,13), then peel
        1, 7, 13 under the adjacency rule, ending at (4, 10)."""
        result = set_gran(3, None, 1.0, 1.0, constant, max_count=13, min_levels=5)
        assert [lv for lv, _ in result.growth] == [
            (1,), (1, 4), (1, 4, 7), (1, 4, 7, 10), (1, 4, 7, 10, 13)]
        assert result.converged_accuracy == 0.75
        assert [s.removed for s in result.removals] == [1, 7, 13]
        assert [s.blocked for s in result.removals] == [(), (4,), (4, 10)]
        assert result.levels == (4, 10)
        # Ends on the two-level floor, not on a recorded stop.
        assert all(s.stop_reason is None for s in result.removals)

    def test_growth_stops_on_convergence(self):
        def diminishing(levels, *_):
            return 1.0 - 2.0 ** -len(levels)

        result = set_gran(1, None, 1.0, 1.0, diminishing, max_count=64)
        # Increment at n levels is 2^-n; first below 1e-3 at n = 10.
        assert len(result.growth) == 10
        assert result.growth[-1][0][-1] == 10

    def test_growth_stops_at_cap(self):
        result = set_gran(5, None, 1.0, 1.0, constant, max_count=12, min_levels=99)
        assert [lv for lv, _ in result.growth] == [(1,), (1, 6), (1, 6, 11)]
        assert result.levels == (6, 11)

    def test_evaluator_sees_scheduling_parameters(self):
        calls = []

        def spy(levels, exit_tau, decay, initial_ratio):
            calls.append((levels, exit_tau, decay, initial_ratio))
            return 0.5

        set_gran(2, 0.9, 0.8, 0.3, spy, max_count=5)
        assert calls[0] == ((1,), 0.9, 0.8, 0.3)
        assert all(c[1:] == (0.9, 0.8, 0.3) for c in calls)

    def test_parameter_validation(self):
        with pytest.raises(ValidationError):
            set_gran(0, None, 1.0, 1.0, constant)
        with pytest.raises(ValidationError):
            set_gran(True, None, 1.0, 1.0, constant)
        with pytest.raises(ValidationError):
            set_gran(3, None, 1.0, 1.0, constant, max_count=0)
        with pytest.raises(ValidationError):
            set_gran(3, None, 1.0, 1.0, constant, min_levels=1)


class TestSetGranRemoval:
    def test_accuracy_floor_rolls_back(self):
        """Once only load-bearing levels remain, the best removal still costs
        too much; it is recorded as a stop and not applied."""
        def value_of(levels, *_):
            return 1.0 - 0.05 * len({1, 4, 7} - set(levels))

        result = set_gran(3, None, 1.0, 1.0, value_of, max_count=10)
        assert [lv for lv, _ in result.growth] == [
            (1,), (1, 4), (1, 4, 7), (1, 4, 7, 10)]
        assert result.converged_accuracy == 1.0
        first, last = result.removals
        assert first.removed == 10 and first.stop_reason is None
        assert last.removed is None
        assert last.stop_reason == "accuracy_floor"
        assert last.accuracy == pytest.approx(0.95)
        assert result.levels == (1, 4, 7)

    def test_load_bearing_level_survives(self):
        """A single scale carrying all the accuracy is never the least-loss
        candidate, so the peeling converges around it."""
        def needs_seven(levels, *_):
            return 1.0 if 7 in levels else 0.9

        result = set_gran(3, None, 1.0, 1.0, needs_seven, max_count=13,
                          min_levels=5)
        assert 7 in result.levels
        assert all(s.removed != 7 for s in result.removals)

    def test_candidates_cover_current_levels(self):
        result = set_gran(3, None, 1.0, 1.0, constant, max_count=13, min_levels=5)
        expected_levels = [(1, 4, 7, 10, 13), (4, 7, 10, 13), (4, 10, 13)]
        for step, levels in zip(result.removals, expected_levels):
            assert tuple(lvl for lvl, _ in step.candidates) == levels

    def test_no_adjacent_removals_back_to_back(self):
        result = set_gran(2, None, 1.0, 1.0, constant, max_count=21, min_levels=8)
        for prev, cur in zip(result.removals, result.removals[1:]):
            if cur.removed is not None:
                assert cur.removed not in cur.blocked
                assert prev.removed != cur.removed


def tiny_index_and_queries():
    index, queries = generate(SynthSpec(
        n_images=20, dim=8, levels=(1, 2, 4), n_queries=6, subs_per_query=2,
        planted_levels=(2,), noise=0.02, seed=5))
    return index, queries


class TestMakeAccuracyEvaluator:
    def test_planted_set_scores_perfectly(self):
        index, queries = tiny_index_and_queries()
        evaluator = make_accuracy_evaluator(index, queries, k=5)
        assert evaluator((1, 2, 4), None, 1.0, 1.0) == 1.0

    def test_unknown_levels_dropped_with_one_warning(self, caplog):
        index, queries = tiny_index_and_queries()
        evaluator = make_accuracy_evaluator(index, queries, k=5)
        with caplog.at_level("WARNING", logger="hmir.autotune"):
            a = evaluator((1, 2, 4, 99), None, 1.0, 1.0)
            b = evaluator((1, 2, 4, 98), None, 1.0, 1.0)
        assert a == b == evaluator((1, 2, 4), None, 1.0, 1.0)
        assert len(caplog.records) == 1

    def test_nothing_usable_scores_zero(self):
        index, queries = tiny_index_and_queries()
        evaluator = make_accuracy_evaluator(index, queries)
        assert evaluator((37,), None, 1.0, 1.0) == 0.0


def plain_queries(n=2, dim=4, subs=2):
    rng = np.random.default_rng(0)
    v = rng.standard_normal
    return [DecomposedQuery(f"q{i}", v(dim), v((subs, dim)), None) for i in range(n)]


def plain_index(n=10, dim=4, counts=(1, 2, 4, 8)):
    rng = np.random.default_rng(1)
    arrays = [rng.standard_normal((n, c, dim)).astype(np.float32) for c in counts]
    return HierarchicalIndex([f"i{j}" for j in range(n)], counts, arrays)


class TestConfigure:
    def grid(self, budgets, taus=(None,)):
        return SearchRanges(taus=taus, strides=(3,), alphas=(1.0, 0.5),
                            ratios=(1.0, 0.5), budgets=budgets)

    def test_constant_accuracy_prefers_cheapest(self):
        # All four grid points tie on accuracy and settle on levels (1, 4);
        # per-query work is 2 * 10 * (1*aT + 4*a^2*T) = 100, 50, 30, or 15.
        table = configure(self.grid((1000.0,)), plain_index(), plain_queries(),
                          evaluator=constant)
        entry = table.entries[0]
        assert entry.predicted_latency == 15.0
        assert entry.accuracy == 0.75
        assert entry.config.initial_ratio == 0.5 and entry.config.decay == 0.5
        assert entry.config.levels == (1, 4)
        assert entry.config.mode == "hierarchical"

    def test_infeasible_budget_left_empty(self):
        table = configure(self.grid((10.0, 1000.0)), plain_index(), plain_queries(),
                          evaluator=constant)
        empty, filled = table.entries
        assert empty.config is None and empty.accuracy is None
        assert empty.predicted_latency is None and empty.budget == 10.0
        assert filled.config is not None

    def test_accuracy_non_decreasing_in_budget(self):
        def ratio_rewards(levels, exit_tau, decay, initial_ratio):
            return initial_ratio

        table = configure(self.grid((20.0, 40.0, 1000.0)), plain_index(),
                          plain_queries(), evaluator=ratio_rewards)
        accs = [e.accuracy for e in table.entries]
        assert accs == [0.5, 1.0, 1.0]
        # Budget 40 can afford the full-T point only at the faster decay.
        assert table.entries[1].config.initial_ratio == 1.0
        assert table.entries[1].config.decay == 0.5
        assert table.entries[1].predicted_latency == 30.0
        assert table.entries[2].predicted_latency == 30.0

    def test_exact_tie_falls_to_lexicographic_key(self):
        # tau changes neither the stub accuracy nor the cost model, so the
        # fixed key ordering decides (a numeric tau sorts before disabled).
        table = configure(self.grid((1000.0,), taus=(None, 0.9)), plain_index(),
                          plain_queries(), evaluator=constant)
        assert table.entries[0].config.exit_tau == 0.9

    def test_grid_work_independent_of_budget_count(self):
        counts = []
        for budgets in ((1000.0,), (50.0, 100.0, 1000.0)):
            calls = [0]

            def counting(levels, exit_tau, decay, initial_ratio):
                calls[0] += 1
                return 0.75

            configure(self.grid(budgets), plain_index(), plain_queries(),
                      evaluator=counting)
            counts.append(calls[0])
        assert counts[0] == counts[1]

    def test_table_serialization(self):
        table = configure(self.grid((10.0, 1000.0)), plain_index(), plain_queries(),
                          evaluator=constant)
        obj = table.to_json_obj()
        assert obj[0] == {"budget": 10.0, "config": None, "accuracy": None,
                          "predicted_latency": None}
        assert obj[1]["config"]["T"] == 0.5
        cfg = SchedulerConfig.from_json_dict(obj[1]["config"])
        assert cfg == table.entries[1].config

    def test_default_evaluator_needs_ground_truth(self):
        with pytest.raises(ValidationError, match="non-empty"):
            configure(self.grid((10.0,)), plain_index(), [])
        with pytest.raises(ValidationError, match="ground truth"):
            configure(self.grid((10.0,)), plain_index(), plain_queries())

    def test_end_to_end_with_real_evaluator(self):
        index, queries = tiny_index_and_queries()
        ranges = SearchRanges(taus=(None,), strides=(1,), alphas=(1.0,),
                              ratios=(1.0,), budgets=(10.0, 10000.0))
        table = configure(ranges, index, queries, k=5, max_count=4)
        assert table.entries[0].config is None
        best = table.entries[1]
        assert best.config is not None
        assert best.accuracy == 1.0
        assert best.predicted_latency <= 10000.0
