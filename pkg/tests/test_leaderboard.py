"""Aggregation, Pareto filtering against a brute-force oracle, scoring and
ranking determinism, history series."""

import random

import pytest

from codearena.clock import utc_iso
from codearena.domain import (
    Aggregation,
    CategorySpec,
    InstanceScope,
    MetricDirection,
    MetricRecord,
    MetricSpec,
    Subaccount,
    Submission,
    SubmissionStatus,
)
from codearena.leaderboard import (
    FlagFilter,
    LeaderboardEntry,
    MissingAggregate,
    RangeFilter,
    UndominatedFilter,
    UnknownMetric,
    UnknownScoringFunction,
    aggregate,
    aggregate_records,
    board_export,
    history_series,
    pareto_filter,
    rank,
    score,
)

MIN = MetricDirection.MINIMIZE
MAX = MetricDirection.MAXIMIZE


def entry(subaccount_id, **aggregates):
    flags = aggregates.pop("flags", {})
    return LeaderboardEntry(subaccount_id, f"sub-{subaccount_id}", aggregates, flags)


def record(instance, name, value, scope=InstanceScope.HIDDEN):
    return MetricRecord(instance, name, value, scope)


def submission(sid, subaccount, t, records, status=SubmissionStatus.DONE):
    return Submission(
        submission_id=sid,
        subaccount_id=subaccount,
        competition_id="c",
        submit_time=utc_iso(t),
        commit_hash="a" * 40,
        status=status,
        metric_records=tuple(records),
    )


SCHEMA = (
    MetricSpec("runtime", MIN, "s", Aggregation.MEAN),
    MetricSpec("memory", MIN, "b", Aggregation.MAX),
    MetricSpec("solved", MAX, "", Aggregation.COUNT_SUCCESS),
    MetricSpec("total_cost", MIN, "", Aggregation.SUM),
)


class TestAggregation:
    def test_mean(self):
        aggs = aggregate_records(
            [record("i1", "runtime", 0.5), record("i2", "runtime", 1.5)], SCHEMA
        )
        assert aggs["runtime"] == pytest.approx(1.0)

    def test_max_sum_count(self):
        records = [
            record("i1", "memory", 100),
            record("i2", "memory", 300),
            record("i1", "solved", 1),
            record("i2", "solved", 0),
            record("i1", "total_cost", 2.5),
            record("i2", "total_cost", 4.0),
        ]
        aggs = aggregate_records(records, SCHEMA)
        assert aggs["memory"] == 300
        assert aggs["solved"] == 1
        assert aggs["total_cost"] == pytest.approx(6.5)

    def test_debug_scope_excluded(self):
        aggs = aggregate_records(
            [record("d1", "runtime", 99.0, InstanceScope.DEBUG), record("h1", "runtime", 1.0)],
            SCHEMA,
        )
        assert aggs["runtime"] == pytest.approx(1.0)

    def test_aggregates_cover_schema_exactly(self):
        aggs = aggregate_records([], SCHEMA)
        assert set(aggs) == {m.metric_name for m in SCHEMA}

    def test_latest_done_selection(self):
        subs = [
            submission("s1", "a", 100, [record("i", "runtime", 5.0)]),
            submission("s2", "a", 200, [record("i", "runtime", 9.0)]),
        ]
        entries = aggregate(subs, {}, SCHEMA, "latest_done")
        assert entries[0].source_submission_id == "s2"

    def test_best_by_selection(self):
        subs = [
            submission("s1", "a", 100, [record("i", "total_cost", 10.0)]),
            submission("s2", "a", 200, [record("i", "total_cost", 7.0)]),
        ]
        entries = aggregate(subs, {}, SCHEMA, "best_by:total_cost")
        assert entries[0].source_submission_id == "s2"

    def test_non_done_submissions_excluded(self):
        subs = [
            submission("s1", "a", 100, [], status=SubmissionStatus.FAILED),
        ]
        assert aggregate(subs, {}, SCHEMA, "latest_done") == []

    def test_flags_from_subaccount_extra_data(self):
        accounts = {
            "a": Subaccount("a", "u", "c", "Team A", extra_data={"optimal": True, "note": "x"})
        }
        subs = [submission("s1", "a", 100, [record("i", "runtime", 1.0)])]
        entries = aggregate(subs, accounts, SCHEMA, "latest_done")
        assert entries[0].flags == {"optimal": True}


def brute_force_pareto(entries, compare_on):
    """Independent O(n^2) oracle: direct pairwise domination scan."""

    def vec(e):
        out = []
        for name, direction in compare_on:
            v = e.aggregates[name]
            out.append(v if direction == MIN else -v)
        return out

    keep = []
    for a in entries:
        va = vec(a)
        dominated = False
        for b in entries:
            vb = vec(b)
            if vb != va and all(x <= y for x, y in zip(vb, va)):
                dominated = True
                break
        if not dominated:
            keep.append(a)
    return keep


class TestPareto:
    def test_strict_domination(self):
        entries = [entry("a", runtime=1, memory=1), entry("b", runtime=2, memory=2)]
        front = pareto_filter(entries, [("runtime", MIN), ("memory", MIN)])
        assert [e.subaccount_id for e in front] == ["a"]

    def test_incomparable_pair_both_retained(self):
        entries = [entry("a", runtime=1, memory=2), entry("b", runtime=2, memory=1)]
        front = pareto_filter(entries, [("runtime", MIN), ("memory", MIN)])
        assert {e.subaccount_id for e in front} == {"a", "b"}

    def test_identical_vectors_all_retained(self):
        entries = [entry("a", runtime=1), entry("b", runtime=1), entry("c", runtime=2)]
        front = pareto_filter(entries, [("runtime", MIN)])
        assert {e.subaccount_id for e in front} == {"a", "b"}

    def test_maximize_direction(self):
        entries = [entry("a", solved=5), entry("b", solved=3)]
        front = pareto_filter(entries, [("solved", MAX)])
        assert [e.subaccount_id for e in front] == ["a"]

    def test_unknown_metric(self):
        with pytest.raises(UnknownMetric):
            pareto_filter([entry("a", runtime=1)], [("ghost", MIN)])

    def test_empty_compare_on_rejected(self):
        with pytest.raises(ValueError):
            pareto_filter([entry("a", runtime=1)], [])

    def test_matches_brute_force_oracle_randomised(self):
        rng = random.Random(99)
        for trial in range(100):
            n = rng.randint(0, 60)
            metric_count = rng.randint(1, 4)
            names = [f"m{k}" for k in range(metric_count)]
            compare = [(name, rng.choice([MIN, MAX])) for name in names]
            entries = []
            for i in range(n):
                aggs = {name: float(rng.randint(0, 8)) for name in names}  # duplicates likely
                entries.append(entry(f"e{i}", **aggs))
            got = {e.subaccount_id for e in pareto_filter(entries, compare)}
            want = {e.subaccount_id for e in brute_force_pareto(entries, compare)}
            assert got == want, f"trial {trial}"

    def test_idempotent(self):
        rng = random.Random(4)
        entries = [
            entry(f"e{i}", runtime=rng.randint(0, 10), memory=rng.randint(0, 10))
            for i in range(50)
        ]
        compare = [("runtime", MIN), ("memory", MIN)]
        once = pareto_filter(entries, compare)
        twice = pareto_filter(once, compare)
        assert [e.subaccount_id for e in once] == [e.subaccount_id for e in twice]


class TestScoring:
    def test_single_metric_sign_convention(self):
        e = entry("a", runtime=3.2)
        assert score(e, "single_metric", {"metric": "runtime", "direction": "minimize"}) == -3.2

    def test_weighted_sum_zero_weights(self):
        e = entry("a", runtime=5, solved=2)
        params = {
            "terms": [
                {"metric": "runtime", "weight": 0, "direction": "minimize"},
                {"metric": "solved", "weight": 0, "direction": "maximize"},
            ]
        }
        assert score(e, "weighted_sum", params) == 0.0

    def test_success_then_metric_lexicographic(self):
        params = {"success_metric": "solved", "metric": "runtime", "direction": "minimize"}
        slow = score(entry("a", solved=5, runtime=9), "success_then_metric", params)
        fast = score(entry("b", solved=5, runtime=7), "success_then_metric", params)
        more_solved = score(entry("c", solved=6, runtime=50), "success_then_metric", params)
        assert fast > slow
        assert more_solved > fast

    def test_unknown_function(self):
        with pytest.raises(UnknownScoringFunction):
            score(entry("a", runtime=1), "secret_formula")

    def test_missing_aggregate(self):
        with pytest.raises(MissingAggregate):
            score(entry("a", runtime=1), "single_metric", {"metric": "ghost"})


CATEGORY = CategorySpec(
    "fastest", "single_metric", {"metric": "runtime", "direction": "minimize"}, ("memory",)
)


class TestRank:
    def test_competition_ranking_1_1_3(self):
        entries = [entry("a", runtime=5), entry("b", runtime=5), entry("c", runtime=3)]
        board = rank(entries, CategorySpec("c", "single_metric",
                                           {"metric": "runtime", "direction": "maximize"}))
        assert [r.rank for r in board.rows] == [1, 1, 3]

    def test_flag_filter(self):
        entries = [
            entry("a", runtime=1, flags={"optimal": True}),
            entry("b", runtime=2, flags={"optimal": False}),
            entry("c", runtime=3, flags={"optimal": True}),
        ]
        board = rank(entries, CATEGORY, [FlagFilter("optimal", True)])
        assert {r.entry.subaccount_id for r in board.rows} == {"a", "c"}

    def test_range_filter(self):
        entries = [entry("a", runtime=1, memory=0), entry("b", runtime=10, memory=0)]
        board = rank(entries, CATEGORY, [RangeFilter("runtime", None, 5.0)])
        assert [r.entry.subaccount_id for r in board.rows] == ["a"]

    def test_undominated_filter_composes(self):
        entries = [
            entry("a", runtime=1, memory=9),
            entry("b", runtime=9, memory=1),
            entry("c", runtime=10, memory=10),
        ]
        board = rank(
            entries, CATEGORY, [UndominatedFilter((("runtime", MIN), ("memory", MIN)))]
        )
        assert {r.entry.subaccount_id for r in board.rows} == {"a", "b"}
        assert board.applied_filters == ("undominated(runtime,memory)",)

    def test_empty_board(self):
        board = rank([], CATEGORY)
        assert board.rows == ()

    def test_deterministic_under_permutation(self):
        rng = random.Random(12)
        entries = [
            entry(f"e{i}", runtime=rng.randint(0, 5), memory=rng.randint(0, 5))
            for i in range(30)
        ]
        base = rank(entries, CATEGORY)
        for _ in range(5):
            shuffled = entries[:]
            rng.shuffle(shuffled)
            assert rank(shuffled, CATEGORY) == base

    def test_rank_order_invariant_under_affine_weighted_sum(self):
        rng = random.Random(13)
        entries = [
            entry(f"e{i}", runtime=rng.uniform(0, 10), solved=rng.randint(0, 10))
            for i in range(25)
        ]

        def cat(scale, shift):
            terms = [
                {"metric": "runtime", "weight": 2.0 * scale, "direction": "minimize"},
                {"metric": "solved", "weight": 1.0 * scale, "direction": "maximize"},
            ]
            if shift:
                terms.append({"metric": "one", "weight": shift, "direction": "maximize"})
            return CategorySpec("w", "weighted_sum", {"terms": terms})

        for e in entries:
            e.aggregates["one"] = 1.0  # constant metric used to apply the shift
        base_order = [r.entry.subaccount_id for r in rank(entries, cat(1.0, 0.0)).rows]
        scaled_order = [r.entry.subaccount_id for r in rank(entries, cat(7.5, 3.0)).rows]
        assert base_order == scaled_order

    def test_tie_break_uses_declared_metrics(self):
        entries = [
            entry("beta", runtime=1, memory=5),
            entry("alpha", runtime=1, memory=3),
        ]
        board = rank(entries, CATEGORY, schema=SCHEMA)
        # equal scores share rank 1 but order by memory (minimize)
        assert [r.entry.subaccount_id for r in board.rows] == ["alpha", "beta"]
        assert [r.rank for r in board.rows] == [1, 1]


class TestHistory:
    CAT = CategorySpec("c", "single_metric", {"metric": "total_cost", "direction": "minimize"})

    def test_absent_before_first_submission(self):
        subs = [submission("s1", "a", 5, [record("i", "total_cost", 7.0)])]
        series = history_series(subs, {}, SCHEMA, self.CAT, [utc_iso(1), utc_iso(10)])
        assert series["a"][0][1] is None
        assert series["a"][1][1] == -7.0

    def test_running_best(self):
        subs = [
            submission("s1", "a", 10, [record("i", "total_cost", 5.0)]),
            submission("s2", "a", 20, [record("i", "total_cost", 3.0)]),
            submission("s3", "a", 30, [record("i", "total_cost", 9.0)]),
        ]
        grid = [utc_iso(t) for t in (15, 25, 35)]
        series = history_series(subs, {}, SCHEMA, self.CAT, grid)
        assert [s for _, s in series["a"]] == [-5.0, -3.0, -3.0]

    def test_matches_naive_per_point_scan(self):
        rng = random.Random(21)
        subs = []
        for i in range(60):
            subs.append(
                submission(
                    f"s{i}",
                    f"acct{rng.randint(0, 5)}",
                    rng.uniform(0, 1000),
                    [record("i", "total_cost", rng.uniform(0, 100))],
                )
            )
        grid = [utc_iso(t) for t in sorted(rng.uniform(0, 1100) for _ in range(20))]
        series = history_series(subs, {}, SCHEMA, self.CAT, grid)
        for acct, points in series.items():
            for t, got in points:
                eligible = [
                    -aggregate_records(s.metric_records, SCHEMA)["total_cost"]
                    for s in subs
                    if s.subaccount_id == acct and s.submit_time <= t
                ]
                want = max(eligible) if eligible else None
                assert got == pytest.approx(want) if want is not None else got is None

    def test_final_point_agrees_with_rank_over_best_scores(self):
        rng = random.Random(22)
        subs = []
        for i in range(40):
            subs.append(
                submission(
                    f"s{i}",
                    f"acct{rng.randint(0, 4)}",
                    rng.uniform(0, 500),
                    [record("i", "total_cost", rng.uniform(0, 50))],
                )
            )
        grid = [utc_iso(600)]
        series = history_series(subs, {}, SCHEMA, self.CAT, grid)
        scorer = lambda e: score(e, self.CAT.scoring_function_id, self.CAT.scoring_params)
        entries = aggregate(subs, {}, SCHEMA, "best_score", scorer=scorer)
        board = rank(entries, self.CAT, schema=SCHEMA)
        for row in board.rows:
            assert series[row.entry.subaccount_id][-1][1] == pytest.approx(row.score)

    def test_unsorted_grid_rejected(self):
        with pytest.raises(ValueError):
            history_series([], {}, SCHEMA, self.CAT, [utc_iso(10), utc_iso(5)])


class TestExport:
    def test_export_shape(self):
        entries = [entry("a", runtime=1.5, memory=2, solved=1, total_cost=3)]
        board = rank(entries, CATEGORY, schema=SCHEMA)
        doc = board_export(board)
        assert doc["category"] == "fastest"
        assert doc["rows"][0]["rank"] == 1
        assert doc["rows"][0]["subaccount"] == "a"
        assert set(doc["rows"][0]["aggregates"]) == {"runtime", "memory", "solved", "total_cost"}
