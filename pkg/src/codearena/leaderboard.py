"""Leaderboard computation.

Aggregates hidden-scope metric records into one entry per subaccount,
applies filters (flag equality, metric ranges, and the undominated/Pareto
filter), scores entries with pluggable per-category scoring functions and
ranks them competition-style (equal scores share a rank: 1, 1, 3).

The shipped scoring functions (weighted_sum, single_metric,
success_then_metric) are NON-CANONICAL examples; real competitions register
their own. All computation here is pure and snapshot-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence, Union

from .domain import (
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


class LeaderboardError(Exception):
    pass


class UnknownMetric(LeaderboardError):
    pass


class UnknownScoringFunction(LeaderboardError):
    pass


class MissingAggregate(LeaderboardError):
    pass


@dataclass(frozen=True)
class LeaderboardEntry:
    subaccount_id: str
    source_submission_id: str
    aggregates: Mapping[str, float]
    flags: Mapping[str, bool] = field(default_factory=dict)
    display_name: str = ""


@dataclass(frozen=True)
class RankedRow:
    rank: int
    entry: LeaderboardEntry
    score: float


@dataclass(frozen=True)
class RankedBoard:
    category_name: str
    rows: tuple[RankedRow, ...]
    applied_filters: tuple[str, ...] = ()


# -- aggregation -----------------------------------------------------------


def aggregate_records(
    records: Sequence[MetricRecord], schema: Sequence[MetricSpec]
) -> dict[str, float]:
    """Fold one submission's hidden-scope records into per-metric aggregates.
    Aggregation over no records yields 0.0. count_success counts values > 0."""
    out: dict[str, float] = {}
    for spec in schema:
        values = [
            r.value
            for r in records
            if r.metric_name == spec.metric_name and r.scope == InstanceScope.HIDDEN
        ]
        if spec.aggregation == Aggregation.SUM:
            out[spec.metric_name] = float(sum(values))
        elif spec.aggregation == Aggregation.MEAN:
            out[spec.metric_name] = float(sum(values) / len(values)) if values else 0.0
        elif spec.aggregation == Aggregation.MAX:
            out[spec.metric_name] = float(max(values)) if values else 0.0
        elif spec.aggregation == Aggregation.COUNT_SUCCESS:
            out[spec.metric_name] = float(sum(1 for v in values if v > 0))
        else:  # pragma: no cover - closed enum
            raise LeaderboardError(f"unknown aggregation {spec.aggregation}")
    return out


def _entry_for(sub: Submission, subaccount: Optional[Subaccount], schema) -> LeaderboardEntry:
    flags = {}
    display = ""
    if subaccount is not None:
        display = subaccount.display_name
        flags = {
            k: bool(v)
            for k, v in subaccount.extra_data.items()
            if isinstance(v, bool)
        }
    return LeaderboardEntry(
        subaccount_id=sub.subaccount_id,
        source_submission_id=sub.submission_id,
        aggregates=aggregate_records(sub.metric_records, schema),
        flags=flags,
        display_name=display,
    )


def aggregate(
    submissions: Sequence[Submission],
    subaccounts: Mapping[str, Subaccount],
    schema: Sequence[MetricSpec],
    selection: str = "latest_done",
    scorer: Optional[Callable[[LeaderboardEntry], float]] = None,
) -> list[LeaderboardEntry]:
    """One entry per subaccount that has at least one done submission.

    selection picks the representative submission: "latest_done" (newest),
    "best_by:<metric>" (best aggregate per that metric's direction), or
    "best_score" (highest score under the supplied scorer).
    """
    done = [s for s in submissions if s.status == SubmissionStatus.DONE]
    by_subaccount: dict[str, list[Submission]] = {}
    for sub in done:
        by_subaccount.setdefault(sub.subaccount_id, []).append(sub)

    schema_by_name = {m.metric_name: m for m in schema}
    entries = []
    for subaccount_id, subs in sorted(by_subaccount.items()):
        candidates = [
            _entry_for(s, subaccounts.get(subaccount_id), schema)
            for s in sorted(subs, key=lambda s: (s.submit_time, s.submission_id))
        ]
        if selection == "latest_done":
            chosen = candidates[-1]
        elif selection.startswith("best_by:"):
            metric = selection.split(":", 1)[1]
            spec = schema_by_name.get(metric)
            if spec is None:
                raise UnknownMetric(metric)
            sign = 1.0 if spec.direction == MetricDirection.MAXIMIZE else -1.0
            chosen = max(candidates, key=lambda e: sign * e.aggregates[metric])
        elif selection == "best_score":
            if scorer is None:
                raise LeaderboardError("best_score selection needs a scorer")
            chosen = max(candidates, key=scorer)
        else:
            raise LeaderboardError(f"unknown selection policy {selection!r}")
        entries.append(chosen)
    return entries


# -- Pareto filter -----------------------------------------------------------


def _normalised_vectors(
    entries: Sequence[LeaderboardEntry],
    compare_on: Sequence[tuple[str, "MetricDirection | str"]],
) -> list[tuple[float, ...]]:
    vectors = []
    for entry in entries:
        vec = []
        for name, direction in compare_on:
            if name not in entry.aggregates:
                raise UnknownMetric(name)
            value = entry.aggregates[name]
            direction = MetricDirection(direction)
            vec.append(value if direction == MetricDirection.MINIMIZE else -value)
        vectors.append(tuple(vec))
    return vectors


def pareto_filter(
    entries: Sequence[LeaderboardEntry],
    compare_on: Sequence[tuple[str, "MetricDirection | str"]],
) -> list[LeaderboardEntry]:
    """The undominated subset: an entry is dropped iff some other entry is
    at least as good on every compared metric and strictly better on one.
    Entries with identical vectors are mutually non-dominating and all stay.

    Lexicographic-sort scan: a later vector can never strictly dominate an
    earlier one, so one pass against the running front suffices.
    """
    if not compare_on:
        raise ValueError("compare_on must name at least one metric")
    vectors = _normalised_vectors(entries, compare_on)
    order = sorted(range(len(entries)), key=lambda i: vectors[i])
    front: list[tuple[float, ...]] = []
    keep = [False] * len(entries)
    for i in order:
        candidate = vectors[i]
        dominated = False
        for member in front:
            if member != candidate and all(m <= c for m, c in zip(member, candidate)):
                dominated = True
                break
        if not dominated:
            keep[i] = True
            front.append(candidate)
    return [e for e, k in zip(entries, keep) if k]


# -- scoring -----------------------------------------------------------------


def _direction_sign(direction: "MetricDirection | str") -> float:
    return 1.0 if MetricDirection(direction) == MetricDirection.MAXIMIZE else -1.0


def _get_aggregate(aggregates: Mapping[str, float], name: str) -> float:
    try:
        return aggregates[name]
    except KeyError:
        raise MissingAggregate(name) from None


def _weighted_sum(aggregates: Mapping[str, float], params: Mapping[str, Any]) -> float:
    total = 0.0
    for term in params.get("terms", ()):
        sign = _direction_sign(term.get("direction", "maximize"))
        total += float(term.get("weight", 1.0)) * sign * _get_aggregate(aggregates, term["metric"])
    return total


def _single_metric(aggregates: Mapping[str, float], params: Mapping[str, Any]) -> float:
    sign = _direction_sign(params.get("direction", "maximize"))
    return sign * _get_aggregate(aggregates, params["metric"])


def _success_then_metric(aggregates: Mapping[str, float], params: Mapping[str, Any]) -> float:
    # lexicographic (success count, then metric) flattened into one number;
    # valid while |metric contribution| stays below the weight
    weight = float(params.get("success_weight", 1e9))
    success = _get_aggregate(aggregates, params.get("success_metric", "success"))
    sign = _direction_sign(params.get("direction", "minimize"))
    return success * weight + sign * _get_aggregate(aggregates, params["metric"])


ScoringFunction = Callable[[Mapping[str, float], Mapping[str, Any]], float]

# example functions only; competitions register their own real formulas
SCORING_FUNCTIONS: dict[str, ScoringFunction] = {
    "weighted_sum": _weighted_sum,
    "single_metric": _single_metric,
    "success_then_metric": _success_then_metric,
}


def register_scoring_function(fn_id: str, fn: ScoringFunction) -> None:
    SCORING_FUNCTIONS[fn_id] = fn


def score(entry: LeaderboardEntry, fn_id: str, params: Optional[Mapping[str, Any]] = None) -> float:
    """Score one entry; higher is better by convention."""
    try:
        fn = SCORING_FUNCTIONS[fn_id]
    except KeyError:
        raise UnknownScoringFunction(fn_id) from None
    return float(fn(entry.aggregates, params or {}))


# -- filters and ranking -------------------------------------------------------


@dataclass(frozen=True)
class UndominatedFilter:
    compare_on: tuple[tuple[str, MetricDirection], ...]

    def describe(self) -> str:
        return "undominated(" + ",".join(name for name, _ in self.compare_on) + ")"


@dataclass(frozen=True)
class FlagFilter:
    flag: str
    value: bool

    def describe(self) -> str:
        return f"flag:{self.flag}={str(self.value).lower()}"


@dataclass(frozen=True)
class RangeFilter:
    metric: str
    low: Optional[float] = None
    high: Optional[float] = None

    def describe(self) -> str:
        return f"range:{self.metric}[{self.low},{self.high}]"


BoardFilter = Union[UndominatedFilter, FlagFilter, RangeFilter]


def apply_filters(
    entries: Sequence[LeaderboardEntry], filters: Sequence[BoardFilter]
) -> list[LeaderboardEntry]:
    current = list(entries)
    for f in filters:
        if isinstance(f, UndominatedFilter):
            current = pareto_filter(current, f.compare_on)
        elif isinstance(f, FlagFilter):
            current = [e for e in current if e.flags.get(f.flag, False) == f.value]
        elif isinstance(f, RangeFilter):
            def in_range(e: LeaderboardEntry) -> bool:
                v = _get_aggregate(e.aggregates, f.metric)
                if f.low is not None and v < f.low:
                    return False
                if f.high is not None and v > f.high:
                    return False
                return True

            current = [e for e in current if in_range(e)]
        else:
            raise LeaderboardError(f"unknown filter {f!r}")
    return current


def rank(
    entries: Sequence[LeaderboardEntry],
    category: CategorySpec,
    filters: Sequence[BoardFilter] = (),
    schema: Sequence[MetricSpec] = (),
) -> RankedBoard:
    """Filter, score and competition-rank. Deterministic for fixed inputs:
    ties ordered by the category's tie_break metrics, then subaccount id."""
    filtered = apply_filters(entries, filters)
    scored = [(e, score(e, category.scoring_function_id, category.scoring_params)) for e in filtered]
    schema_by_name = {m.metric_name: m for m in schema}

    def tie_key(item):
        entry, s = item
        keys = [-s]
        for metric in category.tie_break:
            spec = schema_by_name.get(metric)
            sign = -1.0 if spec and spec.direction == MetricDirection.MAXIMIZE else 1.0
            keys.append(sign * entry.aggregates.get(metric, 0.0))
        keys.append(entry.subaccount_id)
        return tuple(keys)

    scored.sort(key=tie_key)
    rows = []
    for idx, (entry, s) in enumerate(scored):
        if idx > 0 and s == scored[idx - 1][1]:
            rank_no = rows[-1].rank
        else:
            rank_no = idx + 1
        rows.append(RankedRow(rank_no, entry, s))
    return RankedBoard(
        category_name=category.category_name,
        rows=tuple(rows),
        applied_filters=tuple(f.describe() for f in filters),
    )


def history_series(
    submissions: Sequence[Submission],
    subaccounts: Mapping[str, Subaccount],
    schema: Sequence[MetricSpec],
    category: CategorySpec,
    time_grid: Sequence[str],
) -> dict[str, list[tuple[str, Optional[float]]]]:
    """Best-score-so-far per subaccount at every grid timestamp (ISO 8601;
    the grid must be ascending). None before the first done submission."""
    if list(time_grid) != sorted(time_grid):
        raise ValueError("time_grid must be ascending")
    done = [s for s in submissions if s.status == SubmissionStatus.DONE]
    per_subaccount: dict[str, list[tuple[str, float]]] = {}
    for sub in sorted(done, key=lambda s: (s.submit_time, s.submission_id)):
        entry = _entry_for(sub, subaccounts.get(sub.subaccount_id), schema)
        s = score(entry, category.scoring_function_id, category.scoring_params)
        per_subaccount.setdefault(sub.subaccount_id, []).append((sub.submit_time, s))

    series: dict[str, list[tuple[str, Optional[float]]]] = {}
    for subaccount_id, points in per_subaccount.items():
        out: list[tuple[str, Optional[float]]] = []
        for t in time_grid:
            eligible = [s for ts, s in points if ts <= t]
            out.append((t, max(eligible) if eligible else None))
        series[subaccount_id] = out
    return series


def board_export(board: RankedBoard) -> dict:
    """The JSON contract consumed by the web UI and the CSV exporter."""
    return {
        "category": board.category_name,
        "filters": list(board.applied_filters),
        "rows": [
            {
                "rank": row.rank,
                "subaccount": row.entry.subaccount_id,
                "display_name": row.entry.display_name,
                "score": row.score,
                "aggregates": dict(row.entry.aggregates),
                "flags": dict(row.entry.flags),
            }
            for row in board.rows
        ],
    }
