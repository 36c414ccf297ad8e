"""Domain types shared across the platform: competitions, subaccounts,
submissions, the submission lifecycle state machine, subaccount limits and
the visibility redaction rules.

Everything here is an immutable value; every operation is a pure function.
No persistence, no I/O, no scoring arithmetic.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Optional

_EMAIL_RE = re.compile(r"^[^@\s]+@[^@\s]+\.[^@\s]+$")
_COMMIT_RE = re.compile(r"^[0-9a-f]{40}$")


class DomainError(Exception):
    pass


class IllegalTransition(DomainError):
    def __init__(self, current: "SubmissionStatus", event: "LifecycleEvent"):
        super().__init__(f"no transition from {current.value!r} on {event.value!r}")
        self.current = current
        self.event = event


class Role(str, Enum):
    PARTICIPANT = "participant"
    ORGANISER = "organiser"


class SubmissionStatus(str, Enum):
    QUEUED = "queued"
    FETCHING = "fetching"
    EVALUATING = "evaluating"
    DONE = "done"
    FAILED = "failed"
    TIMED_OUT = "timed_out"
    KILLED = "killed"


TERMINAL_STATUSES = frozenset(
    {
        SubmissionStatus.DONE,
        SubmissionStatus.FAILED,
        SubmissionStatus.TIMED_OUT,
        SubmissionStatus.KILLED,
    }
)


class LifecycleEvent(str, Enum):
    FETCHED = "fetched"
    STAGE_STARTED = "stage_started"
    STAGE_OK = "stage_ok"
    STAGE_FAIL = "stage_fail"
    TIMEOUT = "timeout"
    RESOURCE_KILL = "resource_kill"
    ALL_STAGES_DONE = "all_stages_done"


# The full transition relation. Dispatch of a queued submission starts the
# fetch (stage_started); everything else only applies while fetching or
# evaluating. Terminal states accept no events.
TRANSITIONS: Mapping[tuple[SubmissionStatus, LifecycleEvent], SubmissionStatus] = {
    (SubmissionStatus.QUEUED, LifecycleEvent.STAGE_STARTED): SubmissionStatus.FETCHING,
    (SubmissionStatus.FETCHING, LifecycleEvent.FETCHED): SubmissionStatus.EVALUATING,
    (SubmissionStatus.FETCHING, LifecycleEvent.STAGE_FAIL): SubmissionStatus.FAILED,
    (SubmissionStatus.EVALUATING, LifecycleEvent.STAGE_OK): SubmissionStatus.EVALUATING,
    (SubmissionStatus.EVALUATING, LifecycleEvent.ALL_STAGES_DONE): SubmissionStatus.DONE,
    (SubmissionStatus.EVALUATING, LifecycleEvent.STAGE_FAIL): SubmissionStatus.FAILED,
    (SubmissionStatus.EVALUATING, LifecycleEvent.TIMEOUT): SubmissionStatus.TIMED_OUT,
    (SubmissionStatus.EVALUATING, LifecycleEvent.RESOURCE_KILL): SubmissionStatus.KILLED,
}


def transition_submission(
    current: SubmissionStatus, event: LifecycleEvent
) -> SubmissionStatus:
    """Return the unique successor status, or raise IllegalTransition."""
    try:
        return TRANSITIONS[(current, event)]
    except KeyError:
        raise IllegalTransition(current, event) from None


class StageKind(str, Enum):
    PRECOMPUTE = "precompute"
    BENCHMARK = "benchmark"


class StageConcurrency(str, Enum):
    PARALLEL = "parallel"
    EXCLUSIVE = "exclusive"


class MetricDirection(str, Enum):
    MINIMIZE = "minimize"
    MAXIMIZE = "maximize"


class Aggregation(str, Enum):
    SUM = "sum"
    MEAN = "mean"
    MAX = "max"
    COUNT_SUCCESS = "count_success"


class ExitKind(str, Enum):
    OK = "ok"
    NONZERO_EXIT = "nonzero_exit"
    TIME_LIMIT = "time_limit"
    MEMORY_LIMIT = "memory_limit"
    DISK_LIMIT = "disk_limit"
    SANDBOX_ERROR = "sandbox_error"


class InstanceScope(str, Enum):
    DEBUG = "debug"
    HIDDEN = "hidden"
    NA = "n/a"


class VisibilityPolicy(str, Enum):
    GPPC_STYLE = "gppc_style"
    LORR_STYLE = "lorr_style"


class ViewerKind(str, Enum):
    ORGANISER = "organiser"
    OWNER = "owner"
    OTHER = "other"


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    username: str
    email: str
    credential: str  # salted-hash blob or "external:<provider-ref>"
    role: Role = Role.PARTICIPANT
    # per-competition subaccount limit grants, competition_id -> limit
    subaccount_limits: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.username:
            raise DomainError("username required")
        if not _EMAIL_RE.match(self.email):
            raise DomainError(f"invalid email: {self.email!r}")

    def to_doc(self) -> dict:
        return {
            "user_id": self.user_id,
            "username": self.username,
            "email": self.email,
            "credential": self.credential,
            "role": self.role.value,
            "subaccount_limits": dict(self.subaccount_limits),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "UserProfile":
        return cls(
            user_id=doc["user_id"],
            username=doc["username"],
            email=doc["email"],
            credential=doc["credential"],
            role=Role(doc.get("role", "participant")),
            subaccount_limits=dict(doc.get("subaccount_limits", {})),
        )


@dataclass(frozen=True)
class StageSpec:
    stage_name: str
    kind: StageKind
    concurrency: StageConcurrency
    time_limit: float  # seconds, per run
    cpu_limit: float  # cores
    memory_limit: int  # bytes
    disk_limit: int  # bytes
    command: tuple[str, ...]  # organiser evaluation script, never participant-chosen
    network_allowed: bool = False

    def __post_init__(self):
        if self.kind == StageKind.BENCHMARK and self.concurrency != StageConcurrency.EXCLUSIVE:
            raise DomainError("benchmark stages must be exclusive")
        for name, v in (
            ("time_limit", self.time_limit),
            ("cpu_limit", self.cpu_limit),
            ("memory_limit", self.memory_limit),
            ("disk_limit", self.disk_limit),
        ):
            if v <= 0:
                raise DomainError(f"{name} must be > 0")
        if not self.command:
            raise DomainError("stage command required")

    def to_doc(self) -> dict:
        return {
            "stage_name": self.stage_name,
            "kind": self.kind.value,
            "concurrency": self.concurrency.value,
            "time_limit": self.time_limit,
            "cpu_limit": self.cpu_limit,
            "memory_limit": self.memory_limit,
            "disk_limit": self.disk_limit,
            "command": list(self.command),
            "network_allowed": self.network_allowed,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "StageSpec":
        return cls(
            stage_name=doc["stage_name"],
            kind=StageKind(doc["kind"]),
            concurrency=StageConcurrency(doc["concurrency"]),
            time_limit=float(doc["time_limit"]),
            cpu_limit=float(doc["cpu_limit"]),
            memory_limit=int(doc["memory_limit"]),
            disk_limit=int(doc["disk_limit"]),
            command=tuple(doc["command"]),
            network_allowed=bool(doc.get("network_allowed", False)),
        )


@dataclass(frozen=True)
class MetricSpec:
    metric_name: str
    direction: MetricDirection
    unit: str = ""
    aggregation: Aggregation = Aggregation.MEAN

    def __post_init__(self):
        if not self.metric_name:
            raise DomainError("metric_name must be non-empty")

    def to_doc(self) -> dict:
        return {
            "metric_name": self.metric_name,
            "direction": self.direction.value,
            "unit": self.unit,
            "aggregation": self.aggregation.value,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "MetricSpec":
        return cls(
            metric_name=doc["metric_name"],
            direction=MetricDirection(doc["direction"]),
            unit=doc.get("unit", ""),
            aggregation=Aggregation(doc.get("aggregation", "mean")),
        )


@dataclass(frozen=True)
class CategorySpec:
    category_name: str
    scoring_function_id: str
    scoring_params: Mapping[str, Any] = field(default_factory=dict)
    tie_break: tuple[str, ...] = ()

    def to_doc(self) -> dict:
        return {
            "category_name": self.category_name,
            "scoring_function_id": self.scoring_function_id,
            "scoring_params": dict(self.scoring_params),
            "tie_break": list(self.tie_break),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "CategorySpec":
        return cls(
            category_name=doc["category_name"],
            scoring_function_id=doc["scoring_function_id"],
            scoring_params=dict(doc.get("scoring_params", {})),
            tie_break=tuple(doc.get("tie_break", ())),
        )


@dataclass(frozen=True)
class Competition:
    competition_id: str
    name: str
    start_time: str  # ISO 8601 UTC
    end_time: str
    stage_plan: tuple[StageSpec, ...]
    debug_instances: tuple[str, ...] = ()
    hidden_instances: tuple[str, ...] = ()
    metric_schema: tuple[MetricSpec, ...] = ()
    categories: tuple[CategorySpec, ...] = ()
    default_subaccount_limit: int = 1
    visibility_policy: VisibilityPolicy = VisibilityPolicy.GPPC_STYLE
    # organiser-canonical files overwritten into every worktree: path -> content
    protected_files: tuple[tuple[str, str], ...] = ()
    fail_fast: bool = False
    selection_policy: str = "latest_done"  # or "best_by:<metric>"

    def __post_init__(self):
        if not self.start_time < self.end_time:
            raise DomainError("start_time must precede end_time")
        if not self.stage_plan:
            raise DomainError("stage_plan must be non-empty")
        names = [m.metric_name for m in self.metric_schema]
        if len(names) != len(set(names)):
            raise DomainError("metric names must be unique in schema")
        if self.default_subaccount_limit < 1:
            raise DomainError("default_subaccount_limit must be >= 1")

    def metric(self, name: str) -> MetricSpec:
        for m in self.metric_schema:
            if m.metric_name == name:
                return m
        raise KeyError(name)

    def category(self, name: str) -> CategorySpec:
        for c in self.categories:
            if c.category_name == name:
                return c
        raise KeyError(name)

    def to_doc(self) -> dict:
        return {
            "competition_id": self.competition_id,
            "name": self.name,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "stage_plan": [s.to_doc() for s in self.stage_plan],
            "debug_instances": list(self.debug_instances),
            "hidden_instances": list(self.hidden_instances),
            "metric_schema": [m.to_doc() for m in self.metric_schema],
            "categories": [c.to_doc() for c in self.categories],
            "default_subaccount_limit": self.default_subaccount_limit,
            "visibility_policy": self.visibility_policy.value,
            "protected_files": [list(p) for p in self.protected_files],
            "fail_fast": self.fail_fast,
            "selection_policy": self.selection_policy,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Competition":
        return cls(
            competition_id=doc["competition_id"],
            name=doc["name"],
            start_time=doc["start_time"],
            end_time=doc["end_time"],
            stage_plan=tuple(StageSpec.from_doc(s) for s in doc["stage_plan"]),
            debug_instances=tuple(doc.get("debug_instances", ())),
            hidden_instances=tuple(doc.get("hidden_instances", ())),
            metric_schema=tuple(MetricSpec.from_doc(m) for m in doc.get("metric_schema", ())),
            categories=tuple(CategorySpec.from_doc(c) for c in doc.get("categories", ())),
            default_subaccount_limit=int(doc.get("default_subaccount_limit", 1)),
            visibility_policy=VisibilityPolicy(doc.get("visibility_policy", "gppc_style")),
            protected_files=tuple((p, c) for p, c in doc.get("protected_files", ())),
            fail_fast=bool(doc.get("fail_fast", False)),
            selection_policy=doc.get("selection_policy", "latest_done"),
        )


@dataclass(frozen=True)
class Subaccount:
    subaccount_id: str
    user_id: str
    competition_id: str
    display_name: str
    repo_url: str = ""
    extra_data: Mapping[str, Any] = field(default_factory=dict)
    active_submission_id: Optional[str] = None

    def to_doc(self) -> dict:
        return {
            "subaccount_id": self.subaccount_id,
            "user_id": self.user_id,
            "competition_id": self.competition_id,
            "display_name": self.display_name,
            "repo_url": self.repo_url,
            "extra_data": dict(self.extra_data),
            "active_submission_id": self.active_submission_id,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Subaccount":
        return cls(
            subaccount_id=doc["subaccount_id"],
            user_id=doc["user_id"],
            competition_id=doc["competition_id"],
            display_name=doc["display_name"],
            repo_url=doc.get("repo_url", ""),
            extra_data=dict(doc.get("extra_data", {})),
            active_submission_id=doc.get("active_submission_id"),
        )


@dataclass(frozen=True)
class StageOutcome:
    stage_name: str
    instance_scope: InstanceScope
    exit_kind: ExitKind
    wall_time: float
    peak_memory: int
    instance_id: Optional[str] = None  # None for instance-less stages
    stdout_ref: Optional[str] = None
    stderr_ref: Optional[str] = None
    artifact_refs: tuple[str, ...] = ()

    def to_doc(self) -> dict:
        return {
            "stage_name": self.stage_name,
            "instance_scope": self.instance_scope.value,
            "exit_kind": self.exit_kind.value,
            "wall_time": self.wall_time,
            "peak_memory": self.peak_memory,
            "instance_id": self.instance_id,
            "stdout_ref": self.stdout_ref,
            "stderr_ref": self.stderr_ref,
            "artifact_refs": list(self.artifact_refs),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "StageOutcome":
        return cls(
            stage_name=doc["stage_name"],
            instance_scope=InstanceScope(doc["instance_scope"]),
            exit_kind=ExitKind(doc["exit_kind"]),
            wall_time=float(doc["wall_time"]),
            peak_memory=int(doc["peak_memory"]),
            instance_id=doc.get("instance_id"),
            stdout_ref=doc.get("stdout_ref"),
            stderr_ref=doc.get("stderr_ref"),
            artifact_refs=tuple(doc.get("artifact_refs", ())),
        )


@dataclass(frozen=True)
class MetricRecord:
    instance_id: str
    metric_name: str
    value: float
    scope: InstanceScope

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise DomainError(f"metric value must be finite: {self.metric_name}")
        if self.scope == InstanceScope.NA:
            raise DomainError("metric records are scoped debug or hidden")

    def to_doc(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "metric_name": self.metric_name,
            "value": self.value,
            "scope": self.scope.value,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "MetricRecord":
        return cls(
            instance_id=doc["instance_id"],
            metric_name=doc["metric_name"],
            value=float(doc["value"]),
            scope=InstanceScope(doc["scope"]),
        )


@dataclass(frozen=True)
class Submission:
    submission_id: str
    subaccount_id: str
    competition_id: str
    submit_time: str  # ISO 8601 UTC
    commit_hash: str = ""  # empty until fetched
    status: SubmissionStatus = SubmissionStatus.QUEUED
    declared_packages: tuple[str, ...] = ()
    stage_outcomes: tuple[StageOutcome, ...] = ()
    metric_records: tuple[MetricRecord, ...] = ()
    server_log: str = ""
    worktree_digest: str = ""  # manifest digest recorded at fetch time

    def __post_init__(self):
        if self.commit_hash and not _COMMIT_RE.match(self.commit_hash):
            raise DomainError("commit_hash must be a 40-hex string")
        beyond_fetching = self.status not in (
            SubmissionStatus.QUEUED,
            SubmissionStatus.FETCHING,
        )
        # failed-at-fetch submissions legitimately carry no hash
        if beyond_fetching and not self.commit_hash and self.status != SubmissionStatus.FAILED:
            raise DomainError(f"commit_hash required in status {self.status.value}")

    def to_doc(self) -> dict:
        return {
            "submission_id": self.submission_id,
            "subaccount_id": self.subaccount_id,
            "competition_id": self.competition_id,
            "submit_time": self.submit_time,
            "commit_hash": self.commit_hash,
            "status": self.status.value,
            "declared_packages": list(self.declared_packages),
            "stage_outcomes": [o.to_doc() for o in self.stage_outcomes],
            "metric_records": [m.to_doc() for m in self.metric_records],
            "server_log": self.server_log,
            "worktree_digest": self.worktree_digest,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Submission":
        return cls(
            submission_id=doc["submission_id"],
            subaccount_id=doc["subaccount_id"],
            competition_id=doc["competition_id"],
            submit_time=doc["submit_time"],
            commit_hash=doc.get("commit_hash", ""),
            status=SubmissionStatus(doc.get("status", "queued")),
            declared_packages=tuple(doc.get("declared_packages", ())),
            stage_outcomes=tuple(StageOutcome.from_doc(o) for o in doc.get("stage_outcomes", ())),
            metric_records=tuple(MetricRecord.from_doc(m) for m in doc.get("metric_records", ())),
            server_log=doc.get("server_log", ""),
            worktree_digest=doc.get("worktree_digest", ""),
        )


class SubaccountDecision(str, Enum):
    ALLOW = "allow"
    DENY_LIMIT = "deny_limit"


def validate_subaccount_request(
    user_id: str, competition_id: str, existing_count: int, granted_limit: int
) -> SubaccountDecision:
    """Allow creating another subaccount iff the user is below their limit."""
    if existing_count < 0:
        raise DomainError("existing_count must be >= 0")
    if granted_limit < 1:
        raise DomainError("granted_limit must be >= 1")
    if existing_count < granted_limit:
        return SubaccountDecision.ALLOW
    return SubaccountDecision.DENY_LIMIT


@dataclass(frozen=True)
class SubmissionView:
    """Redacted projection of a Submission.

    The full field-by-field visibility rules live in docs/visibility-matrix.md;
    tests assert every cell of that table.
    """

    submission_id: str
    subaccount_id: str
    competition_id: str
    submit_time: str
    status: SubmissionStatus
    commit_hash: Optional[str] = None
    declared_packages: Optional[tuple[str, ...]] = None
    server_log: Optional[str] = None
    stage_outcomes: tuple[StageOutcome, ...] = ()
    metric_records: tuple[MetricRecord, ...] = ()
    viewer: ViewerKind = ViewerKind.ORGANISER

    def to_doc(self) -> dict:
        return {
            "submission_id": self.submission_id,
            "subaccount_id": self.subaccount_id,
            "competition_id": self.competition_id,
            "submit_time": self.submit_time,
            "status": self.status.value,
            "commit_hash": self.commit_hash,
            "declared_packages": None
            if self.declared_packages is None
            else list(self.declared_packages),
            "server_log": self.server_log,
            "stage_outcomes": [o.to_doc() for o in self.stage_outcomes],
            "metric_records": [m.to_doc() for m in self.metric_records],
            "viewer": self.viewer.value,
        }


def full_view(sub: Submission) -> SubmissionView:
    """The organiser (unredacted) projection."""
    return SubmissionView(
        submission_id=sub.submission_id,
        subaccount_id=sub.subaccount_id,
        competition_id=sub.competition_id,
        submit_time=sub.submit_time,
        status=sub.status,
        commit_hash=sub.commit_hash or None,
        declared_packages=sub.declared_packages,
        server_log=sub.server_log,
        stage_outcomes=sub.stage_outcomes,
        metric_records=sub.metric_records,
        viewer=ViewerKind.ORGANISER,
    )


def _strip_outcome_logs(outcome: StageOutcome) -> StageOutcome:
    return replace(outcome, stdout_ref=None, stderr_ref=None, artifact_refs=())


def redact_submission_view(
    sub: "Submission | SubmissionView",
    viewer: ViewerKind,
    policy: VisibilityPolicy,
) -> SubmissionView:
    """Project a submission down to what the viewer may see.

    Idempotent: redacting an already-redacted view never restores anything,
    and a participant view is always a field subset of the organiser view.
    """
    view = full_view(sub) if isinstance(sub, Submission) else sub

    if viewer == ViewerKind.ORGANISER:
        return replace(view, viewer=ViewerKind.ORGANISER)

    if viewer == ViewerKind.OTHER:
        # all-submissions feed level: status and timing only
        return SubmissionView(
            submission_id=view.submission_id,
            subaccount_id=view.subaccount_id,
            competition_id=view.competition_id,
            submit_time=view.submit_time,
            status=view.status,
            viewer=ViewerKind.OTHER,
        )

    # owner
    if policy == VisibilityPolicy.GPPC_STYLE:
        outcomes = []
        for o in view.stage_outcomes:
            if o.instance_scope == InstanceScope.HIDDEN:
                outcomes.append(_strip_outcome_logs(o))
            else:
                outcomes.append(o)
        return replace(
            view,
            stage_outcomes=tuple(outcomes),
            metric_records=view.metric_records,
            viewer=ViewerKind.OWNER,
        )

    # lorr_style: only the server operation log is accessible, plus the
    # metric values that feed the published scores
    return replace(
        view,
        stage_outcomes=(),
        metric_records=tuple(
            m for m in view.metric_records if m.scope == InstanceScope.HIDDEN
        ),
        viewer=ViewerKind.OWNER,
    )
