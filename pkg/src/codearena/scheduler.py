"""Evaluation job scheduling.

A single logical scheduler owns the queues and makes every decision under
one lock, so concurrent worker messages (heartbeat / lease / result / kill)
serialise cleanly. Per-kind FIFO queues; benchmark hosts run one job at a
time to keep runtime measurements honest, precompute pools run several jobs
with evenly divided resources. The pool is scaled against demand and jobs
that outrun their deadline get killed.

Wire protocol for remote workers (JSON over HTTP, versioned with "v"):
POST /worker/heartbeat, /worker/lease, /worker/result, /worker/kill-ack —
schemas in docs/worker-protocol.md. In-process stub workers drive the same
methods directly for tests and simulations.
"""

from __future__ import annotations

import math
import threading
import uuid
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Mapping, Optional, Sequence

from .clock import Clock
from .domain import StageKind

PROTOCOL_VERSION = 1

DEFAULT_HEARTBEAT_TIMEOUT = 30.0
DEFAULT_KILL_GRACE = 10.0
DEFAULT_MAX_RETRIES = 2


class SchedulerError(Exception):
    pass


class DuplicateActiveJob(SchedulerError):
    pass


class StaleWorker(SchedulerError):
    pass


class WorkerCapability(str, Enum):
    PRECOMPUTE_POOL = "precompute_pool"
    BENCHMARK_HOST = "benchmark_host"


@dataclass(frozen=True)
class ResourceVector:
    cpu_cores: float
    memory_bytes: int
    disk_bytes: int

    def fits_within(self, other: "ResourceVector") -> bool:
        """Placement check: memory and disk are hard capacity, CPU is a
        compressible share and never blocks placement."""
        return (
            self.memory_bytes <= other.memory_bytes
            and self.disk_bytes <= other.disk_bytes
        )

    def divided_by(self, n: int) -> "ResourceVector":
        return ResourceVector(self.cpu_cores / n, self.memory_bytes // n, self.disk_bytes // n)

    def to_doc(self) -> dict:
        return {
            "cpu_cores": self.cpu_cores,
            "memory_bytes": self.memory_bytes,
            "disk_bytes": self.disk_bytes,
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "ResourceVector":
        return cls(float(doc["cpu_cores"]), int(doc["memory_bytes"]), int(doc["disk_bytes"]))


@dataclass(frozen=True)
class JobTicket:
    job_id: str
    submission_id: str
    stage_name: str
    stage_kind: StageKind
    enqueue_time: float
    required_resources: ResourceVector
    deadline: float  # seconds the job may run once started
    payload: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.deadline <= 0:
            raise ValueError("deadline must be > 0")

    def to_doc(self) -> dict:
        return {
            "job_id": self.job_id,
            "submission_id": self.submission_id,
            "stage_name": self.stage_name,
            "stage_kind": self.stage_kind.value,
            "enqueue_time": self.enqueue_time,
            "required_resources": self.required_resources.to_doc(),
            "deadline": self.deadline,
            "payload": dict(self.payload),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "JobTicket":
        return cls(
            job_id=doc["job_id"],
            submission_id=doc["submission_id"],
            stage_name=doc["stage_name"],
            stage_kind=StageKind(doc["stage_kind"]),
            enqueue_time=float(doc["enqueue_time"]),
            required_resources=ResourceVector.from_doc(doc["required_resources"]),
            deadline=float(doc["deadline"]),
            payload=dict(doc.get("payload", {})),
        )


@dataclass
class WorkerState:
    worker_id: str
    capability: WorkerCapability
    capacity: ResourceVector
    running: list[str] = field(default_factory=list)
    last_heartbeat: float = 0.0
    idle_since: float = 0.0


@dataclass(frozen=True)
class PoolPolicy:
    min_workers: int = 1
    max_workers: int = 4
    per_worker_parallelism: int = 1
    scale_up_threshold: float = 1.0  # queued jobs per slot that warrant one slot
    scale_down_idle: float = 60.0  # seconds idle before a worker may be released

    def __post_init__(self):
        if not (1 <= self.min_workers <= self.max_workers):
            raise ValueError("need 1 <= min_workers <= max_workers")
        if self.per_worker_parallelism < 1:
            raise ValueError("per_worker_parallelism must be >= 1")


@dataclass
class Assignment:
    ticket: JobTicket
    worker_id: str
    start_time: float
    retries: int = 0


@dataclass(frozen=True)
class ScaleDecision:
    time: float
    queued: int
    running: int
    current_workers: int
    desired_workers: int


def scale_decision(
    queued_by_kind: Mapping[StageKind, int],
    pool: Sequence[WorkerState],
    policy: PoolPolicy,
) -> int:
    """Workers the pool should have: enough slots for everything queued and
    running, clamped to the policy bounds."""
    total = sum(queued_by_kind.values()) + sum(len(w.running) for w in pool)
    slots_per_worker = policy.per_worker_parallelism * policy.scale_up_threshold
    wanted = math.ceil(total / slots_per_worker) if total else 0
    return max(policy.min_workers, min(policy.max_workers, wanted))


def select_overdue(
    now: float, running: Sequence[tuple[JobTicket, float]], grace: float
) -> list[str]:
    """Jobs whose running time exceeds their deadline plus the kill grace."""
    return [t.job_id for t, start in running if now - start > t.deadline + grace]


class JobLedger:
    """Reconciliation record: every enqueued job must reach exactly one
    terminal outcome, with no duplicates."""

    def __init__(self):
        self.enqueued: set[str] = set()
        self.terminal: dict[str, str] = {}
        self.duplicate_reports: list[str] = []
        self.requeues: int = 0

    def note_enqueue(self, job_id: str) -> None:
        self.enqueued.add(job_id)

    def note_terminal(self, job_id: str, outcome: str) -> None:
        if job_id in self.terminal:
            self.duplicate_reports.append(job_id)
        else:
            self.terminal[job_id] = outcome

    @property
    def lost(self) -> set[str]:
        return self.enqueued - set(self.terminal)

    def reconciled(self) -> bool:
        return not self.lost and not self.duplicate_reports


ResultListener = Callable[[JobTicket, Mapping[str, Any]], None]


class Scheduler:
    def __init__(
        self,
        clock: Optional[Clock] = None,
        policy: PoolPolicy = PoolPolicy(),
        heartbeat_timeout: float = DEFAULT_HEARTBEAT_TIMEOUT,
        kill_grace: float = DEFAULT_KILL_GRACE,
        max_retries: int = DEFAULT_MAX_RETRIES,
    ):
        self.clock = clock or Clock()
        self.policy = policy
        self.heartbeat_timeout = heartbeat_timeout
        self.kill_grace = kill_grace
        self.max_retries = max_retries
        self._lock = threading.RLock()
        self._queues: dict[StageKind, deque[JobTicket]] = {
            StageKind.PRECOMPUTE: deque(),
            StageKind.BENCHMARK: deque(),
        }
        self._active: dict[tuple[str, str], str] = {}  # (submission, stage) -> job_id
        self._workers: dict[str, WorkerState] = {}
        self._assignments: dict[str, Assignment] = {}
        self._retry_counts: dict[str, int] = {}
        self._kill_requested: dict[str, str] = {}  # job_id -> owning worker
        self._kill_events: dict[str, threading.Event] = {}
        self._listener: Optional[ResultListener] = None
        self._wakeup = threading.Condition(self._lock)
        self.decision_log: list[ScaleDecision] = []
        self.ledger = JobLedger()

    # -- wiring ---------------------------------------------------------

    def set_result_listener(self, listener: ResultListener) -> None:
        self._listener = listener

    def register_kill_event(self, job_id: str, event: threading.Event) -> None:
        """In-process workers hand over a cancel event per running job so a
        kill request interrupts the sandbox immediately."""
        with self._lock:
            self._kill_events[job_id] = event
            if job_id in self._kill_requested:
                event.set()

    # -- queue ------------------------------------------------------------

    def enqueue_job(self, ticket: JobTicket) -> int:
        """FIFO within stage kind; returns the per-kind queue position."""
        with self._lock:
            key = (ticket.submission_id, ticket.stage_name)
            if key in self._active:
                raise DuplicateActiveJob(f"active job exists for {key}")
            queue = self._queues[ticket.stage_kind]
            position = len(queue)
            queue.append(ticket)
            self._active[key] = ticket.job_id
            self.ledger.note_enqueue(ticket.job_id)
            self._wakeup.notify_all()
            return position

    def queued_by_kind(self) -> dict[StageKind, int]:
        with self._lock:
            return {kind: len(q) for kind, q in self._queues.items()}

    def total_outstanding(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values()) + len(self._assignments)

    # -- workers ----------------------------------------------------------

    def heartbeat(
        self,
        worker_id: str,
        capability: WorkerCapability,
        capacity: ResourceVector,
        now: Optional[float] = None,
    ) -> list[str]:
        """Register or refresh a worker. Returns job ids it must kill."""
        now = self.clock.now() if now is None else now
        with self._lock:
            state = self._workers.get(worker_id)
            if state is None:
                state = WorkerState(worker_id, capability, capacity, idle_since=now)
                self._workers[worker_id] = state
            state.capability = capability
            state.capacity = capacity
            state.last_heartbeat = now
            return [j for j, w in self._kill_requested.items() if w == worker_id]

    def deregister_worker(self, worker_id: str) -> None:
        with self._lock:
            state = self._workers.pop(worker_id, None)
            if state and state.running:
                self._requeue_jobs(state.running)

    def next_assignment(self, worker_id: str, now: Optional[float] = None) -> Optional[JobTicket]:
        """Lease the oldest runnable ticket to this worker, honouring
        benchmark exclusivity and precompute resource shares."""
        now = self.clock.now() if now is None else now
        with self._lock:
            state = self._workers.get(worker_id)
            if state is None:
                raise StaleWorker(f"unknown worker {worker_id}; heartbeat first")
            if now - state.last_heartbeat > self.heartbeat_timeout:
                raise StaleWorker(f"worker {worker_id} heartbeat expired")

            if state.capability == WorkerCapability.BENCHMARK_HOST:
                if state.running:
                    return None
                queue = self._queues[StageKind.BENCHMARK]
                if not queue:
                    return None
                ticket = queue.popleft()
                granted = replace(ticket, required_resources=state.capacity)
            else:
                if len(state.running) >= self.policy.per_worker_parallelism:
                    return None
                share = state.capacity.divided_by(self.policy.per_worker_parallelism)
                queue = self._queues[StageKind.PRECOMPUTE]
                ticket = None
                for idx, candidate in enumerate(queue):
                    if candidate.required_resources.fits_within(share):
                        ticket = candidate
                        del queue[idx]
                        break
                if ticket is None:
                    return None
                granted = replace(ticket, required_resources=share)

            state.running.append(ticket.job_id)
            self._assignments[ticket.job_id] = Assignment(
                granted, worker_id, now, self._retry_counts.get(ticket.job_id, 0)
            )
            return granted

    def report_result(
        self, worker_id: str, job_id: str, payload: Mapping[str, Any]
    ) -> None:
        """Worker finished (or aborted) a job; hand the outcome downstream."""
        with self._lock:
            assignment = self._assignments.pop(job_id, None)
            if assignment is None or assignment.worker_id != worker_id:
                # stale report from a worker we already presumed lost; the
                # job was requeued (or finished) elsewhere
                if assignment is not None:
                    self._assignments[job_id] = assignment
                return
            state = self._workers.get(assignment.worker_id)
            if state and job_id in state.running:
                state.running.remove(job_id)
                if not state.running:
                    state.idle_since = self.clock.now()
            self._active.pop(
                (assignment.ticket.submission_id, assignment.ticket.stage_name), None
            )
            self._kill_requested.pop(job_id, None)
            self._kill_events.pop(job_id, None)
            self.ledger.note_terminal(job_id, payload.get("status", "completed"))
            listener = self._listener
            ticket = assignment.ticket
        if listener is not None:
            listener(ticket, payload)

    def kill_ack(self, worker_id: str, job_id: str) -> None:
        with self._lock:
            self._kill_requested.pop(job_id, None)

    # -- supervision -------------------------------------------------------

    def request_kill(self, job_id: str) -> None:
        with self._lock:
            assignment = self._assignments.get(job_id)
            if assignment is None:
                return
            self._kill_requested[job_id] = assignment.worker_id
            event = self._kill_events.get(job_id)
            if event is not None:
                event.set()

    def reap_timeouts(self, now: Optional[float] = None) -> list[str]:
        """Kill every running job past its deadline plus grace."""
        now = self.clock.now() if now is None else now
        with self._lock:
            running = [(a.ticket, a.start_time) for a in self._assignments.values()]
            overdue = select_overdue(now, running, self.kill_grace)
        for job_id in overdue:
            self.request_kill(job_id)
        return overdue

    def expire_workers(self, now: Optional[float] = None) -> list[str]:
        """Drop workers whose heartbeat lapsed; requeue their jobs (bounded
        retries, then the job is failed)."""
        now = self.clock.now() if now is None else now
        with self._lock:
            lost = [
                w.worker_id
                for w in self._workers.values()
                if now - w.last_heartbeat > self.heartbeat_timeout
            ]
            orphaned: list[str] = []
            for worker_id in lost:
                state = self._workers.pop(worker_id)
                orphaned.extend(state.running)
            if orphaned:
                self._requeue_jobs(orphaned)
        return lost

    def _requeue_jobs(self, job_ids: Sequence[str]) -> None:
        # caller holds the lock
        failures = []
        for job_id in list(job_ids):
            assignment = self._assignments.pop(job_id, None)
            if assignment is None:
                continue
            ticket = assignment.ticket
            retries = self._retry_counts.get(job_id, 0) + 1
            self._retry_counts[job_id] = retries
            self._kill_requested.pop(job_id, None)
            self._kill_events.pop(job_id, None)
            if retries > self.max_retries:
                self._active.pop((ticket.submission_id, ticket.stage_name), None)
                self.ledger.note_terminal(job_id, "failed-after-retries")
                failures.append(ticket)
            else:
                self.ledger.requeues += 1
                queue = self._queues[ticket.stage_kind]
                queue.append(ticket)
                # keep FIFO by original enqueue time after re-insertion
                ordered = sorted(queue, key=lambda t: (t.enqueue_time, t.job_id))
                queue.clear()
                queue.extend(ordered)
        listener = self._listener
        if listener is not None:
            for ticket in failures:
                listener(
                    ticket,
                    {"status": "failed", "error": "worker lost; retries exhausted", "runs": []},
                )

    def scale_tick(self, now: Optional[float] = None) -> ScaleDecision:
        """Record and return the scaling decision for the current state."""
        now = self.clock.now() if now is None else now
        with self._lock:
            pool = [
                w
                for w in self._workers.values()
                if w.capability == WorkerCapability.PRECOMPUTE_POOL
            ]
            queued = {StageKind.PRECOMPUTE: len(self._queues[StageKind.PRECOMPUTE])}
            desired = scale_decision(queued, pool, self.policy)
            decision = ScaleDecision(
                time=now,
                queued=queued[StageKind.PRECOMPUTE],
                running=sum(len(w.running) for w in pool),
                current_workers=len(pool),
                desired_workers=desired,
            )
            self.decision_log.append(decision)
            return decision

    def releasable_workers(self, now: Optional[float] = None) -> list[str]:
        """Idle precompute workers eligible for release, longest idle first.
        Workers with running jobs are never candidates."""
        now = self.clock.now() if now is None else now
        with self._lock:
            idle = [
                w
                for w in self._workers.values()
                if w.capability == WorkerCapability.PRECOMPUTE_POOL
                and not w.running
                and now - w.idle_since >= self.policy.scale_down_idle
            ]
            return [w.worker_id for w in sorted(idle, key=lambda w: w.idle_since)]

    def worker_snapshot(self) -> dict[str, WorkerState]:
        with self._lock:
            return {
                wid: WorkerState(
                    w.worker_id,
                    w.capability,
                    w.capacity,
                    list(w.running),
                    w.last_heartbeat,
                    w.idle_since,
                )
                for wid, w in self._workers.items()
            }

    def wait_for_work(self, timeout: float) -> None:
        with self._wakeup:
            self._wakeup.wait(timeout)


def new_job_id() -> str:
    return uuid.uuid4().hex
