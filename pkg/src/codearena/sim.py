"""Discrete-event simulations over the real scheduler.

Used by the test suite (and handy for capacity planning): stub jobs with
simulated durations, simulated workers driven through the same heartbeat /
lease / result calls a live worker makes, a compressed clock, optional
worker crash injection, and a replay of a full competition's submission
load. Submission lifecycles are folded through the domain state machine so
the simulation exercises the same transitions production takes.
"""

from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass
from typing import Optional

from .clock import SimulatedClock
from .domain import LifecycleEvent, StageKind, SubmissionStatus, transition_submission
from .scheduler import (
    JobTicket,
    PoolPolicy,
    ResourceVector,
    Scheduler,
    WorkerCapability,
    new_job_id,
)

_CAPACITY = ResourceVector(cpu_cores=8.0, memory_bytes=8 * 1024**3, disk_bytes=32 * 1024**3)
_JOB_NEED = ResourceVector(cpu_cores=1.0, memory_bytes=256 * 1024**2, disk_bytes=1024**3)


@dataclass
class SimSubmission:
    submission_id: str
    status: SubmissionStatus = SubmissionStatus.QUEUED
    stages_remaining: int = 1
    precompute_done_at: Optional[float] = None
    benchmark_enqueued_at: Optional[float] = None

    def fold(self, event: LifecycleEvent) -> None:
        self.status = transition_submission(self.status, event)


@dataclass
class SimReport:
    submissions: dict[str, SimSubmission]
    max_desired: int
    final_desired: int
    max_benchmark_running: int
    gating_violations: int
    sim_seconds: float

    @property
    def all_terminal(self) -> bool:
        terminal = {
            SubmissionStatus.DONE,
            SubmissionStatus.FAILED,
            SubmissionStatus.TIMED_OUT,
            SubmissionStatus.KILLED,
        }
        return all(s.status in terminal for s in self.submissions.values())


class Simulation:
    """Event loop: submission arrivals, job completions, worker crashes.
    After every event the scheduler gets a supervision + scaling pass and
    idle workers lease whatever fits."""

    def __init__(
        self,
        policy: PoolPolicy,
        job_seconds: float = 1.0,
        benchmark_hosts: int = 0,
        with_precompute_stage: bool = True,
        with_benchmark_stage: bool = False,
        crash_rate: float = 0.0,
        heartbeat_timeout: float = 30.0,
        seed: int = 0,
    ):
        self.clock = SimulatedClock()
        self.scheduler = Scheduler(
            clock=self.clock, policy=policy, heartbeat_timeout=heartbeat_timeout
        )
        self.scheduler.set_result_listener(self._on_result)
        self.policy = policy
        self.job_seconds = job_seconds
        self.benchmark_hosts = benchmark_hosts
        self.with_precompute_stage = with_precompute_stage
        self.with_benchmark_stage = with_benchmark_stage
        self.crash_rate = crash_rate
        self.rng = random.Random(seed)

        self._events: list[tuple[float, int, str, tuple]] = []
        self._seq = itertools.count()
        self.submissions: dict[str, SimSubmission] = {}
        self._job_to_submission: dict[str, tuple[str, StageKind]] = {}
        self._lease_tokens: dict[str, int] = {}
        self._alive_workers: dict[str, WorkerCapability] = {}
        self._worker_counter = itertools.count()
        self.max_benchmark_running = 0
        self.gating_violations = 0

    # -- event plumbing ---------------------------------------------------

    def _push(self, when: float, kind: str, *data) -> None:
        heapq.heappush(self._events, (when, next(self._seq), kind, data))

    def add_submission_at(self, when: float, submission_id: str) -> None:
        stages = 1 + (1 if self.with_benchmark_stage else 0)
        self.submissions[submission_id] = SimSubmission(submission_id, stages_remaining=stages)
        self._push(when, "arrive", submission_id)

    # -- workers ----------------------------------------------------------

    def _spawn_worker(self, capability: WorkerCapability) -> str:
        worker_id = f"sim-{capability.value}-{next(self._worker_counter)}"
        self._alive_workers[worker_id] = capability
        self.scheduler.heartbeat(worker_id, capability, _CAPACITY)
        return worker_id

    def _heartbeat_all(self) -> None:
        for worker_id, capability in self._alive_workers.items():
            self.scheduler.heartbeat(worker_id, capability, _CAPACITY)

    def _lease_pass(self) -> None:
        progressed = True
        while progressed:
            progressed = False
            for worker_id in list(self._alive_workers):
                ticket = self.scheduler.next_assignment(worker_id)
                if ticket is None:
                    continue
                progressed = True
                token = self._lease_tokens.get(ticket.job_id, 0) + 1
                self._lease_tokens[ticket.job_id] = token
                duration = self.job_seconds
                if self.crash_rate and self.rng.random() < self.crash_rate:
                    # the worker dies mid-job: stop heartbeating; completion
                    # never fires (stale token)
                    crash_at = self.clock.now() + duration * self.rng.random()
                    self._push(crash_at, "crash", worker_id)
                self._push(
                    self.clock.now() + duration, "complete", worker_id, ticket.job_id, token
                )
            snapshot = self.scheduler.worker_snapshot()
            bench_running = [
                len(w.running)
                for w in snapshot.values()
                if w.capability == WorkerCapability.BENCHMARK_HOST
            ]
            if bench_running:
                self.max_benchmark_running = max(self.max_benchmark_running, max(bench_running))

    def _scale_pass(self) -> None:
        self.scheduler.expire_workers()
        self.scheduler.reap_timeouts()
        decision = self.scheduler.scale_tick()
        current = [
            w
            for w, cap in self._alive_workers.items()
            if cap == WorkerCapability.PRECOMPUTE_POOL
        ]
        if decision.desired_workers > len(current):
            for _ in range(decision.desired_workers - len(current)):
                self._spawn_worker(WorkerCapability.PRECOMPUTE_POOL)
        elif decision.desired_workers < len(current):
            for worker_id in self.scheduler.releasable_workers()[
                : len(current) - decision.desired_workers
            ]:
                self._alive_workers.pop(worker_id, None)
                self.scheduler.deregister_worker(worker_id)

    # -- job lifecycle -------------------------------------------------------

    def _enqueue_stage(self, submission_id: str, kind: StageKind) -> None:
        sim_sub = self.submissions[submission_id]
        now = self.clock.now()
        if kind == StageKind.BENCHMARK:
            sim_sub.benchmark_enqueued_at = now
            if sim_sub.precompute_done_at is None or now < sim_sub.precompute_done_at:
                self.gating_violations += 1
        job_id = new_job_id()
        self._job_to_submission[job_id] = (submission_id, kind)
        self.scheduler.enqueue_job(
            JobTicket(
                job_id=job_id,
                submission_id=submission_id,
                stage_name=kind.value,
                stage_kind=kind,
                enqueue_time=now,
                required_resources=_JOB_NEED,
                deadline=max(self.job_seconds * 4, 60.0),
            )
        )

    def _on_result(self, ticket: JobTicket, payload) -> None:
        submission_id, kind = self._job_to_submission[ticket.job_id]
        sim_sub = self.submissions[submission_id]
        if payload.get("status") == "failed":
            sim_sub.fold(LifecycleEvent.STAGE_FAIL)
            return
        sim_sub.stages_remaining -= 1
        if kind == StageKind.PRECOMPUTE:
            sim_sub.precompute_done_at = self.clock.now()
        if sim_sub.stages_remaining <= 0:
            sim_sub.fold(LifecycleEvent.ALL_STAGES_DONE)
        else:
            sim_sub.fold(LifecycleEvent.STAGE_OK)
            if self.with_benchmark_stage and kind == StageKind.PRECOMPUTE:
                self._enqueue_stage(submission_id, StageKind.BENCHMARK)

    # -- main loop -----------------------------------------------------------

    def run(self, settle_time: Optional[float] = None) -> SimReport:
        for _ in range(self.benchmark_hosts):
            self._spawn_worker(WorkerCapability.BENCHMARK_HOST)
        self._scale_pass()
        self._lease_pass()

        while self._events:
            when, _, kind, data = heapq.heappop(self._events)
            if when > self.clock.now():
                self.clock.set(when)
            self._heartbeat_all()
            if kind == "arrive":
                (submission_id,) = data
                sim_sub = self.submissions[submission_id]
                sim_sub.fold(LifecycleEvent.STAGE_STARTED)
                sim_sub.fold(LifecycleEvent.FETCHED)
                first = (
                    StageKind.PRECOMPUTE if self.with_precompute_stage else StageKind.BENCHMARK
                )
                if first == StageKind.BENCHMARK:
                    sim_sub.precompute_done_at = self.clock.now()
                self._enqueue_stage(submission_id, first)
            elif kind == "complete":
                worker_id, job_id, token = data
                if self._lease_tokens.get(job_id) != token:
                    continue  # superseded by a requeue after a crash
                if worker_id not in self._alive_workers:
                    continue
                self.scheduler.report_result(worker_id, job_id, {"status": "completed"})
            elif kind == "crash":
                (worker_id,) = data
                self._alive_workers.pop(worker_id, None)
                # no deregistration: the scheduler must notice the silence
                self._push(
                    self.clock.now() + self.scheduler.heartbeat_timeout + 1, "noop"
                )
            self._scale_pass()
            self._lease_pass()
            if not self._events and self.scheduler.total_outstanding():
                # crashed workers left work behind; give the heartbeat
                # timeout a chance to fire, then requeue and carry on
                self._push(self.clock.now() + self.scheduler.heartbeat_timeout + 1, "noop")

        settle = settle_time if settle_time is not None else self.policy.scale_down_idle + 1
        self.clock.advance(settle)
        self._heartbeat_all()
        self._scale_pass()

        desired = [d.desired_workers for d in self.scheduler.decision_log]
        return SimReport(
            submissions=self.submissions,
            max_desired=max(desired) if desired else 0,
            final_desired=desired[-1] if desired else 0,
            max_benchmark_running=self.max_benchmark_running,
            gating_violations=self.gating_violations,
            sim_seconds=self.clock.now(),
        )


def lorr_daily_profile(
    total: int = 825, days: int = 92, peak: int = 35, seed: int = 7
) -> list[int]:
    """A daily submission-count profile matching the reported load: the
    given total across the competition with one peak day."""
    base = (total - peak) // (days - 1)
    counts = [base] * (days - 1)
    remainder = (total - peak) - base * (days - 1)
    rng = random.Random(seed)
    for idx in rng.sample(range(days - 1), remainder):
        counts[idx] += 1
    counts.insert(days // 2, peak)
    assert sum(counts) == total and max(counts) == peak
    return counts


def run_load_replay(
    daily_counts: list[int],
    policy: PoolPolicy,
    job_seconds: float = 1.0,
    day_seconds: float = 86_400.0,
    seed: int = 0,
) -> tuple[SimReport, Scheduler]:
    """Replay a whole competition's submission stream on the compressed
    clock; returns the report plus the scheduler for ledger reconciliation."""
    sim = Simulation(
        policy,
        job_seconds=job_seconds,
        with_precompute_stage=True,
        with_benchmark_stage=False,
        seed=seed,
    )
    rng = random.Random(seed)
    n = 0
    for day, count in enumerate(daily_counts):
        for _ in range(count):
            at = day * day_seconds + rng.uniform(0, day_seconds)
            sim.add_submission_at(at, f"sub-{n:05d}")
            n += 1
    report = sim.run()
    return report, sim.scheduler


def run_mixed_stage_sim(seed: int) -> SimReport:
    """Randomised precompute+benchmark scheduling scenario used for the
    exclusivity and gating checks."""
    rng = random.Random(seed)
    policy = PoolPolicy(
        min_workers=1,
        max_workers=rng.randint(1, 4),
        per_worker_parallelism=rng.randint(1, 4),
        scale_down_idle=rng.uniform(5, 120),
    )
    sim = Simulation(
        policy,
        job_seconds=rng.uniform(0.2, 30.0),
        benchmark_hosts=rng.randint(1, 2),
        with_precompute_stage=True,
        with_benchmark_stage=True,
        seed=seed,
    )
    for i in range(rng.randint(1, 30)):
        sim.add_submission_at(rng.uniform(0, 600), f"sub-{seed}-{i}")
    return sim.run()
