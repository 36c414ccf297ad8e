"""Worker runtime: leases evaluation jobs, executes every run of the stage
in the sandbox, backs up outputs to the object store and reports outcomes.

The same agent loop serves both worker providers: in-process stub workers
(DirectTransport against a local Scheduler, used by tests, simulations and
single-node deployments) and remote agents speaking the JSON-over-HTTP wire
protocol (HttpTransport). Remote workers assume the job's worktree path is
reachable, i.e. a shared filesystem between the evaluation server and the
computing units.
"""

from __future__ import annotations

import tempfile
import threading
import uuid
from pathlib import Path
from typing import Optional

from .clock import Clock
from .domain import ExitKind
from .objectstore import ObjectStore, StoreUnavailable
from .sandbox import (
    CollectedRun,
    EnvironmentSpec,
    RunLimits,
    SandboxBackend,
    SandboxError,
    SandboxStartFailure,
    collect_artifacts,
)
from .scheduler import (
    JobTicket,
    PROTOCOL_VERSION,
    ResourceVector,
    Scheduler,
    StaleWorker,
    WorkerCapability,
)

_STORE_RETRIES = 5


class JobExecutor:
    """Runs one leased job: N sandbox runs plus artifact backup."""

    def __init__(self, backend: SandboxBackend, object_store: ObjectStore):
        self.backend = backend
        self.object_store = object_store

    def execute(self, ticket: JobTicket, cancel_event: threading.Event) -> dict:
        payload = ticket.payload
        runs_out: list[dict] = []
        try:
            env = self.backend.build_environment(
                EnvironmentSpec(
                    payload["env"]["base_image_id"],
                    tuple(payload["env"].get("extra_packages", ())),
                )
            )
        except SandboxError as exc:
            return {
                "v": PROTOCOL_VERSION,
                "status": "failed",
                "runs": [],
                "error": f"environment build failed: {exc}",
            }

        worktree = Path(payload["worktree_path"])
        if not worktree.is_dir():
            return {
                "v": PROTOCOL_VERSION,
                "status": "failed",
                "runs": [],
                "error": f"worktree missing: {worktree}",
            }

        limits = RunLimits(**payload["limits"])
        aux_dir = self._materialise_aux(payload.get("aux_prefix"))
        fail_fast = bool(payload.get("fail_fast", False))

        for run in payload["runs"]:
            if cancel_event.is_set():
                break
            instance_id = run.get("instance_id")
            scope = run.get("scope", "n/a")
            input_files = {
                name: text.encode("utf-8") for name, text in run.get("input_files", {}).items()
            }
            try:
                result = self.backend.run_stage(
                    env,
                    worktree,
                    payload["command"],
                    limits,
                    instance_input=input_files,
                    aux_input_dir=aux_dir,
                    instance_id=instance_id,
                    scope=scope,
                    cancel_event=cancel_event,
                )
            except SandboxStartFailure as exc:
                runs_out.append(
                    {
                        "instance_id": instance_id,
                        "scope": scope,
                        "exit_kind": ExitKind.SANDBOX_ERROR.value,
                        "exit_code": None,
                        "wall_time": 0.0,
                        "peak_memory": 0,
                        "stdout_key": None,
                        "stderr_key": None,
                        "artifact_keys": [],
                        "detail": str(exc),
                    }
                )
                break
            key_prefix = payload["artifact_prefix"]
            if instance_id:
                key_prefix = f"{key_prefix}/{instance_id}"
            collected = self._collect_with_retry(result, key_prefix)
            runs_out.append(
                {
                    "instance_id": instance_id,
                    "scope": scope,
                    "exit_kind": result.exit_kind.value,
                    "exit_code": result.exit_code,
                    "wall_time": result.wall_time,
                    "peak_memory": result.peak_memory,
                    "stdout_key": collected.stdout_key,
                    "stderr_key": collected.stderr_key,
                    "artifact_keys": list(collected.artifact_keys),
                    "stdout_truncated": result.stdout_truncated,
                    "stderr_truncated": result.stderr_truncated,
                    "detail": result.detail,
                }
            )
            if not result.ok and fail_fast:
                break
        return {"v": PROTOCOL_VERSION, "status": "completed", "runs": runs_out, "error": None}

    def _collect_with_retry(self, result, key_prefix: str) -> CollectedRun:
        last: Optional[Exception] = None
        for _ in range(_STORE_RETRIES):
            try:
                return collect_artifacts(result, self.object_store, key_prefix)
            except StoreUnavailable as exc:
                last = exc
        raise last  # type: ignore[misc]

    def _materialise_aux(self, prefix: Optional[str]) -> Optional[Path]:
        if not prefix:
            return None
        keys = self.object_store.list(prefix)
        if not keys:
            return None
        aux = Path(tempfile.mkdtemp(prefix="aux-"))
        for key in keys:
            rel = key[len(prefix) :].lstrip("/")
            target = aux / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(self.object_store.get(key))
        return aux


class DirectTransport:
    """Worker messages as in-process method calls."""

    def __init__(self, scheduler: Scheduler):
        self.scheduler = scheduler

    def heartbeat(self, worker_id, capability, capacity) -> list[str]:
        return self.scheduler.heartbeat(worker_id, capability, capacity)

    def lease(self, worker_id) -> Optional[JobTicket]:
        try:
            return self.scheduler.next_assignment(worker_id)
        except StaleWorker:
            return None

    def report(self, worker_id, job_id, payload) -> None:
        self.scheduler.report_result(worker_id, job_id, payload)

    def kill_ack(self, worker_id, job_id) -> None:
        self.scheduler.kill_ack(worker_id, job_id)

    def register_kill_event(self, job_id, event) -> None:
        self.scheduler.register_kill_event(job_id, event)


class HttpTransport:
    """Worker messages over the versioned JSON wire protocol."""

    def __init__(self, base_url: str, client=None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.client = client or httpx.Client(timeout=30.0)
        self._kill_flags: dict[str, threading.Event] = {}
        self._lock = threading.Lock()

    def _post(self, path: str, body: dict) -> dict:
        resp = self.client.post(f"{self.base_url}{path}", json={"v": PROTOCOL_VERSION, **body})
        resp.raise_for_status()
        return resp.json()

    def heartbeat(self, worker_id, capability, capacity) -> list[str]:
        data = self._post(
            "/worker/heartbeat",
            {
                "worker_id": worker_id,
                "capability": capability.value,
                "capacity": capacity.to_doc(),
            },
        )
        kills = data.get("kill", [])
        with self._lock:
            for job_id in kills:
                event = self._kill_flags.get(job_id)
                if event is not None:
                    event.set()
        return kills

    def lease(self, worker_id) -> Optional[JobTicket]:
        data = self._post("/worker/lease", {"worker_id": worker_id})
        if not data.get("ticket"):
            return None
        return JobTicket.from_doc(data["ticket"])

    def report(self, worker_id, job_id, payload) -> None:
        self._post("/worker/result", {"worker_id": worker_id, "job_id": job_id, "result": payload})

    def kill_ack(self, worker_id, job_id) -> None:
        self._post("/worker/kill-ack", {"worker_id": worker_id, "job_id": job_id})

    def register_kill_event(self, job_id, event) -> None:
        with self._lock:
            self._kill_flags[job_id] = event


class WorkerAgent:
    """Lease/execute/report loop with a background heartbeat."""

    def __init__(
        self,
        transport,
        executor: JobExecutor,
        capability: WorkerCapability,
        capacity: ResourceVector,
        worker_id: Optional[str] = None,
        heartbeat_interval: float = 5.0,
        idle_poll: float = 0.1,
        clock: Optional[Clock] = None,
    ):
        self.worker_id = worker_id or f"worker-{uuid.uuid4().hex[:8]}"
        self.transport = transport
        self.executor = executor
        self.capability = capability
        self.capacity = capacity
        self.heartbeat_interval = heartbeat_interval
        self.idle_poll = idle_poll
        self.clock = clock or Clock()
        self.stop_event = threading.Event()
        self._thread: Optional[threading.Thread] = None

    @property
    def busy(self) -> bool:
        return getattr(self, "_busy", False)

    def start(self) -> "WorkerAgent":
        self._thread = threading.Thread(target=self.run, name=self.worker_id, daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout: float = 10.0) -> None:
        self.stop_event.set()
        if self._thread is not None:
            self._thread.join(timeout=timeout)

    def run(self) -> None:
        hb = threading.Thread(target=self._heartbeat_loop, daemon=True)
        hb.start()
        self.transport.heartbeat(self.worker_id, self.capability, self.capacity)
        while not self.stop_event.is_set():
            ticket = self.transport.lease(self.worker_id)
            if ticket is None:
                self.stop_event.wait(self.idle_poll)
                continue
            self._busy = True
            cancel = threading.Event()
            self.transport.register_kill_event(ticket.job_id, cancel)
            try:
                result = self.executor.execute(ticket, cancel)
            except Exception as exc:  # report, never wedge the worker
                result = {
                    "v": PROTOCOL_VERSION,
                    "status": "failed",
                    "runs": [],
                    "error": f"worker crashed: {exc}",
                }
            self.transport.report(self.worker_id, ticket.job_id, result)
            if cancel.is_set():
                self.transport.kill_ack(self.worker_id, ticket.job_id)
            self._busy = False

    def _heartbeat_loop(self) -> None:
        while not self.stop_event.is_set():
            try:
                self.transport.heartbeat(self.worker_id, self.capability, self.capacity)
            except Exception:
                pass  # transient; the lease loop keeps retrying anyway
            self.stop_event.wait(self.heartbeat_interval)


class StubWorkerPool:
    """In-process worker provider: each worker is a thread running the same
    agent loop as a remote machine would."""

    def __init__(
        self,
        scheduler: Scheduler,
        executor: JobExecutor,
        capacity: ResourceVector,
        heartbeat_interval: float = 2.0,
        idle_poll: float = 0.05,
    ):
        self.scheduler = scheduler
        self.executor = executor
        self.capacity = capacity
        self.heartbeat_interval = heartbeat_interval
        self.idle_poll = idle_poll
        self._agents: dict[str, WorkerAgent] = {}
        self._lock = threading.Lock()

    def start_worker(self, capability: WorkerCapability) -> str:
        agent = WorkerAgent(
            DirectTransport(self.scheduler),
            self.executor,
            capability,
            self.capacity,
            heartbeat_interval=self.heartbeat_interval,
            idle_poll=self.idle_poll,
        )
        agent.start()
        with self._lock:
            self._agents[agent.worker_id] = agent
        return agent.worker_id

    def stop_worker(self, worker_id: str) -> None:
        with self._lock:
            agent = self._agents.pop(worker_id, None)
        if agent is not None:
            agent.stop()
            self.scheduler.deregister_worker(worker_id)

    def worker_ids(self, capability: Optional[WorkerCapability] = None) -> list[str]:
        with self._lock:
            return [
                wid
                for wid, a in self._agents.items()
                if capability is None or a.capability == capability
            ]

    def stop_all(self) -> None:
        for wid in list(self.worker_ids()):
            self.stop_worker(wid)


class PoolManager:
    """Periodic supervision: expire lost workers, reap overdue jobs, scale
    the precompute pool toward the decision function's target."""

    def __init__(
        self,
        scheduler: Scheduler,
        pool: StubWorkerPool,
        interval: float = 1.0,
        clock: Optional[Clock] = None,
    ):
        self.scheduler = scheduler
        self.pool = pool
        self.interval = interval
        self.clock = clock or Clock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "PoolManager":
        self._thread = threading.Thread(target=self._loop, name="pool-manager", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10)

    def tick(self) -> None:
        self.scheduler.expire_workers()
        self.scheduler.reap_timeouts()
        decision = self.scheduler.scale_tick()
        current = self.pool.worker_ids(WorkerCapability.PRECOMPUTE_POOL)
        if decision.desired_workers > len(current):
            for _ in range(decision.desired_workers - len(current)):
                self.pool.start_worker(WorkerCapability.PRECOMPUTE_POOL)
        elif decision.desired_workers < len(current):
            excess = len(current) - decision.desired_workers
            for worker_id in self.scheduler.releasable_workers()[:excess]:
                self.pool.stop_worker(worker_id)

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                self.tick()
            except Exception:
                pass  # supervision must survive transient errors
            self._stop.wait(self.interval)
