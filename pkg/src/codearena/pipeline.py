"""Evaluation server: drives one submission from queued to a terminal state.

Fetches and pins the code, applies the protected overlay, reads the
dependency manifest, then walks the competition's stage plan in order:
debug instances before hidden instances within each instanced stage, and a
benchmark stage only ever enqueued after the preceding stage finished ok.
Outcomes and parsed metric records are persisted incrementally so
participants watch progress live; writes are idempotent upserts keyed by
(stage, instance, metric) so a crash-and-restart never duplicates records.
"""

from __future__ import annotations

import json
import math
import threading
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .clock import Clock, utc_iso
from .domain import (
    Competition,
    ExitKind,
    InstanceScope,
    LifecycleEvent,
    MetricRecord,
    MetricSpec,
    StageKind,
    StageOutcome,
    StageSpec,
    Submission,
    SubmissionStatus,
    Subaccount,
    transition_submission,
)
from .gitgateway import GitGateway, GitGatewayError, RepoRef, apply_protected_overlay
from .objectstore import ObjectStore
from .sandbox import DEPENDENCY_MANIFEST, PackageRejected, parse_dependency_manifest, validate_packages
from .scheduler import JobTicket, ResourceVector, Scheduler, new_job_id
from .store import CollectionName, DocumentStore, VersionConflict, WatchLagOverflow


class PipelineError(Exception):
    pass


class EmptyInstanceSet(PipelineError):
    pass


class MetricParseError(PipelineError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


@dataclass(frozen=True)
class RunPlan:
    instance_id: Optional[str]
    scope: InstanceScope


@dataclass(frozen=True)
class StagePlan:
    spec: StageSpec
    runs: tuple[RunPlan, ...]


@dataclass(frozen=True)
class EvaluationPlan:
    stages: tuple[StagePlan, ...]


def assemble_plan(competition: Competition) -> EvaluationPlan:
    """Instance-less precompute stages run once; benchmark stages run per
    instance, every debug instance strictly before every hidden one, in the
    competition's declared order."""
    stages = []
    for spec in competition.stage_plan:
        if spec.kind == StageKind.PRECOMPUTE:
            runs = (RunPlan(None, InstanceScope.NA),)
        else:
            runs = tuple(
                [RunPlan(i, InstanceScope.DEBUG) for i in competition.debug_instances]
                + [RunPlan(i, InstanceScope.HIDDEN) for i in competition.hidden_instances]
            )
            if not runs:
                raise EmptyInstanceSet(f"benchmark stage {spec.stage_name!r} has no instances")
        stages.append(StagePlan(spec, runs))
    return EvaluationPlan(tuple(stages))


def parse_metrics(
    raw: str,
    schema: Sequence[MetricSpec],
    scope: InstanceScope,
    allowed_instances: Optional[set[str]] = None,
) -> list[MetricRecord]:
    """Parse the metrics file (one JSON object per line:
    {"instance": str, "metrics": {name: number}}), validating every record
    against the schema. Duplicate (instance, metric) pairs, unknown names,
    unknown instances and non-finite values are rejected."""
    known = {m.metric_name for m in schema}
    seen: set[tuple[str, str]] = set()
    records: list[MetricRecord] = []
    for line_no, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MetricParseError(line_no, f"invalid JSON: {exc.msg}")
        if not isinstance(obj, dict) or "instance" not in obj or "metrics" not in obj:
            raise MetricParseError(line_no, "expected {\"instance\", \"metrics\"}")
        instance = obj["instance"]
        if not isinstance(instance, str) or not instance:
            raise MetricParseError(line_no, "instance must be a non-empty string")
        if allowed_instances is not None and instance not in allowed_instances:
            raise MetricParseError(line_no, f"instance {instance!r} not in this run's scope")
        metrics = obj["metrics"]
        if not isinstance(metrics, dict):
            raise MetricParseError(line_no, "metrics must be an object")
        for name, value in metrics.items():
            if name not in known:
                raise MetricParseError(line_no, f"unknown metric {name!r}")
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise MetricParseError(line_no, f"metric {name!r} must be a number")
            if not math.isfinite(value):
                raise MetricParseError(line_no, f"metric {name!r} is not finite")
            key = (instance, name)
            if key in seen:
                raise MetricParseError(line_no, f"duplicate record for {key}")
            seen.add(key)
            records.append(MetricRecord(instance, name, float(value), scope))
    return records


_FAILURE_EVENTS = {
    ExitKind.TIME_LIMIT: LifecycleEvent.TIMEOUT,
    ExitKind.MEMORY_LIMIT: LifecycleEvent.RESOURCE_KILL,
    ExitKind.DISK_LIMIT: LifecycleEvent.RESOURCE_KILL,
    ExitKind.NONZERO_EXIT: LifecycleEvent.STAGE_FAIL,
    ExitKind.SANDBOX_ERROR: LifecycleEvent.STAGE_FAIL,
}

# when several runs failed differently, the submission's terminal state is
# decided by this precedence
_SEVERITY = (ExitKind.TIME_LIMIT, ExitKind.MEMORY_LIMIT, ExitKind.DISK_LIMIT,
             ExitKind.NONZERO_EXIT, ExitKind.SANDBOX_ERROR)


def stage_failure_event(exit_kinds: Sequence[ExitKind]) -> Optional[LifecycleEvent]:
    for kind in _SEVERITY:
        if kind in exit_kinds:
            return _FAILURE_EVENTS[kind]
    return None


class EvaluationServer:
    """Watches for queued submissions and evaluates each in a worker thread."""

    def __init__(
        self,
        store: DocumentStore,
        gateway: GitGateway,
        scheduler: Scheduler,
        object_store: ObjectStore,
        base_image_id: str = "host",
        package_allow_list: Optional[Sequence[str]] = None,
        worktree_root: "Path | str" = "worktrees",
        clock: Optional[Clock] = None,
        max_concurrent: int = 4,
        poll_interval: float = 2.0,
    ):
        self.store = store
        self.gateway = gateway
        self.scheduler = scheduler
        self.object_store = object_store
        self.base_image_id = base_image_id
        self.package_allow_list = list(package_allow_list) if package_allow_list else None
        self.worktree_root = Path(worktree_root)
        self.worktree_root.mkdir(parents=True, exist_ok=True)
        self.clock = clock or Clock()
        self.poll_interval = poll_interval
        self._sema = threading.Semaphore(max_concurrent)
        self._in_flight: set[str] = set()
        self._in_flight_lock = threading.Lock()
        self._results: dict[str, Mapping[str, Any]] = {}
        self._result_events: dict[str, threading.Event] = {}
        self._results_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        scheduler.set_result_listener(self._on_job_complete)

    # -- service loop ---------------------------------------------------

    def start(self) -> "EvaluationServer":
        self.recover()
        t = threading.Thread(target=self._watch_loop, name="submission-watch", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=10)

    def recover(self) -> int:
        """Pick up every non-terminal submission (startup / crash recovery)."""
        pending: set[str] = set()
        for status in ("queued", "fetching", "evaluating"):
            for doc in self.store.query(CollectionName.SUBMISSIONS, {"status": status}):
                pending.add(doc.id)
        for submission_id in sorted(pending):
            self._spawn(submission_id)
        return len(pending)

    def _watch_loop(self) -> None:
        token = self.store.current_seq(CollectionName.SUBMISSIONS)
        watcher = self.store.watch(
            CollectionName.SUBMISSIONS, {"status": "queued"}, since_seq=token
        )
        while not self._stop.is_set():
            try:
                event = watcher.next(timeout=self.poll_interval)
            except WatchLagOverflow:
                # catch up with a query, then resubscribe from the new head
                token = self.store.current_seq(CollectionName.SUBMISSIONS)
                for doc in self.store.query(CollectionName.SUBMISSIONS, {"status": "queued"}):
                    self._spawn(doc.id)
                watcher = self.store.watch(
                    CollectionName.SUBMISSIONS, {"status": "queued"}, since_seq=token
                )
                continue
            except Exception:
                return
            if event is not None:
                self._spawn(event.doc.id)
            else:
                # poll fallback: watch delivery plus a periodic sweep
                for doc in self.store.query(CollectionName.SUBMISSIONS, {"status": "queued"}):
                    self._spawn(doc.id)

    def _spawn(self, submission_id: str) -> None:
        with self._in_flight_lock:
            if submission_id in self._in_flight:
                return
            self._in_flight.add(submission_id)
        t = threading.Thread(
            target=self._evaluate_guarded, args=(submission_id,), daemon=True
        )
        t.start()
        self._threads.append(t)

    def _evaluate_guarded(self, submission_id: str) -> None:
        with self._sema:
            try:
                self.evaluate_submission(submission_id)
            except Exception:
                try:
                    self._log(submission_id, "internal error:\n" + traceback.format_exc())
                    self._apply_event(submission_id, LifecycleEvent.STAGE_FAIL)
                except Exception:
                    pass
            finally:
                with self._in_flight_lock:
                    self._in_flight.discard(submission_id)

    # -- persistence helpers ---------------------------------------------

    def _load(self, submission_id: str) -> tuple[Submission, int]:
        doc = self.store.get_document(CollectionName.SUBMISSIONS, submission_id)
        if doc is None:
            raise PipelineError(f"submission {submission_id} not found")
        return Submission.from_doc(doc.body), doc.version

    def _update(self, submission_id: str, fn) -> Submission:
        """Read-modify-write with optimistic retry."""
        while True:
            sub, version = self._load(submission_id)
            updated = fn(sub)
            try:
                self.store.put_document(
                    CollectionName.SUBMISSIONS,
                    updated.to_doc(),
                    doc_id=submission_id,
                    expected_version=version,
                )
                return updated
            except VersionConflict:
                continue

    def _log(self, submission_id: str, message: str) -> None:
        stamp = utc_iso(self.clock.now())
        self._update(
            submission_id,
            lambda sub: Submission.from_doc(
                {**sub.to_doc(), "server_log": sub.server_log + f"[{stamp}] {message}\n"}
            ),
        )

    def _apply_event(self, submission_id: str, event: LifecycleEvent, **changes) -> Submission:
        def apply(sub: Submission) -> Submission:
            next_status = transition_submission(sub.status, event)
            return Submission.from_doc({**sub.to_doc(), **changes, "status": next_status.value})

        return self._update(submission_id, apply)

    # -- job completion plumbing -------------------------------------------

    def _on_job_complete(self, ticket: JobTicket, payload: Mapping[str, Any]) -> None:
        with self._results_lock:
            self._results[ticket.job_id] = payload
            event = self._result_events.get(ticket.job_id)
        if event is not None:
            event.set()

    def _run_stage_job(self, ticket: JobTicket, wait_timeout: float) -> Mapping[str, Any]:
        event = threading.Event()
        with self._results_lock:
            self._result_events[ticket.job_id] = event
        self.scheduler.enqueue_job(ticket)
        if not event.wait(timeout=wait_timeout):
            raise PipelineError(f"no result for job {ticket.job_id} within {wait_timeout}s")
        with self._results_lock:
            self._result_events.pop(ticket.job_id, None)
            return self._results.pop(ticket.job_id)

    # -- the pipeline itself -------------------------------------------------

    def evaluate_submission(self, submission_id: str) -> SubmissionStatus:
        """Run (or resume) one submission to a terminal status."""
        sub, _ = self._load(submission_id)
        if sub.status in (SubmissionStatus.DONE, SubmissionStatus.FAILED,
                          SubmissionStatus.TIMED_OUT, SubmissionStatus.KILLED):
            return sub.status

        comp_doc = self.store.get_document(CollectionName.COMPETITIONS, sub.competition_id)
        acct_doc = self.store.get_document(CollectionName.SUBACCOUNTS, sub.subaccount_id)
        if comp_doc is None or acct_doc is None:
            self._log(submission_id, "competition or subaccount missing")
            return self._fail(submission_id, from_status=sub.status)
        competition = Competition.from_doc(comp_doc.body)
        subaccount = Subaccount.from_doc(acct_doc.body)

        if sub.status == SubmissionStatus.QUEUED:
            try:
                sub = self._apply_event(submission_id, LifecycleEvent.STAGE_STARTED)
            except VersionConflict:
                sub, _ = self._load(submission_id)
            self._log(submission_id, "dispatched: fetching repository head")

        repo = RepoRef(subaccount.repo_url, self.gateway.provider.kind, subaccount.subaccount_id)
        tree_dir = self.worktree_root / submission_id
        try:
            if sub.commit_hash:
                worktree = self.gateway.checkout_commit(repo, sub.commit_hash, dest=tree_dir)
                commit = sub.commit_hash
            else:
                commit, worktree = self.gateway.fetch_at_head(repo, dest=tree_dir)
        except GitGatewayError as exc:
            self._log(submission_id, f"fetch failed: {exc}")
            return self._fail(submission_id, from_status=sub.status)

        fetched_digest = worktree.manifest_digest  # pre-overlay: pure function of the commit
        worktree = apply_protected_overlay(worktree, competition.protected_files)

        manifest_path = worktree.root_path / DEPENDENCY_MANIFEST
        packages: tuple[str, ...] = ()
        if manifest_path.is_file():
            packages = parse_dependency_manifest(manifest_path.read_text("utf-8"))
            try:
                validate_packages(packages, self.package_allow_list)
            except PackageRejected as exc:
                self._log(submission_id, f"dependency manifest rejected: {exc}")
                return self._fail(submission_id, from_status=sub.status)

        if sub.status == SubmissionStatus.FETCHING:
            sub = self._apply_event(
                submission_id,
                LifecycleEvent.FETCHED,
                commit_hash=commit,
                worktree_digest=fetched_digest,
                declared_packages=list(packages),
            )
            self._log(submission_id, f"pinned commit {commit}")

        try:
            plan = assemble_plan(competition)
        except EmptyInstanceSet as exc:
            self._log(submission_id, str(exc))
            return self._fail(submission_id, from_status=sub.status)

        completed = self._completed_stages(sub, plan)
        precompute_prefix: Optional[str] = None
        for stage_plan in plan.stages:
            stage = stage_plan.spec
            artifact_prefix = f"submissions/{submission_id}/{stage.stage_name}"
            if stage.stage_name in completed:
                if stage.kind == StageKind.PRECOMPUTE:
                    precompute_prefix = artifact_prefix
                self._log(submission_id, f"stage {stage.stage_name}: already complete, skipping")
                continue

            self._log(submission_id, f"stage {stage.stage_name}: enqueueing job")
            ticket = JobTicket(
                job_id=new_job_id(),
                submission_id=submission_id,
                stage_name=stage.stage_name,
                stage_kind=stage.kind,
                enqueue_time=self.clock.now(),
                required_resources=ResourceVector(
                    stage.cpu_limit, stage.memory_limit, stage.disk_limit
                ),
                deadline=stage.time_limit * max(1, len(stage_plan.runs)),
                payload={
                    "worktree_path": str(worktree.root_path),
                    "command": list(stage.command),
                    "limits": {
                        "cpu_cores": stage.cpu_limit,
                        "memory_bytes": stage.memory_limit,
                        "disk_bytes": stage.disk_limit,
                        "wall_seconds": stage.time_limit,
                        "network_allowed": stage.network_allowed,
                    },
                    "env": {
                        "base_image_id": self.base_image_id,
                        "extra_packages": list(packages),
                    },
                    "runs": [
                        {"instance_id": r.instance_id, "scope": r.scope.value}
                        for r in stage_plan.runs
                    ],
                    "artifact_prefix": artifact_prefix,
                    "aux_prefix": precompute_prefix if stage.kind == StageKind.BENCHMARK else None,
                    "fail_fast": competition.fail_fast,
                },
            )
            wait_timeout = ticket.deadline * (self.scheduler.max_retries + 2) + 120
            try:
                payload = self._run_stage_job(ticket, wait_timeout)
            except Exception as exc:
                self._log(submission_id, f"stage {stage.stage_name}: {exc}")
                return self._fail(submission_id, from_status=SubmissionStatus.EVALUATING)

            event = self._persist_stage_results(submission_id, competition, stage_plan, payload)
            if event is not LifecycleEvent.STAGE_OK:
                self._log(submission_id, f"stage {stage.stage_name}: failed ({event.value})")
                terminal = self._apply_event(submission_id, event)
                self._cleanup(tree_dir)
                return terminal.status
            self._log(submission_id, f"stage {stage.stage_name}: ok")
            if stage.kind == StageKind.PRECOMPUTE:
                precompute_prefix = artifact_prefix
            if stage_plan is not plan.stages[-1]:
                self._apply_event(submission_id, LifecycleEvent.STAGE_OK)

        final = self._apply_event(submission_id, LifecycleEvent.ALL_STAGES_DONE)
        self._log(submission_id, "evaluation complete")
        self._cleanup(tree_dir)
        return final.status

    def _completed_stages(self, sub: Submission, plan: EvaluationPlan) -> set[str]:
        done = set()
        for stage_plan in plan.stages:
            outcomes = [o for o in sub.stage_outcomes if o.stage_name == stage_plan.spec.stage_name]
            ok_runs = {
                (o.instance_id, o.instance_scope)
                for o in outcomes
                if o.exit_kind == ExitKind.OK
            }
            wanted = {(r.instance_id, r.scope) for r in stage_plan.runs}
            if wanted and wanted <= ok_runs:
                done.add(stage_plan.spec.stage_name)
        return done

    def _persist_stage_results(
        self,
        submission_id: str,
        competition: Competition,
        stage_plan: StagePlan,
        payload: Mapping[str, Any],
    ) -> LifecycleEvent:
        """Write outcomes and metric records for one finished stage job and
        classify the stage's lifecycle event."""
        stage = stage_plan.spec
        if payload.get("status") == "failed":
            self._log(submission_id, f"stage {stage.stage_name}: {payload.get('error')}")
            return LifecycleEvent.STAGE_FAIL

        outcomes: list[StageOutcome] = []
        records: list[MetricRecord] = []
        parse_failure: Optional[str] = None
        for run in payload.get("runs", ()):
            scope = InstanceScope(run["scope"])
            outcomes.append(
                StageOutcome(
                    stage_name=stage.stage_name,
                    instance_scope=scope,
                    exit_kind=ExitKind(run["exit_kind"]),
                    wall_time=float(run["wall_time"]),
                    peak_memory=int(run["peak_memory"]),
                    instance_id=run.get("instance_id"),
                    stdout_ref=run.get("stdout_key"),
                    stderr_ref=run.get("stderr_key"),
                    artifact_refs=tuple(run.get("artifact_keys", ())),
                )
            )
            if ExitKind(run["exit_kind"]) == ExitKind.OK and scope != InstanceScope.NA:
                metrics_key = next(
                    (k for k in run.get("artifact_keys", ()) if k.endswith("/metrics.jsonl")),
                    None,
                )
                if metrics_key is not None:
                    raw = self.object_store.get(metrics_key).decode("utf-8")
                    try:
                        records.extend(
                            parse_metrics(
                                raw,
                                competition.metric_schema,
                                scope,
                                allowed_instances={run["instance_id"]},
                            )
                        )
                    except MetricParseError as exc:
                        # line detail is participant-visible only for debug runs
                        if scope == InstanceScope.DEBUG:
                            parse_failure = f"metrics rejected ({run['instance_id']}): {exc}"
                        else:
                            parse_failure = "metrics rejected on a hidden instance"
                        break

        def apply(sub: Submission) -> Submission:
            doc = sub.to_doc()
            kept_outcomes = [
                o for o in doc["stage_outcomes"] if o["stage_name"] != stage.stage_name
            ]
            kept_outcomes.extend(o.to_doc() for o in outcomes)
            doc["stage_outcomes"] = kept_outcomes
            new_keys = {(stage.stage_name, r.instance_id, r.metric_name) for r in records}
            kept_records = [
                m
                for m in doc["metric_records"]
                if (stage.stage_name, m["instance_id"], m["metric_name"]) not in new_keys
            ]
            kept_records.extend(r.to_doc() for r in records)
            doc["metric_records"] = kept_records
            return Submission.from_doc(doc)

        self._update(submission_id, apply)

        if parse_failure is not None:
            self._log(submission_id, parse_failure)
            return LifecycleEvent.STAGE_FAIL
        failure = stage_failure_event([o.exit_kind for o in outcomes])
        if failure is not None:
            return failure
        if len(outcomes) < len(stage_plan.runs):
            return LifecycleEvent.STAGE_FAIL  # job aborted before finishing all runs
        return LifecycleEvent.STAGE_OK

    def _fail(self, submission_id: str, from_status: SubmissionStatus) -> SubmissionStatus:
        if from_status == SubmissionStatus.QUEUED:
            self._apply_event(submission_id, LifecycleEvent.STAGE_STARTED)
        terminal = self._apply_event(submission_id, LifecycleEvent.STAGE_FAIL)
        return terminal.status

    @staticmethod
    def _cleanup(tree_dir: Path) -> None:
        import shutil

        shutil.rmtree(tree_dir, ignore_errors=True)
