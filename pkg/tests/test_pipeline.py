"""Evaluation pipeline: plan assembly, metrics parsing, and end-to-end
submission orchestration over real workers and the process sandbox."""

import json
import textwrap

import pytest

from codearena.clock import utc_iso
from codearena.domain import (
    ExitKind,
    InstanceScope,
    LifecycleEvent,
    MetricDirection,
    MetricSpec,
    StageKind,
    Submission,
    SubmissionStatus,
)
from codearena.gitgateway import GitGateway, LocalBareProvider
from codearena.objectstore import LocalObjectStore
from codearena.pipeline import (
    EmptyInstanceSet,
    EvaluationServer,
    MetricParseError,
    assemble_plan,
    parse_metrics,
    stage_failure_event,
)
from codearena.scheduler import PoolPolicy, ResourceVector, Scheduler, WorkerCapability
from codearena.sandbox.process_backend import ProcessSandbox
from codearena.store import CollectionName, DocumentStore
from codearena.workers import JobExecutor, StubWorkerPool

from conftest import make_competition, push_files, quick_stage

SCHEMA = (
    MetricSpec("runtime_seconds", MetricDirection.MINIMIZE),
    MetricSpec("solved", MetricDirection.MAXIMIZE),
)


class TestAssemblePlan:
    def test_debug_before_hidden(self):
        comp = make_competition(debug=("d1",), hidden=("h1", "h2"))
        plan = assemble_plan(comp)
        runs = plan.stages[0].runs
        assert [(r.instance_id, r.scope.value) for r in runs] == [
            ("d1", "debug"),
            ("h1", "hidden"),
            ("h2", "hidden"),
        ]

    def test_practice_competition_debug_only(self):
        comp = make_competition(debug=("d1", "d2"), hidden=())
        runs = assemble_plan(comp).stages[0].runs
        assert all(r.scope == InstanceScope.DEBUG for r in runs)

    def test_precompute_precedes_benchmark(self):
        comp = make_competition(
            stages=(
                quick_stage("prep", StageKind.PRECOMPUTE),
                quick_stage("bench", StageKind.BENCHMARK),
            )
        )
        plan = assemble_plan(comp)
        assert plan.stages[0].spec.stage_name == "prep"
        assert plan.stages[0].runs[0].instance_id is None
        assert plan.stages[0].runs[0].scope == InstanceScope.NA

    def test_empty_instance_set_rejected(self):
        comp = make_competition(debug=(), hidden=())
        with pytest.raises(EmptyInstanceSet):
            assemble_plan(comp)


class TestParseMetrics:
    def test_valid_record(self):
        raw = json.dumps({"instance": "i1", "metrics": {"runtime_seconds": 0.5}})
        records = parse_metrics(raw, SCHEMA, InstanceScope.HIDDEN)
        assert records[0].instance_id == "i1"
        assert records[0].value == 0.5
        assert records[0].scope == InstanceScope.HIDDEN

    def test_nan_rejected(self):
        raw = '{"instance": "i1", "metrics": {"runtime_seconds": NaN}}'
        with pytest.raises(MetricParseError):
            parse_metrics(raw, SCHEMA, InstanceScope.DEBUG)

    def test_duplicate_rejected(self):
        line = json.dumps({"instance": "i1", "metrics": {"runtime_seconds": 1.0}})
        with pytest.raises(MetricParseError) as err:
            parse_metrics(line + "\n" + line, SCHEMA, InstanceScope.DEBUG)
        assert "duplicate" in str(err.value)

    def test_unknown_metric_rejected(self):
        raw = json.dumps({"instance": "i1", "metrics": {"mystery": 1.0}})
        with pytest.raises(MetricParseError):
            parse_metrics(raw, SCHEMA, InstanceScope.DEBUG)

    def test_instance_scope_enforced(self):
        raw = json.dumps({"instance": "other", "metrics": {"solved": 1}})
        with pytest.raises(MetricParseError):
            parse_metrics(raw, SCHEMA, InstanceScope.DEBUG, allowed_instances={"i1"})

    def test_bool_rejected(self):
        raw = json.dumps({"instance": "i1", "metrics": {"solved": True}})
        with pytest.raises(MetricParseError):
            parse_metrics(raw, SCHEMA, InstanceScope.DEBUG)

    def test_line_numbers_reported(self):
        good = json.dumps({"instance": "i1", "metrics": {"solved": 1}})
        with pytest.raises(MetricParseError) as err:
            parse_metrics(good + "\nnot json", SCHEMA, InstanceScope.DEBUG)
        assert err.value.line_no == 2


class TestFailureSeverity:
    def test_timeout_beats_everything(self):
        kinds = [ExitKind.OK, ExitKind.NONZERO_EXIT, ExitKind.TIME_LIMIT]
        assert stage_failure_event(kinds) == LifecycleEvent.TIMEOUT

    def test_memory_maps_to_resource_kill(self):
        assert stage_failure_event([ExitKind.MEMORY_LIMIT]) == LifecycleEvent.RESOURCE_KILL

    def test_all_ok_is_none(self):
        assert stage_failure_event([ExitKind.OK, ExitKind.OK]) is None


DRIVER = textwrap.dedent(
    """\
    import json, os, sys, time
    sys.path.insert(0, os.getcwd())
    import solver
    instance = os.environ["ARENA_INSTANCE_ID"]
    start = time.time()
    answer = solver.solve(instance)
    elapsed = time.time() - start
    out = os.environ["ARENA_OUTPUT_DIR"]
    record = {"instance": instance, "metrics": {"runtime_seconds": elapsed,
                                                "solved": 1 if answer else 0}}
    with open(os.path.join(out, "metrics.jsonl"), "w") as fh:
        fh.write(json.dumps(record) + "\\n")
    """
)

PRECOMPUTE = textwrap.dedent(
    """\
    import os
    with open(os.path.join(os.environ["ARENA_OUTPUT_DIR"], "table.txt"), "w") as fh:
        fh.write("precomputed-table")
    """
)

GOOD_SOLVER = "def solve(instance):\n    return instance\n"


class Harness:
    def __init__(self, tmp_path, competition, workers=1):
        self.store = DocumentStore(tmp_path / "store", fsync=False)
        self.objects = LocalObjectStore(tmp_path / "objects")
        self.provider = LocalBareProvider(tmp_path / "git")
        self.gateway = GitGateway(self.provider, tmp_path / "checkouts")
        self.scheduler = Scheduler(
            policy=PoolPolicy(min_workers=1, max_workers=4, per_worker_parallelism=2)
        )
        self.server = EvaluationServer(
            self.store,
            self.gateway,
            self.scheduler,
            self.objects,
            worktree_root=tmp_path / "worktrees",
        )
        backend = ProcessSandbox(tmp_path / "sandbox")
        executor = JobExecutor(backend, self.objects)
        capacity = ResourceVector(4.0, 4 * 1024**3, 16 * 1024**3)
        self.pool = StubWorkerPool(self.scheduler, executor, capacity, idle_poll=0.02)
        self.pool.start_worker(WorkerCapability.BENCHMARK_HOST)
        for _ in range(workers):
            self.pool.start_worker(WorkerCapability.PRECOMPUTE_POOL)

        self.competition = competition
        self.store.put_document(
            CollectionName.COMPETITIONS,
            competition.to_doc(),
            doc_id=competition.competition_id,
        )

    def make_submission(self, solver_files, subaccount_id="acct1"):
        ref = self.gateway.provision_repository(subaccount_id, "user1", template={"seed": "1\n"})
        push_files(self.provider.repo_path(subaccount_id), solver_files)
        self.store.put_document(
            CollectionName.SUBACCOUNTS,
            {
                "subaccount_id": subaccount_id,
                "user_id": "user1",
                "competition_id": self.competition.competition_id,
                "display_name": "Team",
                "repo_url": ref.repo_url,
                "extra_data": {},
                "active_submission_id": None,
            },
            doc_id=subaccount_id,
        )
        sub = Submission(
            submission_id=f"sub-{subaccount_id}",
            subaccount_id=subaccount_id,
            competition_id=self.competition.competition_id,
            submit_time=utc_iso(1000.0),
        )
        self.store.put_document(
            CollectionName.SUBMISSIONS, sub.to_doc(), doc_id=sub.submission_id
        )
        return sub.submission_id

    def load(self, submission_id):
        return Submission.from_doc(
            self.store.get_document(CollectionName.SUBMISSIONS, submission_id).body
        )

    def close(self):
        self.pool.stop_all()
        self.store.close()


def two_stage_competition(**kw):
    return make_competition(
        stages=(
            quick_stage("prep", StageKind.PRECOMPUTE, command=("python3", "precompute.py"),
                        time_limit=30.0),
            quick_stage("bench", StageKind.BENCHMARK, command=("python3", "driver.py"),
                        time_limit=kw.pop("bench_time_limit", 30.0)),
        ),
        protected_files=(("driver.py", DRIVER), ("precompute.py", PRECOMPUTE)),
        **kw,
    )


@pytest.fixture
def harness(tmp_path):
    instances = {"debug": ("d1",), "hidden": ("h1", "h2")}
    h = Harness(tmp_path, two_stage_competition(debug=instances["debug"],
                                                hidden=instances["hidden"]))
    yield h
    h.close()


class TestEvaluation:
    def test_happy_path_outcome_arity(self, harness):
        sid = harness.make_submission({"solver.py": GOOD_SOLVER})
        status = harness.server.evaluate_submission(sid)
        assert status == SubmissionStatus.DONE
        sub = harness.load(sid)
        prep = [o for o in sub.stage_outcomes if o.stage_name == "prep"]
        bench = [o for o in sub.stage_outcomes if o.stage_name == "bench"]
        assert len(prep) == 1 and len(bench) == 3
        assert all(o.exit_kind == ExitKind.OK for o in sub.stage_outcomes)
        recorded = {(m.instance_id, m.metric_name, m.scope.value) for m in sub.metric_records}
        assert ("d1", "solved", "debug") in recorded
        assert ("h1", "solved", "hidden") in recorded and ("h2", "solved", "hidden") in recorded
        assert len(sub.commit_hash) == 40
        assert sub.worktree_digest
        assert "pinned commit" in sub.server_log
        # every debug run of a stage precedes every hidden run of it
        scopes = [o.instance_scope for o in bench]
        debug_idx = [i for i, s in enumerate(scopes) if s == InstanceScope.DEBUG]
        hidden_idx = [i for i, s in enumerate(scopes) if s == InstanceScope.HIDDEN]
        assert max(debug_idx) < min(hidden_idx)

    def test_precompute_artifacts_visible_to_benchmark(self, harness):
        probing = (
            "import os\n"
            "def solve(instance):\n"
            "    path = os.path.join(os.environ['ARENA_PRECOMP_DIR'], 'table.txt')\n"
            "    return open(path).read() == 'precomputed-table'\n"
        )
        sid = harness.make_submission({"solver.py": probing})
        assert harness.server.evaluate_submission(sid) == SubmissionStatus.DONE
        sub = harness.load(sid)
        assert all(m.value == 1 for m in sub.metric_records if m.metric_name == "solved")

    def test_precompute_failure_gates_benchmark(self, tmp_path):
        comp = two_stage_competition(debug=("d1",), hidden=("h1",))
        comp = comp.__class__.from_doc(
            {**comp.to_doc(), "protected_files": [["driver.py", DRIVER],
                                                  ["precompute.py", "raise SystemExit(9)"]]}
        )
        h = Harness(tmp_path, comp)
        try:
            sid = h.make_submission({"solver.py": GOOD_SOLVER})
            assert h.server.evaluate_submission(sid) == SubmissionStatus.FAILED
            sub = h.load(sid)
            assert all(o.stage_name == "prep" for o in sub.stage_outcomes)
            # the benchmark ticket never existed
            assert all(
                t == "completed" for t in h.scheduler.ledger.terminal.values()
            )
            assert len(h.scheduler.ledger.enqueued) == 1
        finally:
            h.close()

    def test_benchmark_timeout_keeps_earlier_metrics(self, tmp_path):
        slow_solver = (
            "import time\n"
            "def solve(instance):\n"
            "    if instance == 'h1':\n"
            "        time.sleep(30)\n"
            "    return instance\n"
        )
        comp = two_stage_competition(debug=("d1",), hidden=("h1",), bench_time_limit=1.0)
        h = Harness(tmp_path, comp)
        try:
            sid = h.make_submission({"solver.py": slow_solver})
            assert h.server.evaluate_submission(sid) == SubmissionStatus.TIMED_OUT
            sub = h.load(sid)
            bench = {o.instance_id: o for o in sub.stage_outcomes if o.stage_name == "bench"}
            assert bench["h1"].exit_kind == ExitKind.TIME_LIMIT
            assert any(m.instance_id == "d1" for m in sub.metric_records)
            assert not any(m.instance_id == "h1" for m in sub.metric_records)
        finally:
            h.close()

    def test_bad_metrics_fail_submission(self, tmp_path):
        # solver tricks the driver into emitting an unknown metric name
        evil_driver = DRIVER.replace('"solved"', '"mystery"')
        comp = make_competition(
            stages=(quick_stage("bench", command=("python3", "driver.py")),),
            protected_files=(("driver.py", evil_driver),),
            debug=("d1",),
            hidden=(),
        )
        h = Harness(tmp_path, comp)
        try:
            sid = h.make_submission({"solver.py": GOOD_SOLVER})
            assert h.server.evaluate_submission(sid) == SubmissionStatus.FAILED
            assert "metrics rejected" in h.load(sid).server_log
        finally:
            h.close()

    def test_fetch_failure_marks_failed(self, harness):
        # no pushes beyond provisioning template: repo exists; delete it to
        # simulate an unreachable repository
        sid = harness.make_submission({"solver.py": GOOD_SOLVER})
        harness.provider.delete_repo("acct1")
        assert harness.server.evaluate_submission(sid) == SubmissionStatus.FAILED
        assert "fetch failed" in harness.load(sid).server_log

    def test_rejected_package_manifest_fails(self, tmp_path):
        comp = two_stage_competition(debug=("d1",), hidden=())
        h = Harness(tmp_path, comp)
        h.server.package_allow_list = ["libgood"]
        try:
            sid = h.make_submission(
                {"solver.py": GOOD_SOLVER, "packages.txt": "libevil\n"}
            )
            assert h.server.evaluate_submission(sid) == SubmissionStatus.FAILED
            assert "dependency manifest rejected" in h.load(sid).server_log
        finally:
            h.close()

    def test_declared_packages_recorded(self, tmp_path):
        comp = two_stage_competition(debug=("d1",), hidden=())
        h = Harness(tmp_path, comp)
        h.server.package_allow_list = ["libgood"]
        try:
            sid = h.make_submission(
                {"solver.py": GOOD_SOLVER, "packages.txt": "# comment\nlibgood\n"}
            )
            h.server.evaluate_submission(sid)
            assert h.load(sid).declared_packages == ("libgood",)
        finally:
            h.close()

    def test_worktree_digest_is_pre_overlay_commit_tree(self, harness):
        sid = harness.make_submission({"solver.py": GOOD_SOLVER})
        harness.server.evaluate_submission(sid)
        sub = harness.load(sid)
        ref = harness.gateway.provision_repository.__self__  # gateway
        from codearena.gitgateway import RepoRef

        repo = RepoRef("", harness.provider.kind, "acct1")
        tree = harness.gateway.checkout_commit(repo, sub.commit_hash)
        assert tree.manifest_digest == sub.worktree_digest


class TestRecovery:
    def test_resume_skips_completed_stage_and_never_duplicates(self, tmp_path):
        comp = two_stage_competition(debug=("d1",), hidden=("h1",))
        h = Harness(tmp_path, comp)
        try:
            sid = h.make_submission({"solver.py": GOOD_SOLVER})
            assert h.server.evaluate_submission(sid) == SubmissionStatus.DONE
            finished = h.load(sid)

            # simulate a crash after prep finished: drop bench outcomes and
            # wind the status back to evaluating
            doc = finished.to_doc()
            doc["stage_outcomes"] = [
                o for o in doc["stage_outcomes"] if o["stage_name"] == "prep"
            ]
            doc["status"] = "evaluating"
            current = h.store.get_document(CollectionName.SUBMISSIONS, sid)
            h.store.put_document(
                CollectionName.SUBMISSIONS, doc, doc_id=sid, expected_version=current.version
            )

            assert h.server.evaluate_submission(sid) == SubmissionStatus.DONE
            resumed = h.load(sid)
            assert "stage prep: already complete, skipping" in resumed.server_log
            keys = [(m.instance_id, m.metric_name) for m in resumed.metric_records]
            assert len(keys) == len(set(keys))  # idempotent upserts, no duplicates
            assert {o.stage_name for o in resumed.stage_outcomes} == {"prep", "bench"}
        finally:
            h.close()

    def test_recover_scan_picks_up_queued(self, tmp_path):
        comp = two_stage_competition(debug=("d1",), hidden=())
        h = Harness(tmp_path, comp)
        try:
            sid = h.make_submission({"solver.py": GOOD_SOLVER})
            picked = h.server.recover()
            assert picked == 1
            for _ in range(600):
                if h.load(sid).status == SubmissionStatus.DONE:
                    break
                import time

                time.sleep(0.05)
            assert h.load(sid).status == SubmissionStatus.DONE
        finally:
            h.close()

    def test_watch_loop_drives_new_submission(self, tmp_path):
        comp = two_stage_competition(debug=("d1",), hidden=())
        h = Harness(tmp_path, comp)
        h.server.poll_interval = 0.2
        h.server.start()
        try:
            sid = h.make_submission({"solver.py": GOOD_SOLVER})
            import time

            deadline = time.time() + 30
            while time.time() < deadline:
                if h.load(sid).status == SubmissionStatus.DONE:
                    break
                time.sleep(0.05)
            assert h.load(sid).status == SubmissionStatus.DONE
        finally:
            h.server.stop()
            h.close()
