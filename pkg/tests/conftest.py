import subprocess
import tempfile
from pathlib import Path

import pytest

from codearena.clock import utc_iso
from codearena.domain import (
    Aggregation,
    CategorySpec,
    Competition,
    MetricDirection,
    MetricSpec,
    StageConcurrency,
    StageKind,
    StageSpec,
    VisibilityPolicy,
)

GIT_ENV = {
    "GIT_AUTHOR_NAME": "tester",
    "GIT_AUTHOR_EMAIL": "tester@example.com",
    "GIT_COMMITTER_NAME": "tester",
    "GIT_COMMITTER_EMAIL": "tester@example.com",
    "GIT_CONFIG_NOSYSTEM": "1",
    "HOME": tempfile.gettempdir(),
    "PATH": "/usr/bin:/bin:/usr/local/bin",
}


def git(*args, cwd=None, check=True, input=None):
    proc = subprocess.run(
        ["git", *args], cwd=cwd, env=GIT_ENV, capture_output=True, text=True, input=input
    )
    if check and proc.returncode != 0:
        raise AssertionError(f"git {' '.join(args)} failed: {proc.stderr}")
    return proc


def push_files(remote: "Path | str", files: dict, message: str = "update", workdir=None) -> str:
    """Clone `remote`, write `files`, commit, push to main; returns the commit hash."""
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        clone = Path(tmp) / "clone"
        git("clone", str(remote), str(clone))
        for rel, content in files.items():
            target = clone / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(content, "utf-8")
        git("add", "-A", cwd=clone)
        git("commit", "-m", message, "--allow-empty", cwd=clone)
        git("push", "origin", "HEAD:main", cwd=clone)
        return git("rev-parse", "HEAD", cwd=clone).stdout.strip()


def quick_stage(
    name="bench",
    kind=StageKind.BENCHMARK,
    command=("/bin/sh", "-c", "true"),
    time_limit=20.0,
    memory=512 * 1024 * 1024,
    disk=256 * 1024 * 1024,
    network=False,
):
    return StageSpec(
        stage_name=name,
        kind=kind,
        concurrency=StageConcurrency.EXCLUSIVE
        if kind == StageKind.BENCHMARK
        else StageConcurrency.PARALLEL,
        time_limit=time_limit,
        cpu_limit=1.0,
        memory_limit=memory,
        disk_limit=disk,
        command=tuple(command),
        network_allowed=network,
    )


def make_competition(
    competition_id="comp1",
    stages=None,
    debug=("d1",),
    hidden=("h1", "h2"),
    policy=VisibilityPolicy.GPPC_STYLE,
    categories=None,
    start=0.0,
    end=4102444800.0,  # 2100-01-01, effectively always open
    **kwargs,
):
    schema = kwargs.pop(
        "metric_schema",
        (
            MetricSpec("runtime_seconds", MetricDirection.MINIMIZE, "s", Aggregation.MEAN),
            MetricSpec("solved", MetricDirection.MAXIMIZE, "", Aggregation.COUNT_SUCCESS),
        ),
    )
    if categories is None:
        categories = (
            CategorySpec(
                "fastest",
                "single_metric",
                {"metric": "runtime_seconds", "direction": "minimize"},
                tie_break=("solved",),
            ),
        )
    return Competition(
        competition_id=competition_id,
        name="Test Competition",
        start_time=utc_iso(start),
        end_time=utc_iso(end),
        stage_plan=tuple(stages or (quick_stage(),)),
        debug_instances=tuple(debug),
        hidden_instances=tuple(hidden),
        metric_schema=tuple(schema),
        categories=tuple(categories),
        visibility_policy=policy,
        **kwargs,
    )


@pytest.fixture
def doc_store(tmp_path):
    from codearena.store import DocumentStore

    store = DocumentStore(tmp_path / "store", fsync=False)
    yield store
    store.close()
