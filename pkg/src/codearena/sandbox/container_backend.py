"""OCI-container sandbox backend.

Mirrors the production setup: environments are images built from the
competition's base image plus participant-declared system packages; runs get
the runtime's cgroup-backed CPU/memory caps, a size-limited tmpfs scratch
and no network unless allowed. The runtime (docker or podman) is invoked as
a subprocess.

Command construction is kept in pure functions so the backend is testable on
hosts without a runtime.
"""

from __future__ import annotations

import shutil
import subprocess
import tempfile
import threading
import time
from pathlib import Path
from typing import Mapping, Optional, Sequence

from ..domain import ExitKind
from . import (
    ArtifactFile,
    BackendUnavailable,
    EnvironmentHandle,
    EnvironmentSpec,
    PackageInstallFailed,
    RunLimits,
    RunResult,
    SandboxBackend,
    SandboxStartFailure,
    validate_packages,
)


def find_runtime() -> Optional[str]:
    for name in ("docker", "podman"):
        if shutil.which(name):
            return name
    return None


def runtime_available() -> bool:
    return find_runtime() is not None


def build_dockerfile(spec: EnvironmentSpec) -> str:
    lines = [f"FROM {spec.base_image_id}"]
    if spec.extra_packages:
        pkgs = " ".join(sorted(spec.extra_packages))
        lines.append(
            "RUN apt-get update && "
            f"apt-get install -y --no-install-recommends {pkgs} && "
            "rm -rf /var/lib/apt/lists/*"
        )
    return "\n".join(lines) + "\n"


def image_tag(spec: EnvironmentSpec) -> str:
    return f"codearena-env:{spec.env_digest[:16]}"


def run_argv(
    runtime: str,
    tag: str,
    limits: RunLimits,
    mounts: Sequence[tuple[str, str, str]],
    workdir: str,
    env: Mapping[str, str],
    entry_command: Sequence[str],
) -> list[str]:
    argv = [
        runtime,
        "run",
        "--rm",
        f"--cpus={limits.cpu_cores}",
        f"--memory={limits.memory_bytes}",
        f"--memory-swap={limits.memory_bytes}",
        "--pids-limit=256",
        f"--workdir={workdir}",
    ]
    if not limits.network_allowed:
        argv.append("--network=none")
    argv.append(f"--tmpfs=/scratch:rw,size={limits.disk_bytes}")
    for host, guest, mode in mounts:
        argv.append(f"--volume={host}:{guest}:{mode}")
    for key, value in env.items():
        argv.append(f"--env={key}={value}")
    argv.append(tag)
    argv.extend(entry_command)
    return argv


def local_build_script(base_image_id: str) -> str:
    """The script participants run to build the same container used by the
    evaluation jobs on their own machines."""
    return f"""#!/usr/bin/env bash
# Build the exact evaluation container locally.
# Reads extra package names from packages.txt next to this script (optional).
set -euo pipefail
cd "$(dirname "$0")"
BASE_IMAGE="{base_image_id}"
PKGS=""
if [[ -f packages.txt ]]; then
  PKGS="$(sed 's/#.*//' packages.txt | tr '\\n' ' ')"
fi
TMP_DF="$(mktemp)"
trap 'rm -f "$TMP_DF"' EXIT
{{
  echo "FROM $BASE_IMAGE"
  if [[ -n "${{PKGS// /}}" ]]; then
    echo "RUN apt-get update && apt-get install -y --no-install-recommends $PKGS && rm -rf /var/lib/apt/lists/*"
  fi
}} > "$TMP_DF"
docker build -f "$TMP_DF" -t codearena-local .
echo "Built image codearena-local; run your code with:"
echo "  docker run --rm -it -v \\"$PWD\\":/work -w /work codearena-local bash"
"""


class ContainerSandbox(SandboxBackend):
    name = "container"

    def __init__(self, workdir: "Path | str", runtime: Optional[str] = None):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.runtime = runtime or find_runtime()
        if self.runtime is None:
            raise BackendUnavailable("no container runtime (docker/podman) on PATH")
        self._built: set[str] = set()
        self._build_lock = threading.Lock()

    def build_environment(self, spec: EnvironmentSpec) -> EnvironmentHandle:
        validate_packages(spec.extra_packages)
        tag = image_tag(spec)
        with self._build_lock:
            if tag not in self._built:
                with tempfile.TemporaryDirectory(dir=self.workdir) as ctx:
                    dockerfile = Path(ctx) / "Dockerfile"
                    dockerfile.write_text(build_dockerfile(spec), "utf-8")
                    proc = subprocess.run(
                        [self.runtime, "build", "-t", tag, "-f", str(dockerfile), ctx],
                        capture_output=True,
                        text=True,
                    )
                if proc.returncode != 0:
                    raise PackageInstallFailed(proc.stderr[-4000:])
                self._built.add(tag)
        return EnvironmentHandle(spec, {}, token=tag)

    def run_stage(
        self,
        env: EnvironmentHandle,
        worktree_root: Path,
        entry_command: Sequence[str],
        limits: RunLimits,
        instance_input: Optional[Mapping[str, bytes]] = None,
        aux_input_dir: Optional[Path] = None,
        instance_id: Optional[str] = None,
        scope: str = "n/a",
        cancel_event: Optional[threading.Event] = None,
    ) -> RunResult:
        scratch = Path(tempfile.mkdtemp(prefix="crun-", dir=self.workdir))
        work = scratch / "work"
        input_dir = scratch / "input"
        output_dir = scratch / "output"
        logs = scratch / "logs"
        for d in (input_dir, output_dir, logs):
            d.mkdir(parents=True)
        shutil.copytree(worktree_root, work, symlinks=False)
        for rel, data in (instance_input or {}).items():
            target = input_dir / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        if aux_input_dir is not None and Path(aux_input_dir).exists():
            shutil.copytree(aux_input_dir, input_dir / "precomputed", dirs_exist_ok=True)

        mounts = [
            (str(work), "/work", "rw"),
            (str(input_dir), "/input", "ro"),
            (str(output_dir), "/output", "rw"),
        ]
        run_env = {
            "ARENA_INPUT_DIR": "/input",
            "ARENA_OUTPUT_DIR": "/output",
            "ARENA_PRECOMP_DIR": "/input/precomputed",
            "ARENA_INSTANCE_ID": instance_id or "",
            "ARENA_SCOPE": scope,
        }
        argv = run_argv(self.runtime, env.token, limits, mounts, "/work", run_env, entry_command)

        start = time.monotonic()
        try:
            proc = subprocess.Popen(
                argv,
                stdout=open(logs / "stdout.txt", "wb"),
                stderr=open(logs / "stderr.txt", "wb"),
            )
        except OSError as exc:
            shutil.rmtree(scratch, ignore_errors=True)
            raise SandboxStartFailure(str(exc)) from exc

        killed_kind: Optional[ExitKind] = None
        while True:
            if cancel_event is not None and cancel_event.is_set():
                killed_kind = ExitKind.TIME_LIMIT
                proc.kill()
                break
            if time.monotonic() - start > limits.wall_seconds:
                killed_kind = ExitKind.TIME_LIMIT
                proc.kill()
                break
            try:
                proc.wait(timeout=0.05)
                break
            except subprocess.TimeoutExpired:
                continue
        exit_code = proc.wait()
        wall = time.monotonic() - start

        if killed_kind is not None:
            kind, code = killed_kind, None
        elif exit_code == 0:
            kind, code = ExitKind.OK, 0
        elif exit_code == 137:  # cgroup OOM kill surfaces as SIGKILL
            kind, code = ExitKind.MEMORY_LIMIT, None
        else:
            kind, code = ExitKind.NONZERO_EXIT, exit_code

        artifacts = []
        for p in sorted(output_dir.rglob("*")):
            if p.is_file():
                artifacts.append(
                    ArtifactFile(p.relative_to(output_dir).as_posix(), p.stat().st_size, p)
                )

        return RunResult(
            exit_kind=kind,
            exit_code=code,
            wall_time=wall,
            peak_memory=0,  # cgroup peak not sampled; the runtime enforced the cap
            stdout_path=logs / "stdout.txt",
            stderr_path=logs / "stderr.txt",
            artifacts=tuple(artifacts),
            scratch_dir=scratch,
        )
