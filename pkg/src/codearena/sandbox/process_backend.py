"""Plain-process sandbox backend.

Limit enforcement without a container runtime:

* wall clock  -- watchdog thread, SIGKILL on the whole process group
* memory      -- watchdog polls the process tree's RSS and kills on exceed
                 (suits workloads that grow their footprint over time; a
                 single instantaneous over-allocation fails inside the child
                 instead and surfaces as nonzero_exit)
* disk        -- RLIMIT_FSIZE per file plus watchdog polling of the scratch
                 directory size
* cpu         -- affinity pinned to ceil(cpu_cores) cores when the host has
                 more
* network     -- the command runs in a fresh network namespace
                 (``unshare --net``) when network_allowed is false; if the
                 kernel refuses namespaces we fail the run rather than
                 pretend to isolate

Extra packages are installed into a virtualenv keyed by the environment
digest (built once, reused), and the venv's bin directory is prepended to
PATH for every run.
"""

from __future__ import annotations

import os
import resource
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
import venv
from pathlib import Path
from typing import Mapping, Optional, Sequence

import psutil

from ..domain import ExitKind
from . import (
    ArtifactFile,
    EnvironmentHandle,
    EnvironmentSpec,
    PackageInstallFailed,
    RunLimits,
    RunResult,
    SandboxBackend,
    SandboxStartFailure,
    STDIO_CAP_BYTES,
    validate_packages,
)

_POLL_SECONDS = 0.01
_DISK_POLL_EVERY = 8  # disk walks are costlier; poll every Nth tick

_unshare_argv_cache: Optional[list[str]] = None
_unshare_probed = False
_probe_lock = threading.Lock()


def network_isolation_argv() -> Optional[list[str]]:
    """Command prefix that detaches the child from the network, or None if
    this kernel/user cannot create network namespaces."""
    global _unshare_argv_cache, _unshare_probed
    with _probe_lock:
        if _unshare_probed:
            return _unshare_argv_cache
        _unshare_probed = True
        for argv in (["unshare", "--net", "--"], ["unshare", "--map-root-user", "--net", "--"]):
            try:
                proc = subprocess.run(
                    argv + ["true"], capture_output=True, timeout=10
                )
            except (OSError, subprocess.TimeoutExpired):
                continue
            if proc.returncode == 0:
                _unshare_argv_cache = argv
                break
        return _unshare_argv_cache


def _dir_size(path: Path) -> int:
    total = 0
    for base, _dirs, files in os.walk(path, onerror=lambda e: None):
        for name in files:
            try:
                total += os.lstat(os.path.join(base, name)).st_size
            except OSError:
                continue
    return total


def _tree_rss(proc: psutil.Process) -> int:
    try:
        total = proc.memory_info().rss
        for child in proc.children(recursive=True):
            try:
                total += child.memory_info().rss
            except psutil.Error:
                continue
        return total
    except psutil.Error:
        return 0


class _StreamCapture(threading.Thread):
    """Drain a pipe into a file up to the capture cap; keep draining after
    the cap so the child never blocks on a full pipe."""

    def __init__(self, pipe, dest: Path):
        super().__init__(daemon=True)
        self.pipe = pipe
        self.dest = dest
        self.truncated = False

    def run(self):
        written = 0
        with open(self.dest, "wb") as out:
            while True:
                chunk = self.pipe.read(65536)
                if not chunk:
                    break
                if written < STDIO_CAP_BYTES:
                    take = chunk[: STDIO_CAP_BYTES - written]
                    out.write(take)
                    written += len(take)
                    if len(take) < len(chunk):
                        self.truncated = True
                else:
                    self.truncated = True
        self.pipe.close()


class ProcessSandbox(SandboxBackend):
    name = "process"

    def __init__(self, workdir: "Path | str", base_env_id: str = "host", extra_path: str = ""):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.envs_root = self.workdir / "envs"
        self.envs_root.mkdir(exist_ok=True)
        self.base_env_id = base_env_id
        self.extra_path = extra_path
        self._env_cache: dict[str, EnvironmentHandle] = {}
        self._env_lock = threading.Lock()

    # -- environments -------------------------------------------------

    def build_environment(self, spec: EnvironmentSpec) -> EnvironmentHandle:
        digest = spec.env_digest
        with self._env_lock:
            cached = self._env_cache.get(digest)
            if cached is not None:
                return cached
        validate_packages(spec.extra_packages)
        path_parts = ["/usr/local/bin", "/usr/bin", "/bin"]
        if self.extra_path:
            path_parts.insert(0, self.extra_path)
        if spec.extra_packages:
            env_dir = self.envs_root / digest
            self._ensure_venv(env_dir, spec.extra_packages)
            path_parts.insert(0, str(env_dir / "bin"))
        handle = EnvironmentHandle(
            spec, {"PATH": ":".join(path_parts), "PYTHONUNBUFFERED": "1"}, token=digest
        )
        with self._env_lock:
            self._env_cache[digest] = handle
        return handle

    def _ensure_venv(self, env_dir: Path, packages: Sequence[str]) -> None:
        marker = env_dir / ".ready"
        if marker.exists():
            return
        if env_dir.exists():
            shutil.rmtree(env_dir)
        venv.create(env_dir, with_pip=True, system_site_packages=True)
        proc = subprocess.run(
            [str(env_dir / "bin" / "pip"), "install", "--quiet", *packages],
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            shutil.rmtree(env_dir, ignore_errors=True)
            raise PackageInstallFailed(
                f"pip install failed for {list(packages)}:\n{proc.stderr[-4000:]}"
            )
        marker.touch()

    # -- execution ----------------------------------------------------

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
        scratch = Path(tempfile.mkdtemp(prefix="run-", dir=self.workdir))
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

        argv = list(entry_command)
        if not limits.network_allowed:
            prefix = network_isolation_argv()
            if prefix is None:
                shutil.rmtree(scratch, ignore_errors=True)
                raise SandboxStartFailure(
                    "network isolation requested but network namespaces are unavailable"
                )
            argv = prefix + argv

        run_env = {
            "HOME": str(scratch),
            "LANG": "C.UTF-8",
            "ARENA_INPUT_DIR": str(input_dir),
            "ARENA_OUTPUT_DIR": str(output_dir),
            "ARENA_PRECOMP_DIR": str(input_dir / "precomputed"),
            "ARENA_INSTANCE_ID": instance_id or "",
            "ARENA_SCOPE": scope,
            **env.launch_env,
        }

        # the isolation wrapper would mask a missing entry point as exit 127
        target = entry_command[0]
        resolved = (
            target if "/" in target else shutil.which(target, path=run_env.get("PATH", ""))
        )
        if resolved is None or not os.access(resolved, os.X_OK):
            shutil.rmtree(scratch, ignore_errors=True)
            raise SandboxStartFailure(f"entry command not executable: {target}")

        disk_bytes = limits.disk_bytes
        cpu_set = self._cpu_set(limits.cpu_cores)

        def in_child():
            resource.setrlimit(resource.RLIMIT_CORE, (0, 0))
            resource.setrlimit(resource.RLIMIT_FSIZE, (disk_bytes, disk_bytes))
            if cpu_set is not None:
                os.sched_setaffinity(0, cpu_set)

        start = time.monotonic()
        try:
            proc = subprocess.Popen(
                argv,
                cwd=work,
                env=run_env,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                stdin=subprocess.DEVNULL,
                start_new_session=True,
                preexec_fn=in_child,
            )
        except OSError as exc:
            shutil.rmtree(scratch, ignore_errors=True)
            raise SandboxStartFailure(str(exc)) from exc

        out_cap = _StreamCapture(proc.stdout, logs / "stdout.txt")
        err_cap = _StreamCapture(proc.stderr, logs / "stderr.txt")
        out_cap.start()
        err_cap.start()

        state = {"kill_kind": None, "peak": 0, "detail": ""}
        stop = threading.Event()

        def kill_group(kind: ExitKind, detail: str):
            if state["kill_kind"] is None:
                state["kill_kind"] = kind
                state["detail"] = detail
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass

        def watchdog():
            ps = None
            try:
                ps = psutil.Process(proc.pid)
            except psutil.Error:
                pass
            tick = 0
            while not stop.is_set():
                if cancel_event is not None and cancel_event.is_set():
                    kill_group(ExitKind.TIME_LIMIT, "killed on scheduler request")
                    return
                elapsed = time.monotonic() - start
                if elapsed > limits.wall_seconds:
                    kill_group(ExitKind.TIME_LIMIT, f"wall clock {elapsed:.2f}s over limit")
                    return
                if ps is not None:
                    rss = _tree_rss(ps)
                    if rss > state["peak"]:
                        state["peak"] = rss
                    if rss > limits.memory_bytes:
                        kill_group(ExitKind.MEMORY_LIMIT, f"rss {rss} over limit")
                        return
                tick += 1
                if tick % _DISK_POLL_EVERY == 0:
                    used = _dir_size(work) + _dir_size(output_dir)
                    if used > limits.disk_bytes:
                        kill_group(ExitKind.DISK_LIMIT, f"scratch {used} bytes over limit")
                        return
                stop.wait(_POLL_SECONDS)

        dog = threading.Thread(target=watchdog, daemon=True)
        dog.start()
        exit_code = proc.wait()
        stop.set()
        dog.join(timeout=5)
        out_cap.join(timeout=5)
        err_cap.join(timeout=5)
        wall = time.monotonic() - start

        kind: ExitKind
        if state["kill_kind"] is not None:
            kind = state["kill_kind"]
            exit_code_field = None
        elif exit_code == 0:
            kind = ExitKind.OK
            exit_code_field = 0
        elif exit_code == -signal.SIGXFSZ:
            kind = ExitKind.DISK_LIMIT
            exit_code_field = None
        elif _dir_size(work) + _dir_size(output_dir) >= limits.disk_bytes:
            # rlimit turned the overflow into EFBIG inside the child
            kind = ExitKind.DISK_LIMIT
            exit_code_field = None
        else:
            kind = ExitKind.NONZERO_EXIT
            exit_code_field = exit_code

        artifacts = []
        for p in sorted(output_dir.rglob("*")):
            if p.is_file():
                rel = p.relative_to(output_dir).as_posix()
                artifacts.append(ArtifactFile(rel, p.stat().st_size, p))

        return RunResult(
            exit_kind=kind,
            exit_code=exit_code_field,
            wall_time=wall,
            peak_memory=state["peak"],
            stdout_path=logs / "stdout.txt",
            stderr_path=logs / "stderr.txt",
            stdout_truncated=out_cap.truncated,
            stderr_truncated=err_cap.truncated,
            artifacts=tuple(artifacts),
            scratch_dir=scratch,
            detail=state["detail"],
        )

    @staticmethod
    def _cpu_set(cpu_cores: float) -> Optional[set]:
        try:
            available = sorted(os.sched_getaffinity(0))
        except (AttributeError, OSError):
            return None
        want = max(1, int(-(-cpu_cores // 1)))
        if want >= len(available):
            return None
        return set(available[:want])
