"""Sandboxed execution of evaluation stages.

One run = one organiser-defined command executed against a participant
worktree under enforced CPU, memory, disk, wall-clock and network limits,
with stdout/stderr capture and artifact collection.

Two interchangeable backends:

* process  -- plain OS processes with resource controls (rlimits, affinity,
              network namespaces, a polling watchdog). Needs no privileged
              infrastructure; used by CI and desk-scale deployments.
* container -- an OCI runtime (docker/podman) invoked as a subprocess; the
              production path.

Participants declare extra packages in a ``packages.txt`` manifest at the
repository root (one name per line, ``#`` comments). Installation happens at
environment build time, never during a run, and built environments are
cached by content digest.
"""

from __future__ import annotations

import hashlib
import re
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

from ..domain import ExitKind
from ..objectstore import ObjectStore, StoreUnavailable

PACKAGE_NAME_RE = re.compile(r"^[a-z0-9][a-z0-9+.-]*$")

STDIO_CAP_BYTES = 10 * 1024 * 1024  # per stream; truncation is flagged

DEPENDENCY_MANIFEST = "packages.txt"


class SandboxError(Exception):
    pass


class PackageRejected(SandboxError):
    pass


class PackageInstallFailed(SandboxError):
    pass


class BackendUnavailable(SandboxError):
    pass


class SandboxStartFailure(SandboxError):
    pass


@dataclass(frozen=True)
class EnvironmentSpec:
    base_image_id: str
    extra_packages: tuple[str, ...] = ()

    @property
    def env_digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.base_image_id.encode("utf-8"))
        for name in sorted(self.extra_packages):
            h.update(b"\0" + name.encode("utf-8"))
        return h.hexdigest()


def validate_packages(
    packages: Sequence[str], allow_list: Optional[Sequence[str]] = None
) -> tuple[str, ...]:
    allowed = set(allow_list) if allow_list is not None else None
    for name in packages:
        if not PACKAGE_NAME_RE.match(name):
            raise PackageRejected(f"bad package name {name!r}")
        if allowed is not None and name not in allowed:
            raise PackageRejected(f"package {name!r} not in the allow-list")
    return tuple(packages)


def parse_dependency_manifest(text: str) -> tuple[str, ...]:
    """Parse the participant-facing ``packages.txt``: one package name per
    line, blank lines and '#' comments ignored."""
    names = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return tuple(names)


@dataclass(frozen=True)
class RunLimits:
    cpu_cores: float
    memory_bytes: int
    disk_bytes: int
    wall_seconds: float
    network_allowed: bool = False

    def __post_init__(self):
        for name in ("cpu_cores", "memory_bytes", "disk_bytes", "wall_seconds"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ArtifactFile:
    rel_path: str
    size: int
    local_path: Path


@dataclass(frozen=True)
class RunResult:
    exit_kind: ExitKind
    exit_code: Optional[int]
    wall_time: float
    peak_memory: int
    stdout_path: Path
    stderr_path: Path
    stdout_truncated: bool = False
    stderr_truncated: bool = False
    artifacts: tuple[ArtifactFile, ...] = ()
    scratch_dir: Optional[Path] = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.exit_kind == ExitKind.OK


@dataclass(frozen=True)
class CollectedRun:
    artifact_keys: tuple[str, ...]
    stdout_key: str
    stderr_key: str


class EnvironmentHandle:
    """Opaque built-environment token. Carries whatever the backend needs to
    launch runs (venv path for the process backend, image tag for the
    container backend)."""

    def __init__(self, spec: EnvironmentSpec, launch_env: Mapping[str, str], token: str):
        self.spec = spec
        self.env_digest = spec.env_digest
        self.launch_env = dict(launch_env)
        self.token = token


class SandboxBackend:
    name: str

    def build_environment(self, spec: EnvironmentSpec) -> EnvironmentHandle:
        raise NotImplementedError

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
        cancel_event=None,
    ) -> RunResult:
        raise NotImplementedError


def collect_artifacts(result: RunResult, store: ObjectStore, key_prefix: str) -> CollectedRun:
    """Upload the run's declared artifacts plus captured stdout/stderr under
    key_prefix, then delete the scratch directory. Raises StoreUnavailable
    without deleting anything, so the caller can retry."""
    prefix = key_prefix.strip("/")
    artifact_keys = []
    for art in result.artifacts:
        key = f"{prefix}/{art.rel_path}"
        store.put_file(key, art.local_path)
        artifact_keys.append(key)
    stdout_key = store.put_file(f"{prefix}/logs/stdout.txt", result.stdout_path)
    stderr_key = store.put_file(f"{prefix}/logs/stderr.txt", result.stderr_path)
    if result.scratch_dir is not None:
        shutil.rmtree(result.scratch_dir, ignore_errors=True)
    return CollectedRun(tuple(artifact_keys), stdout_key, stderr_key)


def get_backend(name: str, **kwargs) -> SandboxBackend:
    if name == "process":
        from .process_backend import ProcessSandbox

        return ProcessSandbox(**kwargs)
    if name == "container":
        from .container_backend import ContainerSandbox

        return ContainerSandbox(**kwargs)
    raise BackendUnavailable(f"unknown sandbox backend {name!r}")
