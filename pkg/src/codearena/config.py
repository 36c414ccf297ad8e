"""Deployment configuration: one YAML file, environment-variable overrides.

Every key is documented in docs/configuration.md. Overrides use
ARENA_<SECTION>_<KEY> (upper-case, e.g. ARENA_SERVER_PORT=9000).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .scheduler import (
    DEFAULT_HEARTBEAT_TIMEOUT,
    DEFAULT_KILL_GRACE,
    DEFAULT_MAX_RETRIES,
    PoolPolicy,
)

ENV_PREFIX = "ARENA"


@dataclass(frozen=True)
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8080


@dataclass(frozen=True)
class StorageConfig:
    root: str = "./data"
    fsync: bool = True

    @property
    def store_dir(self) -> Path:
        return Path(self.root) / "store"

    @property
    def objects_dir(self) -> Path:
        return Path(self.root) / "objects"

    @property
    def git_dir(self) -> Path:
        return Path(self.root) / "git"

    @property
    def scratch_dir(self) -> Path:
        return Path(self.root) / "scratch"

    @property
    def archive_dir(self) -> Path:
        return Path(self.root) / "archives"


@dataclass(frozen=True)
class SandboxConfig:
    backend: str = "process"  # process | container
    base_image: str = "ubuntu:22.04"
    package_allow_list: Optional[tuple[str, ...]] = None  # None disables the allow-list


@dataclass(frozen=True)
class SchedulerConfig:
    heartbeat_timeout: float = DEFAULT_HEARTBEAT_TIMEOUT
    kill_grace: float = DEFAULT_KILL_GRACE
    max_retries: int = DEFAULT_MAX_RETRIES
    min_workers: int = 1
    max_workers: int = 4
    per_worker_parallelism: int = 2
    scale_up_threshold: float = 1.0
    scale_down_idle: float = 30.0
    benchmark_hosts: int = 1
    worker_cpu_cores: float = 0.0  # 0 = host cpu count
    worker_memory_bytes: int = 2 * 1024**3
    worker_disk_bytes: int = 4 * 1024**3
    pool_interval: float = 1.0

    def pool_policy(self) -> PoolPolicy:
        return PoolPolicy(
            min_workers=self.min_workers,
            max_workers=self.max_workers,
            per_worker_parallelism=self.per_worker_parallelism,
            scale_up_threshold=self.scale_up_threshold,
            scale_down_idle=self.scale_down_idle,
        )


@dataclass(frozen=True)
class AuthConfig:
    secret: str = "change-me"
    token_ttl: float = 12 * 3600


@dataclass(frozen=True)
class AppConfig:
    server: ServerConfig = field(default_factory=ServerConfig)
    storage: StorageConfig = field(default_factory=StorageConfig)
    sandbox: SandboxConfig = field(default_factory=SandboxConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    auth: AuthConfig = field(default_factory=AuthConfig)


def _coerce(current: Any, raw: str) -> Any:
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _apply_env(section_name: str, values: dict, defaults) -> dict:
    for key in defaults.__dataclass_fields__:
        env_key = f"{ENV_PREFIX}_{section_name}_{key}".upper()
        if env_key in os.environ:
            values[key] = _coerce(getattr(defaults, key), os.environ[env_key])
    return values


def _section(cls, name: str, data: Mapping[str, Any]):
    defaults = cls()
    values = dict(data.get(name, {}) or {})
    unknown = set(values) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {name} config keys: {sorted(unknown)}")
    values = _apply_env(name, values, defaults)
    if cls is SandboxConfig and values.get("package_allow_list") is not None:
        values["package_allow_list"] = tuple(values["package_allow_list"])
    return cls(**values)


def load_config(path: "Path | str | None" = None) -> AppConfig:
    data: Mapping[str, Any] = {}
    if path is not None:
        text = Path(path).read_text("utf-8")
        data = yaml.safe_load(text) or {}
    return AppConfig(
        server=_section(ServerConfig, "server", data),
        storage=_section(StorageConfig, "storage", data),
        sandbox=_section(SandboxConfig, "sandbox", data),
        scheduler=_section(SchedulerConfig, "scheduler", data),
        auth=_section(AuthConfig, "auth", data),
    )
