"""Wires the whole platform together from one config: embedded store, git
provider, scheduler + worker pool, sandbox backend, evaluation server and
session signing. The API layer and the CLI both run on top of this."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

from .auth import TokenSigner
from .clock import Clock
from .config import AppConfig
from .gitgateway import GitGateway, GitSmartHTTP, LocalBareProvider
from .objectstore import LocalObjectStore
from .pipeline import EvaluationServer
from .sandbox import get_backend
from .scheduler import ResourceVector, Scheduler, WorkerCapability
from .store import CollectionName, DocumentStore
from .workers import JobExecutor, PoolManager, StubWorkerPool


class Platform:
    def __init__(self, config: AppConfig, clock: Optional[Clock] = None):
        self.config = config
        self.clock = clock or Clock()
        storage = config.storage
        Path(storage.root).mkdir(parents=True, exist_ok=True)

        self.store = DocumentStore(storage.store_dir, fsync=storage.fsync)
        self.objects = LocalObjectStore(storage.objects_dir)
        self.git_provider = LocalBareProvider(storage.git_dir)
        self.gateway = GitGateway(self.git_provider, storage.scratch_dir / "checkouts")

        sched = config.scheduler
        self.scheduler = Scheduler(
            clock=self.clock,
            policy=sched.pool_policy(),
            heartbeat_timeout=sched.heartbeat_timeout,
            kill_grace=sched.kill_grace,
            max_retries=sched.max_retries,
        )

        backend_kwargs = {"workdir": storage.scratch_dir / "sandbox"}
        if config.sandbox.backend == "process":
            backend_kwargs["base_env_id"] = config.sandbox.base_image
        self.sandbox = get_backend(config.sandbox.backend, **backend_kwargs)
        self.executor = JobExecutor(self.sandbox, self.objects)

        cpu = sched.worker_cpu_cores or float(os.cpu_count() or 1)
        capacity = ResourceVector(cpu, sched.worker_memory_bytes, sched.worker_disk_bytes)
        self.pool = StubWorkerPool(self.scheduler, self.executor, capacity)
        self.pool_manager = PoolManager(
            self.scheduler, self.pool, interval=sched.pool_interval, clock=self.clock
        )

        self.evaluation = EvaluationServer(
            self.store,
            self.gateway,
            self.scheduler,
            self.objects,
            base_image_id=config.sandbox.base_image,
            package_allow_list=config.sandbox.package_allow_list,
            worktree_root=storage.scratch_dir / "worktrees",
            clock=self.clock,
        )

        self.tokens = TokenSigner(config.auth.secret, config.auth.token_ttl)
        self.git_http = GitSmartHTTP(self.git_provider, self._git_auth)
        self._started = False

    # push and fetch both require the repo owner's credentials (or organiser)
    def _git_auth(self, username: str, password: str, repo_name: str, service: str) -> bool:
        from .auth import verify_credential
        from .domain import Role, UserProfile

        if not username:
            return False
        docs = self.store.query(CollectionName.USERS, {"username": username})
        if not docs:
            return False
        user = UserProfile.from_doc(docs[0].body)
        if not verify_credential(password, user.credential):
            return False
        if user.role == Role.ORGANISER:
            return True
        acct = self.store.get_document(CollectionName.SUBACCOUNTS, repo_name)
        return acct is not None and acct.body.get("user_id") == user.user_id

    def start(self) -> "Platform":
        if self._started:
            return self
        self._started = True
        for _ in range(self.config.scheduler.benchmark_hosts):
            self.pool.start_worker(WorkerCapability.BENCHMARK_HOST)
        self.pool_manager.start()
        self.evaluation.start()
        return self

    def stop(self) -> None:
        if not self._started:
            return
        self._started = False
        self.evaluation.stop()
        self.pool_manager.stop()
        self.pool.stop_all()
        self.store.close()
