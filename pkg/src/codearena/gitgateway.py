"""Git submission gateway.

One repository per subaccount. Participants push code; evaluations pin the
head commit hash and can recreate that exact tree forever after, which is
what makes post-competition archives possible. Organiser-controlled
protected files are forcibly overwritten into every worktree before
execution.

Two providers: local_bare hosts bare repositories on this node and serves
them over the git smart-HTTP protocol (see GitSmartHTTP); external adapts a
remote hosting service through the RepoProvider contract
(create_repo / grant_push / clone_url).
"""

from __future__ import annotations

import hashlib
import io
import json
import shutil
import subprocess
import tarfile
import tempfile
import threading
import zlib
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import Callable, Mapping, Optional, Sequence


class GitGatewayError(Exception):
    pass


class AlreadyProvisioned(GitGatewayError):
    pass


class ProviderUnavailable(GitGatewayError):
    pass


class RepoUnreachable(GitGatewayError):
    pass


class EmptyRepository(GitGatewayError):
    pass


class BranchMissing(GitGatewayError):
    pass


class UnknownCommit(GitGatewayError):
    pass


class PathTraversalRejected(GitGatewayError):
    pass


class RepoProviderKind(str, Enum):
    LOCAL_BARE = "local_bare"
    EXTERNAL = "external"


@dataclass(frozen=True)
class RepoRef:
    repo_url: str
    provider: RepoProviderKind
    subaccount_id: str


@dataclass(frozen=True)
class Worktree:
    root_path: Path
    commit_hash: str
    file_manifest: tuple[tuple[str, str], ...]  # (relative posix path, sha256 hex)

    @property
    def manifest_digest(self) -> str:
        h = hashlib.sha256()
        for path, digest in sorted(self.file_manifest):
            h.update(path.encode("utf-8") + b"\0" + digest.encode("ascii") + b"\n")
        return h.hexdigest()


def _run_git(args: Sequence[str], cwd: Optional[Path] = None, input: Optional[bytes] = None):
    proc = subprocess.run(
        ["git", *args],
        cwd=cwd,
        input=input,
        capture_output=True,
        env={
            "PATH": "/usr/bin:/bin:/usr/local/bin",
            "GIT_CONFIG_NOSYSTEM": "1",
            "HOME": tempfile.gettempdir(),
        },
    )
    return proc


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(root: Path) -> tuple[tuple[str, str], ...]:
    entries = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and not p.is_symlink():
            rel = p.relative_to(root).as_posix()
            entries.append((rel, file_sha256(p)))
    return tuple(entries)


def validate_overlay_path(rel: str) -> PurePosixPath:
    pure = PurePosixPath(rel)
    if pure.is_absolute() or not pure.parts:
        raise PathTraversalRejected(f"overlay path must be relative: {rel!r}")
    if any(part in ("..", "") for part in pure.parts) or "\\" in rel:
        raise PathTraversalRejected(f"overlay path escapes the worktree: {rel!r}")
    return pure


def apply_protected_overlay(
    tree: Worktree, overlay: Sequence[tuple[str, str]]
) -> Worktree:
    """Overwrite every overlay path with its canonical content, whether or
    not the participant shipped or modified it. Idempotent."""
    if not overlay:
        return tree
    manifest = dict(tree.file_manifest)
    for rel, content in overlay:
        pure = validate_overlay_path(rel)
        target = tree.root_path / pure
        target.parent.mkdir(parents=True, exist_ok=True)
        data = content.encode("utf-8")
        target.write_bytes(data)
        manifest[pure.as_posix()] = hashlib.sha256(data).hexdigest()
    return replace(tree, file_manifest=tuple(sorted(manifest.items())))


class RepoProvider:
    """Hosting adapter contract: create a repository, grant push access,
    expose a clone URL."""

    kind: RepoProviderKind

    def create_repo(self, name: str) -> str:
        raise NotImplementedError

    def grant_push(self, name: str, user_id: str) -> None:
        raise NotImplementedError

    def clone_url(self, name: str) -> str:
        raise NotImplementedError

    def git_dir(self, name: str) -> Path:
        """Local directory holding the repository's objects (the repo itself
        for local_bare, a mirror cache for external providers)."""
        raise NotImplementedError

    def refresh(self, name: str) -> None:
        """Bring the local objects up to date with the remote (no-op for
        local_bare)."""


class LocalBareProvider(RepoProvider):
    """Bare repositories hosted by the platform itself, under one root
    directory, addressable as <url_base>/<name>.git over smart HTTP."""

    kind = RepoProviderKind.LOCAL_BARE

    def __init__(self, root: "Path | str", url_base: str = "/git"):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.url_base = url_base.rstrip("/")
        self._acl_path = self.root / "push-grants.json"
        self._acl_lock = threading.Lock()

    def repo_path(self, name: str) -> Path:
        if "/" in name or name.startswith("."):
            raise ProviderUnavailable(f"bad repository name {name!r}")
        return self.root / f"{name}.git"

    def create_repo(self, name: str) -> str:
        path = self.repo_path(name)
        if path.exists():
            raise AlreadyProvisioned(f"repository {name} already exists")
        proc = _run_git(["init", "--bare", "--initial-branch=main", str(path)])
        if proc.returncode != 0:
            raise ProviderUnavailable(proc.stderr.decode(errors="replace"))
        # pushes arrive through our authenticated smart-HTTP front end
        _run_git(["-C", str(path), "config", "http.receivepack", "true"])
        return self.clone_url(name)

    def grant_push(self, name: str, user_id: str) -> None:
        with self._acl_lock:
            acl = {}
            if self._acl_path.exists():
                acl = json.loads(self._acl_path.read_text("utf-8"))
            users = set(acl.get(name, []))
            users.add(user_id)
            acl[name] = sorted(users)
            self._acl_path.write_text(json.dumps(acl, indent=1), "utf-8")

    def can_push(self, name: str, user_id: str) -> bool:
        with self._acl_lock:
            if not self._acl_path.exists():
                return False
            acl = json.loads(self._acl_path.read_text("utf-8"))
        return user_id in acl.get(name, [])

    def clone_url(self, name: str) -> str:
        return f"{self.url_base}/{name}.git"

    def git_dir(self, name: str) -> Path:
        path = self.repo_path(name)
        if not path.exists():
            raise RepoUnreachable(f"repository {name} not provisioned")
        return path

    def refresh(self, name: str) -> None:
        pass

    def delete_repo(self, name: str) -> None:
        path = self.repo_path(name)
        if path.exists():
            shutil.rmtree(path)


class ExternalProvider(RepoProvider):
    """Adapter for a remote hosting service. Repository creation and access
    grants go through the service's API (supplied callables); fetches use a
    local mirror cache."""

    kind = RepoProviderKind.EXTERNAL

    def __init__(
        self,
        cache_root: "Path | str",
        create_remote: Callable[[str], str],
        grant_remote: Callable[[str, str], None],
    ):
        self.cache_root = Path(cache_root)
        self.cache_root.mkdir(parents=True, exist_ok=True)
        self._create_remote = create_remote
        self._grant_remote = grant_remote
        self._urls: dict[str, str] = {}

    def create_repo(self, name: str) -> str:
        url = self._create_remote(name)
        self._urls[name] = url
        return url

    def grant_push(self, name: str, user_id: str) -> None:
        self._grant_remote(name, user_id)

    def clone_url(self, name: str) -> str:
        try:
            return self._urls[name]
        except KeyError:
            raise RepoUnreachable(f"unknown repository {name}") from None

    def git_dir(self, name: str) -> Path:
        return self.cache_root / f"{name}.git"

    def refresh(self, name: str) -> None:
        mirror = self.git_dir(name)
        if not mirror.exists():
            proc = _run_git(["clone", "--mirror", self.clone_url(name), str(mirror)])
        else:
            proc = _run_git(["-C", str(mirror), "remote", "update", "--prune"])
        if proc.returncode != 0:
            raise RepoUnreachable(proc.stderr.decode(errors="replace"))


class GitGateway:
    """Provision, fetch, pin and reproduce participant code."""

    def __init__(self, provider: RepoProvider, scratch_root: "Path | str"):
        self.provider = provider
        self.scratch_root = Path(scratch_root)
        self.scratch_root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _repo_lock(self, name: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(name, threading.Lock())

    def provision_repository(
        self, subaccount_id: str, user_id: str, template: Optional[Mapping[str, str]] = None
    ) -> RepoRef:
        """Create the subaccount's repository (optionally seeded with starter
        content), grant the owner push access, return its reference."""
        with self._repo_lock(subaccount_id):
            url = self.provider.create_repo(subaccount_id)
            self.provider.grant_push(subaccount_id, user_id)
            if template:
                self._push_template(subaccount_id, template)
            return RepoRef(url, self.provider.kind, subaccount_id)

    def _push_template(self, name: str, template: Mapping[str, str]) -> None:
        git_dir = self.provider.git_dir(name)
        with tempfile.TemporaryDirectory(dir=self.scratch_root) as tmp:
            work = Path(tmp) / "seed"
            _run_git(["clone", str(git_dir), str(work)])
            for rel, content in template.items():
                target = work / validate_overlay_path(rel)
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_text(content, "utf-8")
            for args in (
                ["-C", str(work), "add", "-A"],
                ["-C", str(work), "-c", "user.name=organiser", "-c", "user.email=organiser@localhost", "commit", "-m", "Starter template"],
                ["-C", str(work), "push", "origin", "HEAD:main"],
            ):
                proc = _run_git(args)
                if proc.returncode != 0:
                    raise ProviderUnavailable(proc.stderr.decode(errors="replace"))

    def default_branch(self, repo: RepoRef) -> str:
        git_dir = self.provider.git_dir(repo.subaccount_id)
        proc = _run_git(["-C", str(git_dir), "symbolic-ref", "--short", "HEAD"])
        if proc.returncode != 0:
            raise RepoUnreachable(proc.stderr.decode(errors="replace"))
        return proc.stdout.decode().strip()

    def fetch_at_head(
        self, repo: RepoRef, branch: Optional[str] = None, dest: Optional[Path] = None
    ) -> tuple[str, Worktree]:
        """Resolve the branch head and materialise exactly that tree.

        Only the default branch is accepted unless one is named; submitting
        from other branches is rejected upstream.
        """
        with self._repo_lock(repo.subaccount_id):
            self.provider.refresh(repo.subaccount_id)
            git_dir = self.provider.git_dir(repo.subaccount_id)
            branch = branch or self.default_branch(repo)
            proc = _run_git(["-C", str(git_dir), "rev-parse", "--verify", f"refs/heads/{branch}"])
            if proc.returncode != 0:
                # distinguish empty repository from a missing branch
                heads = _run_git(["-C", str(git_dir), "for-each-ref", "refs/heads"])
                if not heads.stdout.strip():
                    raise EmptyRepository(f"repository {repo.subaccount_id} has no commits")
                raise BranchMissing(f"branch {branch!r} not found")
            commit = proc.stdout.decode().strip()
            return commit, self._materialise(repo, git_dir, commit, dest)

    def checkout_commit(
        self, repo: RepoRef, commit_hash: str, dest: Optional[Path] = None
    ) -> Worktree:
        """Recreate the tree at a recorded commit, regardless of later pushes."""
        with self._repo_lock(repo.subaccount_id):
            self.provider.refresh(repo.subaccount_id)
            git_dir = self.provider.git_dir(repo.subaccount_id)
            proc = _run_git(["-C", str(git_dir), "cat-file", "-e", f"{commit_hash}^{{commit}}"])
            if proc.returncode != 0:
                raise UnknownCommit(commit_hash)
            return self._materialise(repo, git_dir, commit_hash, dest)

    def _materialise(
        self, repo: RepoRef, git_dir: Path, commit: str, dest: Optional[Path]
    ) -> Worktree:
        if dest is None:
            dest = Path(tempfile.mkdtemp(prefix=f"wt-{repo.subaccount_id[:8]}-", dir=self.scratch_root))
        else:
            dest.mkdir(parents=True, exist_ok=True)
        proc = _run_git(["-C", str(git_dir), "archive", "--format=tar", commit])
        if proc.returncode != 0:
            raise RepoUnreachable(proc.stderr.decode(errors="replace"))
        with tarfile.open(fileobj=io.BytesIO(proc.stdout)) as tar:
            for member in tar.getmembers():
                validate_overlay_path(member.name) if member.name != "." else None
            tar.extractall(dest)
        return Worktree(dest, commit, build_manifest(dest))


# --- smart-HTTP front end -------------------------------------------------

_GIT_SERVICES = ("git-upload-pack", "git-receive-pack")


class GitSmartHTTP:
    """WSGI app serving local bare repositories over the standard git
    smart-HTTP wire protocol by delegating to `git http-backend`.

    authenticate(username, password, repo_name, service) decides access;
    service is git-upload-pack (fetch) or git-receive-pack (push).
    """

    def __init__(
        self,
        provider: LocalBareProvider,
        authenticate: Callable[[str, str, str, str], bool],
    ):
        self.provider = provider
        self.authenticate = authenticate
        self.backend = shutil.which("git-http-backend") or "/usr/lib/git-core/git-http-backend"

    def _service_for(self, path_info: str, query: str) -> Optional[tuple[str, str]]:
        parts = path_info.lstrip("/").split("/")
        if not parts or not parts[0].endswith(".git"):
            return None
        repo = parts[0][: -len(".git")]
        tail = "/".join(parts[1:])
        if tail == "info/refs":
            for pair in query.split("&"):
                if pair.startswith("service="):
                    svc = pair.split("=", 1)[1]
                    if svc in _GIT_SERVICES:
                        return repo, svc
            return repo, "git-upload-pack"  # dumb protocol probe: treat as fetch
        if tail in _GIT_SERVICES:
            return repo, tail
        return None

    def __call__(self, environ, start_response):
        import base64

        path_info = environ.get("PATH_INFO", "")
        query = environ.get("QUERY_STRING", "")
        parsed = self._service_for(path_info, query)
        if parsed is None:
            start_response("404 Not Found", [("Content-Type", "text/plain")])
            return [b"not a git endpoint\n"]
        repo, service = parsed

        auth_header = environ.get("HTTP_AUTHORIZATION", "")
        username = password = ""
        if auth_header.startswith("Basic "):
            try:
                decoded = base64.b64decode(auth_header[6:]).decode("utf-8")
                username, _, password = decoded.partition(":")
            except Exception:
                pass
        if not self.authenticate(username, password, repo, service):
            start_response(
                "401 Unauthorized",
                [("WWW-Authenticate", 'Basic realm="codearena git"'), ("Content-Type", "text/plain")],
            )
            return [b"authentication required\n"]

        try:
            self.provider.git_dir(repo)
        except RepoUnreachable:
            start_response("404 Not Found", [("Content-Type", "text/plain")])
            return [b"no such repository\n"]

        body = environ["wsgi.input"].read()
        if environ.get("HTTP_CONTENT_ENCODING", "") == "gzip":
            body = zlib.decompress(body, zlib.MAX_WBITS | 16)

        cgi_env = {
            "GIT_PROJECT_ROOT": str(self.provider.root),
            "GIT_HTTP_EXPORT_ALL": "1",
            "PATH_INFO": path_info,
            "REQUEST_METHOD": environ["REQUEST_METHOD"],
            "QUERY_STRING": query,
            "CONTENT_TYPE": environ.get("CONTENT_TYPE", ""),
            "CONTENT_LENGTH": str(len(body)),
            "REMOTE_USER": username,
            "REMOTE_ADDR": environ.get("REMOTE_ADDR", "127.0.0.1"),
            "PATH": "/usr/bin:/bin:/usr/local/bin",
        }
        proc = subprocess.run([self.backend], input=body, env=cgi_env, capture_output=True)
        raw = proc.stdout
        header_blob, _, payload = raw.partition(b"\r\n\r\n")
        status = "200 OK"
        headers = []
        for line in header_blob.decode("latin-1").split("\r\n"):
            if not line:
                continue
            name, _, value = line.partition(":")
            value = value.strip()
            if name.lower() == "status":
                status = value
            else:
                headers.append((name, value))
        start_response(status, headers)
        return [payload]
