"""Repository provisioning, head fetch with pinning, historical checkout,
protected overlays and the smart-HTTP front end."""

import io
import random

import pytest

from codearena.gitgateway import (
    AlreadyProvisioned,
    BranchMissing,
    EmptyRepository,
    GitGateway,
    GitSmartHTTP,
    LocalBareProvider,
    PathTraversalRejected,
    RepoRef,
    RepoProviderKind,
    UnknownCommit,
    apply_protected_overlay,
)
from conftest import push_files


@pytest.fixture
def gateway(tmp_path):
    provider = LocalBareProvider(tmp_path / "repos")
    return GitGateway(provider, tmp_path / "scratch")


def provision(gateway, name="acct1", template=None):
    ref = gateway.provision_repository(name, "user1", template=template)
    return ref, gateway.provider.repo_path(name)


class TestProvisioning:
    def test_template_creates_initial_commit(self, gateway):
        ref, repo_path = provision(gateway, template={"run.sh": "#!/bin/sh\necho hi\n"})
        commit, tree = gateway.fetch_at_head(ref)
        assert len(commit) == 40
        assert dict(tree.file_manifest).keys() == {"run.sh"}

    def test_second_provision_rejected(self, gateway):
        provision(gateway, "acct1")
        with pytest.raises(AlreadyProvisioned):
            gateway.provision_repository("acct1", "user1")

    def test_two_tracks_two_distinct_repos(self, gateway):
        ref_a, path_a = provision(gateway, "track-a")
        ref_b, path_b = provision(gateway, "track-b")
        assert ref_a.repo_url != ref_b.repo_url
        assert path_a != path_b

    def test_push_grant_recorded(self, gateway):
        provision(gateway, "acct1")
        assert gateway.provider.can_push("acct1", "user1")
        assert not gateway.provider.can_push("acct1", "someone-else")


class TestFetch:
    def test_head_follows_latest_commit(self, gateway):
        ref, repo_path = provision(gateway, template={"a.txt": "A\n"})
        push_files(repo_path, {"b.txt": "B\n"})
        commit_b = push_files(repo_path, {"b.txt": "B2\n"})
        commit, tree = gateway.fetch_at_head(ref)
        assert commit == commit_b
        assert dict(tree.file_manifest).keys() == {"a.txt", "b.txt"}

    def test_empty_repo(self, gateway):
        ref, _ = provision(gateway, "empty")
        with pytest.raises(EmptyRepository):
            gateway.fetch_at_head(ref)

    def test_missing_branch(self, gateway):
        ref, _ = provision(gateway, template={"a": "1"})
        with pytest.raises(BranchMissing):
            gateway.fetch_at_head(ref, branch="release")

    def test_fetch_snapshot_isolated_from_later_pushes(self, gateway):
        ref, repo_path = provision(gateway, template={"solver.py": "print(1)\n"})
        commit1, tree1 = gateway.fetch_at_head(ref)
        digest1 = tree1.manifest_digest
        push_files(repo_path, {"solver.py": "print(2)\n"})
        commit2, tree2 = gateway.fetch_at_head(ref)
        assert commit1 != commit2
        assert tree1.manifest_digest == digest1  # first worktree untouched
        assert tree2.manifest_digest != digest1


class TestCheckout:
    def test_checkout_reproduces_fetch_time_manifest_after_pushes(self, gateway):
        ref, repo_path = provision(gateway, template={"solver.py": "v0\n"})
        commit, tree = gateway.fetch_at_head(ref)
        recorded = tree.manifest_digest
        for i in range(5):
            push_files(repo_path, {"solver.py": f"v{i + 1}\n", f"extra{i}.txt": "x\n"})
        replayed = gateway.checkout_commit(ref, commit)
        assert replayed.manifest_digest == recorded
        assert replayed.file_manifest == tree.file_manifest

    def test_checkout_deterministic(self, gateway):
        ref, _ = provision(gateway, template={"f": "content\n"})
        commit, _ = gateway.fetch_at_head(ref)
        a = gateway.checkout_commit(ref, commit)
        b = gateway.checkout_commit(ref, commit)
        assert a.manifest_digest == b.manifest_digest

    def test_unknown_commit(self, gateway):
        ref, _ = provision(gateway, template={"f": "1"})
        with pytest.raises(UnknownCommit):
            gateway.checkout_commit(ref, "f" * 40)

    def test_single_commit_repo_checkout_equals_head(self, gateway):
        ref, _ = provision(gateway, template={"only.txt": "one\n"})
        commit, tree = gateway.fetch_at_head(ref)
        assert gateway.checkout_commit(ref, commit).manifest_digest == tree.manifest_digest

    def test_random_push_fetch_interleavings_pin_exactly(self, gateway):
        rng = random.Random(11)
        ref, repo_path = provision(gateway, template={"s": "0"})
        recorded = []  # (commit, digest)
        for step in range(12):
            if rng.random() < 0.5 or not recorded:
                push_files(repo_path, {"s": f"rev {step}\n", f"f{rng.randint(0, 3)}": str(step)})
            commit, tree = gateway.fetch_at_head(ref)
            recorded.append((commit, tree.manifest_digest))
        for commit, digest in recorded:
            assert gateway.checkout_commit(ref, commit).manifest_digest == digest


class TestProtectedOverlay:
    def test_overlay_restores_canonical_content(self, gateway):
        ref, repo_path = provision(
            gateway, template={"driver.py": "canonical\n", "solver.py": "mine\n"}
        )
        push_files(repo_path, {"driver.py": "tampered!\n"})
        _, tree = gateway.fetch_at_head(ref)
        fixed = apply_protected_overlay(tree, [("driver.py", "canonical\n")])
        manifest = dict(fixed.file_manifest)
        import hashlib

        assert manifest["driver.py"] == hashlib.sha256(b"canonical\n").hexdigest()
        assert (fixed.root_path / "driver.py").read_text() == "canonical\n"

    def test_overlay_adds_missing_file(self, gateway):
        ref, _ = provision(gateway, template={"solver.py": "x\n"})
        _, tree = gateway.fetch_at_head(ref)
        fixed = apply_protected_overlay(tree, [("judge/check.sh", "exit 0\n")])
        assert (fixed.root_path / "judge" / "check.sh").exists()

    def test_traversal_rejected(self, gateway):
        ref, _ = provision(gateway, template={"a": "1"})
        _, tree = gateway.fetch_at_head(ref)
        for bad in ("../escape", "/abs/path", "a/../../b"):
            with pytest.raises(PathTraversalRejected):
                apply_protected_overlay(tree, [(bad, "x")])

    def test_empty_overlay_identity(self, gateway):
        ref, _ = provision(gateway, template={"a": "1"})
        _, tree = gateway.fetch_at_head(ref)
        assert apply_protected_overlay(tree, []) is tree

    def test_overlay_idempotent(self, gateway):
        ref, _ = provision(gateway, template={"a": "1", "d.py": "old"})
        _, tree = gateway.fetch_at_head(ref)
        once = apply_protected_overlay(tree, [("d.py", "new")])
        twice = apply_protected_overlay(once, [("d.py", "new")])
        assert once.file_manifest == twice.file_manifest


def wsgi_call(app, method, path, query="", body=b"", headers=None):
    environ = {
        "REQUEST_METHOD": method,
        "PATH_INFO": path,
        "QUERY_STRING": query,
        "CONTENT_TYPE": (headers or {}).get("Content-Type", ""),
        "wsgi.input": io.BytesIO(body),
        "REMOTE_ADDR": "127.0.0.1",
    }
    for name, value in (headers or {}).items():
        environ["HTTP_" + name.upper().replace("-", "_")] = value
    captured = {}

    def start_response(status, response_headers):
        captured["status"] = status
        captured["headers"] = dict(response_headers)

    chunks = app(environ, start_response)
    captured["body"] = b"".join(chunks)
    return captured


class TestSmartHTTP:
    def make_app(self, tmp_path, allow=True):
        provider = LocalBareProvider(tmp_path / "repos")
        gateway = GitGateway(provider, tmp_path / "scratch")
        gateway.provision_repository("acct1", "user1", template={"f": "1\n"})
        app = GitSmartHTTP(provider, lambda u, p, repo, svc: allow)
        return app

    def test_info_refs_advertises_service(self, tmp_path):
        app = self.make_app(tmp_path)
        resp = wsgi_call(
            app,
            "GET",
            "/acct1.git/info/refs",
            query="service=git-upload-pack",
            headers={"Authorization": "Basic dXNlcjpwdw=="},
        )
        assert resp["status"].startswith("200")
        assert b"git-upload-pack" in resp["body"]
        assert "application/x-git-upload-pack-advertisement" in resp["headers"].get(
            "Content-Type", ""
        )

    def test_unauthenticated_gets_401(self, tmp_path):
        app = self.make_app(tmp_path, allow=False)
        resp = wsgi_call(app, "GET", "/acct1.git/info/refs", query="service=git-upload-pack")
        assert resp["status"].startswith("401")
        assert "WWW-Authenticate" in resp["headers"]

    def test_unknown_repo_404(self, tmp_path):
        app = self.make_app(tmp_path)
        resp = wsgi_call(
            app,
            "GET",
            "/ghost.git/info/refs",
            query="service=git-upload-pack",
            headers={"Authorization": "Basic eDp5"},
        )
        assert resp["status"].startswith("404")

    def test_non_git_path_404(self, tmp_path):
        app = self.make_app(tmp_path)
        resp = wsgi_call(app, "GET", "/whatever")
        assert resp["status"].startswith("404")
