"""Organiser operations: competition setup, subaccount limit grants,
post-competition export archives, and the archive-and-reset cycle for
periodically held competitions. Used by both the CLI and the /admin API."""

from __future__ import annotations

import json
import uuid
from pathlib import Path
from typing import Any, Mapping, Sequence

from .domain import Competition, Submission, UserProfile
from .gitgateway import GitGateway, GitGatewayError, RepoRef
from .leaderboard import aggregate, board_export, rank
from .store import CollectionName, DocumentStore


class AdminError(Exception):
    pass


class ExportIncomplete(AdminError):
    """Some evaluated commits could not be checked out; nothing is silently
    skipped."""

    def __init__(self, missing: Sequence[tuple[str, str]]):
        detail = ", ".join(f"{sid} ({reason})" for sid, reason in missing)
        super().__init__(f"export incomplete: {detail}")
        self.missing = list(missing)


def create_competition(store: DocumentStore, spec: Mapping[str, Any]) -> Competition:
    body = dict(spec)
    body.setdefault("competition_id", uuid.uuid4().hex)
    competition = Competition.from_doc(body)
    store.put_document(
        CollectionName.COMPETITIONS, competition.to_doc(), doc_id=competition.competition_id
    )
    return competition


def grant_subaccount_limit(
    store: DocumentStore, username: str, competition_id: str, limit: int
) -> UserProfile:
    if limit < 1:
        raise AdminError("limit must be >= 1")
    docs = store.query(CollectionName.USERS, {"username": username})
    if not docs:
        raise AdminError(f"no user {username!r}")
    doc = docs[0]
    user = UserProfile.from_doc(doc.body)
    limits = dict(user.subaccount_limits)
    limits[competition_id] = limit
    body = {**doc.body, "subaccount_limits": limits}
    store.put_document(CollectionName.USERS, body, doc_id=doc.id, expected_version=doc.version)
    return UserProfile.from_doc(body)


def evaluated_submissions(store: DocumentStore, competition_id: str) -> list[Submission]:
    docs = store.query(
        CollectionName.SUBMISSIONS,
        {"competition_id": competition_id, "commit_hash": {"$ne": ""}},
        sort=[("submit_time", "asc")],
    )
    return [Submission.from_doc(d.body) for d in docs]


def export_archive(
    store: DocumentStore,
    gateway: GitGateway,
    competition_id: str,
    dest: "Path | str",
) -> dict:
    """Bundle every evaluated submission's exact code tree plus its metric
    records and final board snapshots into a directory with a manifest."""
    comp_doc = store.get_document(CollectionName.COMPETITIONS, competition_id)
    if comp_doc is None:
        raise AdminError(f"no competition {competition_id}")
    competition = Competition.from_doc(comp_doc.body)
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)

    submissions = evaluated_submissions(store, competition_id)
    manifest: dict[str, Any] = {
        "competition_id": competition_id,
        "competition_name": competition.name,
        "submissions": [],
    }
    missing: list[tuple[str, str]] = []
    for sub in submissions:
        acct_doc = store.get_document(CollectionName.SUBACCOUNTS, sub.subaccount_id)
        entry = {
            "submission_id": sub.submission_id,
            "subaccount_id": sub.subaccount_id,
            "commit_hash": sub.commit_hash,
            "submit_time": sub.submit_time,
            "status": sub.status.value,
            "recorded_digest": sub.worktree_digest,
        }
        sub_dir = dest / sub.submission_id
        try:
            if acct_doc is None:
                raise GitGatewayError("subaccount record missing")
            repo = RepoRef(
                acct_doc.body.get("repo_url", ""), gateway.provider.kind, sub.subaccount_id
            )
            tree = gateway.checkout_commit(repo, sub.commit_hash, dest=sub_dir / "code")
        except GitGatewayError as exc:
            missing.append((sub.submission_id, str(exc)))
            continue
        entry["exported_digest"] = tree.manifest_digest
        sub_dir.mkdir(parents=True, exist_ok=True)
        (sub_dir / "metrics.json").write_text(
            json.dumps([m.to_doc() for m in sub.metric_records], indent=1), "utf-8"
        )
        manifest["submissions"].append(entry)

    if missing:
        raise ExportIncomplete(missing)

    subaccounts = {
        d.body["subaccount_id"]: d.body
        for d in store.query(CollectionName.SUBACCOUNTS, {"competition_id": competition_id})
    }
    from .domain import Subaccount

    accounts = {k: Subaccount.from_doc(v) for k, v in subaccounts.items()}
    all_subs = [
        Submission.from_doc(d.body)
        for d in store.query(CollectionName.SUBMISSIONS, {"competition_id": competition_id})
    ]
    boards = {}
    entries = aggregate(all_subs, accounts, competition.metric_schema, competition.selection_policy)
    for category in competition.categories:
        board = rank(entries, category, (), competition.metric_schema)
        boards[category.category_name] = board_export(board)
    (dest / "boards.json").write_text(json.dumps(boards, indent=1), "utf-8")
    manifest["boards"] = sorted(boards)
    (dest / "manifest.json").write_text(json.dumps(manifest, indent=1), "utf-8")
    return manifest


def archive_and_reset(
    store: DocumentStore,
    gateway: GitGateway,
    competition_id: str,
    archive_root: "Path | str",
) -> Path:
    """Snapshot the competition into an archive directory, then clear its
    submissions, subaccounts and repositories."""
    archive_root = Path(archive_root)
    dest = archive_root / competition_id
    export_archive(store, gateway, competition_id, dest)

    for doc in store.query(CollectionName.SUBMISSIONS, {"competition_id": competition_id}):
        store.delete_document(CollectionName.SUBMISSIONS, doc.id)
    for doc in store.query(CollectionName.SUBACCOUNTS, {"competition_id": competition_id}):
        store.delete_document(CollectionName.SUBACCOUNTS, doc.id)
        provider = gateway.provider
        if hasattr(provider, "delete_repo"):
            provider.delete_repo(doc.body["subaccount_id"])
    return dest
