#!/usr/bin/env python3
"""Record real API responses as frontend test fixtures.

Boots the backend in-process, seeds a small competition with a known Pareto
structure, and dumps selected responses into frontend/fixtures/. The UI
contract tests render from these files alone; re-run this script after any
API change and commit the diff.
"""

import json
import sys
import tempfile
from pathlib import Path

from fastapi.testclient import TestClient

from codearena.api import create_app
from codearena.auth import hash_credential
from codearena.clock import utc_iso
from codearena.config import AppConfig, AuthConfig, SchedulerConfig, StorageConfig
from codearena.domain import (
    InstanceScope,
    MetricRecord,
    Role,
    StageOutcome,
    Submission,
    SubmissionStatus,
    UserProfile,
)
from codearena.domain import ExitKind
from codearena.platform import Platform
from codearena.store import CollectionName

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

COMPETITION = {
    "competition_id": "fixture-comp",
    "name": "Fixture Grand Prix",
    "start_time": utc_iso(1_700_000_000.0),
    "end_time": utc_iso(1_900_000_000.0),
    "visibility_policy": "gppc_style",
    "stage_plan": [
        {
            "stage_name": "bench",
            "kind": "benchmark",
            "concurrency": "exclusive",
            "time_limit": 60.0,
            "cpu_limit": 1.0,
            "memory_limit": 1073741824,
            "disk_limit": 1073741824,
            "command": ["python3", "driver.py"],
            "network_allowed": False,
        }
    ],
    "debug_instances": ["d1"],
    "hidden_instances": ["h1", "h2"],
    "metric_schema": [
        {"metric_name": "runtime_seconds", "direction": "minimize", "unit": "s",
         "aggregation": "mean"},
        {"metric_name": "memory_mb", "direction": "minimize", "unit": "MB",
         "aggregation": "max"},
        {"metric_name": "solved", "direction": "maximize", "unit": "",
         "aggregation": "count_success"},
    ],
    "categories": [
        {"category_name": "fastest", "scoring_function_id": "single_metric",
         "scoring_params": {"metric": "runtime_seconds", "direction": "minimize"},
         "tie_break": ["memory_mb"]},
        {"category_name": "overall", "scoring_function_id": "success_then_metric",
         "scoring_params": {"success_metric": "solved", "metric": "runtime_seconds",
                            "direction": "minimize"},
         "tie_break": []},
    ],
}

# (runtime, memory, solved): A and B are the Pareto front on (runtime, memory);
# C is dominated by B on both
TEAMS = {
    "team-a": (1.0, 200.0, 2),
    "team-b": (2.0, 100.0, 3),
    "team-c": (3.0, 300.0, 1),
}


def plant_team(platform, acct, runtime, memory, solved, when):
    platform.store.put_document(
        CollectionName.SUBACCOUNTS,
        {
            "subaccount_id": acct,
            "user_id": f"user-{acct}",
            "competition_id": "fixture-comp",
            "display_name": acct.replace("team-", "Team ").upper(),
            "repo_url": f"/git/{acct}.git",
            "extra_data": {"optimal": acct != "team-c"},
            "active_submission_id": None,
        },
        doc_id=acct,
    )
    records = []
    for inst in ("h1", "h2"):
        records += [
            MetricRecord(inst, "runtime_seconds", runtime, InstanceScope.HIDDEN),
            MetricRecord(inst, "memory_mb", memory, InstanceScope.HIDDEN),
            MetricRecord(inst, "solved", 1.0 if solved > 1 else 0.0, InstanceScope.HIDDEN),
        ]
    records.append(MetricRecord("h1", "solved", float(solved > 0), InstanceScope.HIDDEN))
    # keep (instance, metric) unique: rebuild the solved records cleanly
    records = [r for r in records if r.metric_name != "solved"]
    for idx, inst in enumerate(("h1", "h2")):
        records.append(
            MetricRecord(inst, "solved", 1.0 if idx < solved else 0.0, InstanceScope.HIDDEN)
        )
    sub = Submission(
        submission_id=f"sub-{acct}",
        subaccount_id=acct,
        competition_id="fixture-comp",
        submit_time=utc_iso(when),
        commit_hash="c" * 40,
        status=SubmissionStatus.DONE,
        metric_records=tuple(records),
    )
    platform.store.put_document(CollectionName.SUBMISSIONS, sub.to_doc(), doc_id=sub.submission_id)


def plant_owned_submission(platform, client):
    client.post(
        "/api/v1/auth/register",
        json={"username": "owner", "email": "o@example.com", "password": "pw12345678"},
    )
    token = client.post(
        "/api/v1/auth/login", json={"username": "owner", "password": "pw12345678"}
    ).json()["token"]
    owner = {"Authorization": f"Bearer {token}"}
    me = client.get("/api/v1/users/me", headers=owner).json()
    platform.store.put_document(
        CollectionName.SUBACCOUNTS,
        {
            "subaccount_id": "team-own",
            "user_id": me["user_id"],
            "competition_id": "fixture-comp",
            "display_name": "Team Own",
            "repo_url": "/git/team-own.git",
            "extra_data": {},
            "active_submission_id": None,
        },
        doc_id="team-own",
    )
    outcomes = (
        StageOutcome(
            "bench", InstanceScope.DEBUG, ExitKind.OK, 0.4, 1024, "d1",
            stdout_ref="submissions/sub-own/bench/d1/logs/stdout.txt",
            stderr_ref="submissions/sub-own/bench/d1/logs/stderr.txt",
            artifact_refs=("submissions/sub-own/bench/d1/metrics.jsonl",),
        ),
        StageOutcome("bench", InstanceScope.HIDDEN, ExitKind.OK, 0.7, 2048, "h1"),
        StageOutcome("bench", InstanceScope.HIDDEN, ExitKind.OK, 0.9, 2048, "h2"),
    )
    base = Submission(
        submission_id="sub-own",
        subaccount_id="team-own",
        competition_id="fixture-comp",
        submit_time=utc_iso(1_800_000_000.0),
        status=SubmissionStatus.QUEUED,
        server_log="[t0] dispatched\n",
    )
    doc_id, version = platform.store.put_document(
        CollectionName.SUBMISSIONS, base.to_doc(), doc_id="sub-own"
    )

    sequence = []
    states = [
        {"status": "queued"},
        {"status": "fetching"},
        {"status": "evaluating", "commit_hash": "d" * 40,
         "server_log": "[t0] dispatched\n[t1] pinned commit\n"},
        {"status": "done", "commit_hash": "d" * 40,
         "server_log": "[t0] dispatched\n[t1] pinned commit\n[t2] evaluation complete\n",
         "stage_outcomes": [o.to_doc() for o in outcomes],
         "metric_records": [
             MetricRecord("d1", "runtime_seconds", 0.4, InstanceScope.DEBUG).to_doc(),
             MetricRecord("h1", "runtime_seconds", 0.7, InstanceScope.HIDDEN).to_doc(),
             MetricRecord("h2", "runtime_seconds", 0.9, InstanceScope.HIDDEN).to_doc(),
         ]},
    ]
    body = base.to_doc()
    for patch in states:
        body = {**body, **patch}
        doc_id, version = platform.store.put_document(
            CollectionName.SUBMISSIONS, body, doc_id="sub-own", expected_version=version
        )
        sequence.append(client.get("/api/v1/submissions/sub-own", headers=owner).json())
    return sequence


def main():
    FIXTURES.mkdir(exist_ok=True)
    tmp = tempfile.mkdtemp(prefix="fixtures-")
    config = AppConfig(
        storage=StorageConfig(root=tmp, fsync=False),
        scheduler=SchedulerConfig(),
        auth=AuthConfig(secret="fixture-secret"),
    )
    platform = Platform(config)
    client = TestClient(create_app(platform))

    org_id = "org-fixture"
    platform.store.put_document(
        CollectionName.USERS,
        UserProfile(org_id, "org", "org@example.com", hash_credential("orgpw123456"),
                    Role.ORGANISER).to_doc(),
        doc_id=org_id,
    )
    org_token = client.post(
        "/api/v1/auth/login", json={"username": "org", "password": "orgpw123456"}
    ).json()["token"]
    r = client.post(
        "/api/v1/admin/competitions",
        json=COMPETITION,
        headers={"Authorization": f"Bearer {org_token}"},
    )
    assert r.status_code == 200, r.text

    for i, (acct, (runtime, memory, solved)) in enumerate(sorted(TEAMS.items())):
        plant_team(platform, acct, runtime, memory, solved, 1_750_000_000.0 + i * 86_400)

    def dump(name, payload):
        (FIXTURES / name).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        print(f"wrote {name}")

    dump("competition.json", client.get("/api/v1/competitions/fixture-comp").json())
    dump(
        "leaderboard_fastest.json",
        client.get("/api/v1/competitions/fixture-comp/leaderboard?category=fastest").json(),
    )
    dump(
        "leaderboard_overall.json",
        client.get("/api/v1/competitions/fixture-comp/leaderboard?category=overall").json(),
    )
    dump(
        "leaderboard_fastest_undominated.json",
        client.get(
            "/api/v1/competitions/fixture-comp/leaderboard",
            params={"category": "fastest",
                    "filter": "undominated:runtime_seconds,memory_mb"},
        ).json(),
    )
    dump(
        "history_overall.json",
        client.get("/api/v1/competitions/fixture-comp/history?category=overall&points=12").json(),
    )
    dump("status_sequence.json", plant_owned_submission(platform, client))

    feed_token = client.post(
        "/api/v1/auth/login", json={"username": "owner", "password": "pw12345678"}
    ).json()["token"]
    dump(
        "feed.json",
        client.get(
            "/api/v1/competitions/fixture-comp/submissions",
            headers={"Authorization": f"Bearer {feed_token}"},
        ).json(),
    )

    platform.stop()
    platform.store.close()


if __name__ == "__main__":
    sys.exit(main())
