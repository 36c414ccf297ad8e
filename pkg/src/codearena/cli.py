"""Admin and operations CLI.

Organiser workflows are CLI-first: bootstrap an organiser account, create
competitions from a YAML spec, grant subaccount limits, export archives,
archive-and-reset, and dump leaderboards as JSON or CSV. `serve` runs the
whole platform (API + evaluation server + worker pool) in one process;
`worker` runs a remote computing unit against a server.
"""

from __future__ import annotations

import csv
import json
import sys
import uuid
from pathlib import Path

import click
import yaml

from .config import load_config


@click.group()
def main():
    """Self-hostable competition platform."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def serve(config_path):
    """Run the API server plus the evaluation server and worker pool."""
    import uvicorn

    from .api import create_app
    from .platform import Platform

    config = load_config(config_path)
    platform = Platform(config).start()
    app = create_app(platform)
    try:
        uvicorn.run(app, host=config.server.host, port=config.server.port, log_level="info")
    finally:
        platform.stop()


@main.command()
@click.option("--server", required=True, help="base URL of the platform API")
@click.option(
    "--capability",
    type=click.Choice(["precompute_pool", "benchmark_host"]),
    default="precompute_pool",
)
@click.option("--workdir", type=click.Path(), default="./worker-scratch")
@click.option("--objects", "objects_dir", type=click.Path(), required=True,
              help="shared object-store directory (same filesystem as the server)")
@click.option("--backend", type=click.Choice(["process", "container"]), default="process")
@click.option("--cpu", type=float, default=0.0, help="advertised cores (0 = host count)")
@click.option("--memory", type=int, default=2 * 1024**3)
@click.option("--disk", type=int, default=4 * 1024**3)
def worker(server, capability, workdir, objects_dir, backend, cpu, memory, disk):
    """Run one computing unit against a platform server."""
    import os

    from .objectstore import LocalObjectStore
    from .sandbox import get_backend
    from .scheduler import ResourceVector, WorkerCapability
    from .workers import HttpTransport, JobExecutor, WorkerAgent

    sandbox = get_backend(backend, workdir=Path(workdir))
    executor = JobExecutor(sandbox, LocalObjectStore(objects_dir))
    agent = WorkerAgent(
        HttpTransport(server),
        executor,
        WorkerCapability(capability),
        ResourceVector(cpu or float(os.cpu_count() or 1), memory, disk),
    )
    click.echo(f"worker {agent.worker_id} ({capability}) -> {server}")
    try:
        agent.run()
    except KeyboardInterrupt:
        agent.stop_event.set()


@main.group()
def admin():
    """Organiser operations on a local deployment."""


def _open_store(config_path):
    from .store import DocumentStore

    config = load_config(config_path)
    return config, DocumentStore(config.storage.store_dir, fsync=config.storage.fsync)


def _open_gateway(config):
    from .gitgateway import GitGateway, LocalBareProvider

    provider = LocalBareProvider(config.storage.git_dir)
    return GitGateway(provider, config.storage.scratch_dir / "checkouts")


@admin.command("create-organiser")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--username", required=True)
@click.option("--email", required=True)
@click.option("--password", required=True)
def create_organiser(config_path, username, email, password):
    """Bootstrap an organiser account."""
    from .auth import hash_credential
    from .domain import Role, UserProfile
    from .store import CollectionName

    _, store = _open_store(config_path)
    with store:
        if store.query(CollectionName.USERS, {"username": username}):
            raise click.ClickException(f"username {username!r} already exists")
        user_id = uuid.uuid4().hex
        profile = UserProfile(user_id, username, email, hash_credential(password), Role.ORGANISER)
        store.put_document(CollectionName.USERS, profile.to_doc(), doc_id=user_id)
    click.echo(user_id)


@admin.command("compact-store")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def compact_store(config_path):
    """Rewrite every collection as snapshot + empty log in the current
    format (also the migration path between package versions)."""
    _, store = _open_store(config_path)
    with store:
        store.compact()
    click.echo("compacted")


@admin.command("create-competition")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--spec", "spec_path", type=click.Path(exists=True), required=True,
              help="competition spec YAML (see docs/competition-spec.md)")
def create_competition_cmd(config_path, spec_path):
    from .admin import create_competition

    _, store = _open_store(config_path)
    with store:
        spec = yaml.safe_load(Path(spec_path).read_text("utf-8"))
        comp = create_competition(store, spec)
    click.echo(comp.competition_id)


@admin.command("grant-limit")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--username", required=True)
@click.option("--competition", "competition_id", required=True)
@click.option("--limit", type=int, required=True)
def grant_limit(config_path, username, competition_id, limit):
    from .admin import AdminError, grant_subaccount_limit

    _, store = _open_store(config_path)
    with store:
        try:
            user = grant_subaccount_limit(store, username, competition_id, limit)
        except AdminError as exc:
            raise click.ClickException(str(exc))
    click.echo(json.dumps(user.subaccount_limits))


@admin.command("export")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--competition", "competition_id", required=True)
@click.option("--dest", type=click.Path(), required=True)
def export_cmd(config_path, competition_id, dest):
    """Bundle every evaluated code tree + results into an archive directory."""
    from .admin import AdminError, ExportIncomplete, export_archive

    config, store = _open_store(config_path)
    with store:
        gateway = _open_gateway(config)
        try:
            manifest = export_archive(store, gateway, competition_id, dest)
        except (ExportIncomplete, AdminError) as exc:
            raise click.ClickException(str(exc))
    click.echo(f"exported {len(manifest['submissions'])} submissions to {dest}")


@admin.command("reset")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--competition", "competition_id", required=True)
@click.option("--yes", is_flag=True, help="skip the confirmation prompt")
def reset_cmd(config_path, competition_id, yes):
    """Archive the competition, then clear its submissions, subaccounts and
    repositories."""
    from .admin import AdminError, ExportIncomplete, archive_and_reset

    if not yes:
        click.confirm(f"archive and reset competition {competition_id}?", abort=True)
    config, store = _open_store(config_path)
    with store:
        gateway = _open_gateway(config)
        try:
            dest = archive_and_reset(store, gateway, competition_id, config.storage.archive_dir)
        except (ExportIncomplete, AdminError) as exc:
            raise click.ClickException(str(exc))
    click.echo(f"archived to {dest}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--competition", "competition_id", required=True)
@click.option("--category", default=None)
@click.option("--filter", "filters", multiple=True,
              help="undominated:<m1,m2> | flag:<name>=<bool> | range:<metric>,<lo>,<hi>")
@click.option("--csv", "csv_path", type=click.Path(), default=None)
def board(config_path, competition_id, category, filters, csv_path):
    """Print (or CSV-export) a leaderboard."""
    from .domain import Competition, Subaccount, Submission
    from .leaderboard import aggregate, board_export, rank
    from .store import CollectionName

    config, store = _open_store(config_path)
    with store:
        comp_doc = store.get_document(CollectionName.COMPETITIONS, competition_id)
        if comp_doc is None:
            raise click.ClickException("no such competition")
        comp = Competition.from_doc(comp_doc.body)
        submissions = [
            Submission.from_doc(d.body)
            for d in store.query(CollectionName.SUBMISSIONS, {"competition_id": competition_id})
        ]
        accounts = {
            d.body["subaccount_id"]: Subaccount.from_doc(d.body)
            for d in store.query(CollectionName.SUBACCOUNTS, {"competition_id": competition_id})
        }
        entries = aggregate(submissions, accounts, comp.metric_schema, comp.selection_policy)
        if category:
            spec = comp.category(category)
        elif comp.categories:
            spec = comp.categories[0]
        else:
            raise click.ClickException("competition has no categories; pass --category")
        from .leaderboard import FlagFilter, RangeFilter, UndominatedFilter

        parsed = []
        directions = {m.metric_name: m.direction for m in comp.metric_schema}
        for raw in filters:
            kind, _, rest = raw.partition(":")
            if kind == "undominated":
                parsed.append(
                    UndominatedFilter(tuple((m, directions[m]) for m in rest.split(",") if m))
                )
            elif kind == "flag":
                name, _, value = rest.partition("=")
                parsed.append(FlagFilter(name, value.lower() in ("1", "true", "yes", "")))
            elif kind == "range":
                metric, lo, hi = rest.split(",")
                parsed.append(
                    RangeFilter(metric, float(lo) if lo else None, float(hi) if hi else None)
                )
            else:
                raise click.ClickException(f"unknown filter {raw!r}")
        export = board_export(rank(entries, spec, parsed, comp.metric_schema))
    if csv_path:
        metric_names = [m.metric_name for m in comp.metric_schema]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "subaccount", "display_name", "score", *metric_names])
            for row in export["rows"]:
                writer.writerow(
                    [row["rank"], row["subaccount"], row["display_name"], row["score"]]
                    + [row["aggregates"].get(m, "") for m in metric_names]
                )
        click.echo(f"wrote {csv_path}")
    else:
        click.echo(json.dumps(export, indent=1))


if __name__ == "__main__":
    main()
