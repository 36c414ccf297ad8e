"""HTTP API (versioned under /api/v1) plus the worker wire protocol and the
git smart-HTTP mount.

Error bodies are always {"code", "message"} with codes from the documented
closed set (docs/api-errors.md). The role/endpoint authorization matrix
lives in docs/authorization-matrix.md and is enforced here; submission
payloads always pass through the domain redaction rules before leaving the
service.
"""

from __future__ import annotations

import re
import uuid
from typing import Optional

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse

from .admin import AdminError, ExportIncomplete, archive_and_reset, create_competition, grant_subaccount_limit
from .auth import InvalidToken, TokenClaims, hash_credential, verify_credential
from .clock import parse_iso, utc_iso
from .domain import (
    Competition,
    DomainError,
    Role,
    Subaccount,
    SubaccountDecision,
    Submission,
    SubmissionStatus,
    SubmissionView,
    TERMINAL_STATUSES,
    UserProfile,
    ViewerKind,
    redact_submission_view,
    validate_subaccount_request,
)
from .leaderboard import (
    BoardFilter,
    FlagFilter,
    LeaderboardError,
    RangeFilter,
    UndominatedFilter,
    aggregate,
    board_export,
    history_series,
    rank,
)
from .scheduler import PROTOCOL_VERSION, ResourceVector, StaleWorker, WorkerCapability
from .store import CollectionName, VersionConflict

_USERNAME_RE = re.compile(r"^[A-Za-z0-9_.-]{2,64}$")


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _unauthorized(message: str = "authentication required") -> ApiError:
    return ApiError(401, "unauthorized", message)


def _forbidden(message: str = "not allowed") -> ApiError:
    return ApiError(403, "forbidden", message)


def _not_found(what: str) -> ApiError:
    return ApiError(404, "not_found", f"{what} not found")


def create_app(platform) -> FastAPI:
    app = FastAPI(title="codearena", docs_url=None, redoc_url=None)
    store = platform.store
    tokens = platform.tokens
    clock = platform.clock
    create_lock = __import__("threading").Lock()

    @app.exception_handler(ApiError)
    async def on_api_error(request: Request, exc: ApiError):
        return JSONResponse({"code": exc.code, "message": exc.message}, status_code=exc.status)

    @app.exception_handler(Exception)
    async def on_unexpected(request: Request, exc: Exception):
        return JSONResponse(
            {"code": "internal_error", "message": "internal error"}, status_code=500
        )

    # -- auth helpers ----------------------------------------------------

    def claims_from(request: Request) -> TokenClaims:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise _unauthorized()
        try:
            return tokens.verify(header[7:])
        except InvalidToken as exc:
            raise _unauthorized(str(exc))

    def load_user(claims: TokenClaims) -> UserProfile:
        doc = store.get_document(CollectionName.USERS, claims.user_id)
        if doc is None:
            raise _unauthorized("user no longer exists")
        return UserProfile.from_doc(doc.body)

    def require_organiser(request: Request) -> UserProfile:
        user = load_user(claims_from(request))
        if user.role != Role.ORGANISER:
            raise _forbidden("organiser role required")
        return user

    def load_competition(competition_id: str) -> Competition:
        doc = store.get_document(CollectionName.COMPETITIONS, competition_id)
        if doc is None:
            raise _not_found("competition")
        return Competition.from_doc(doc.body)

    # -- auth endpoints -----------------------------------------------------

    @app.post("/api/v1/auth/register")
    async def register(body: dict):
        username = str(body.get("username", ""))
        email = str(body.get("email", ""))
        password = str(body.get("password", ""))
        if not _USERNAME_RE.match(username):
            raise ApiError(400, "invalid_request", "username must match [A-Za-z0-9_.-]{2,64}")
        if len(password) < 8:
            raise ApiError(400, "invalid_request", "password must be at least 8 characters")
        with create_lock:
            if store.query(CollectionName.USERS, {"username": username}):
                raise ApiError(409, "username_taken", f"username {username!r} is taken")
            user_id = uuid.uuid4().hex
            try:
                profile = UserProfile(user_id, username, email, hash_credential(password))
            except DomainError as exc:
                raise ApiError(400, "invalid_request", str(exc))
            store.put_document(CollectionName.USERS, profile.to_doc(), doc_id=user_id)
        return {"user_id": user_id}

    @app.post("/api/v1/auth/login")
    async def login(body: dict):
        username = str(body.get("username", ""))
        password = str(body.get("password", ""))
        docs = store.query(CollectionName.USERS, {"username": username})
        if not docs:
            # burn the same hashing cost as a real check
            verify_credential(password, "pbkdf2$60000$00$00")
            raise ApiError(401, "invalid_credentials", "bad username or password")
        user = UserProfile.from_doc(docs[0].body)
        if not verify_credential(password, user.credential):
            raise ApiError(401, "invalid_credentials", "bad username or password")
        token = tokens.issue(user.user_id, user.role.value)
        return {"token": token, "user_id": user.user_id, "role": user.role.value}

    @app.post("/api/v1/auth/logout")
    async def logout(request: Request):
        header = request.headers.get("authorization", "")
        if header.lower().startswith("bearer "):
            tokens.revoke(header[7:])
        return {"ok": True}

    @app.get("/api/v1/users/me")
    async def me(request: Request):
        user = load_user(claims_from(request))
        return {"user_id": user.user_id, "username": user.username, "role": user.role.value}

    # -- competitions ---------------------------------------------------------

    def competition_summary(comp: Competition) -> dict:
        return {
            "competition_id": comp.competition_id,
            "name": comp.name,
            "start_time": comp.start_time,
            "end_time": comp.end_time,
            "visibility_policy": comp.visibility_policy.value,
            "metric_schema": [m.to_doc() for m in comp.metric_schema],
            "categories": [
                {"category_name": c.category_name, "tie_break": list(c.tie_break)}
                for c in comp.categories
            ],
            "debug_instances": list(comp.debug_instances),
            "hidden_instances": list(comp.hidden_instances),
        }

    @app.get("/api/v1/competitions")
    async def list_competitions():
        docs = store.query(CollectionName.COMPETITIONS, sort=[("start_time", "asc")])
        return [competition_summary(Competition.from_doc(d.body)) for d in docs]

    @app.get("/api/v1/competitions/{competition_id}")
    async def get_competition(competition_id: str):
        return competition_summary(load_competition(competition_id))

    @app.get("/api/v1/competitions/{competition_id}/sandbox-script")
    async def sandbox_script(competition_id: str):
        load_competition(competition_id)
        from .sandbox.container_backend import local_build_script

        return PlainTextResponse(local_build_script(platform.config.sandbox.base_image))

    # -- subaccounts -------------------------------------------------------------

    @app.post("/api/v1/competitions/{competition_id}/subaccounts")
    async def create_subaccount(competition_id: str, body: dict, request: Request):
        user = load_user(claims_from(request))
        comp = load_competition(competition_id)
        now = utc_iso(clock.now())
        if now > comp.end_time:
            raise ApiError(409, "competition_closed", "competition has ended")
        display_name = str(body.get("display_name", "")).strip()
        if not display_name:
            raise ApiError(400, "invalid_request", "display_name required")
        with create_lock:
            mine = store.query(
                CollectionName.SUBACCOUNTS,
                {"user_id": user.user_id, "competition_id": competition_id},
            )
            if any(d.body.get("display_name") == display_name for d in mine):
                raise ApiError(409, "subaccount_exists", "display_name already used")
            granted = user.subaccount_limits.get(competition_id, comp.default_subaccount_limit)
            decision = validate_subaccount_request(
                user.user_id, competition_id, len(mine), granted
            )
            if decision != SubaccountDecision.ALLOW:
                raise ApiError(
                    403,
                    "subaccount_limit_reached",
                    f"limit of {granted} subaccounts reached; ask an organiser for more",
                )
            subaccount_id = uuid.uuid4().hex
            ref = platform.gateway.provision_repository(
                subaccount_id,
                user.user_id,
                template={
                    "README.md": "Push your solution here, then press start evaluation.\n",
                    "packages.txt": "# one extra package name per line\n",
                },
            )
            acct = Subaccount(
                subaccount_id=subaccount_id,
                user_id=user.user_id,
                competition_id=competition_id,
                display_name=display_name,
                repo_url=ref.repo_url,
                extra_data={k: v for k, v in (body.get("extra_data") or {}).items()},
            )
            store.put_document(CollectionName.SUBACCOUNTS, acct.to_doc(), doc_id=subaccount_id)
        return acct.to_doc()

    @app.get("/api/v1/competitions/{competition_id}/subaccounts")
    async def my_subaccounts(competition_id: str, request: Request):
        user = load_user(claims_from(request))
        load_competition(competition_id)
        docs = store.query(
            CollectionName.SUBACCOUNTS,
            {"user_id": user.user_id, "competition_id": competition_id},
            sort=[("display_name", "asc")],
        )
        return [d.body for d in docs]

    # -- submissions ---------------------------------------------------------------

    @app.post("/api/v1/subaccounts/{subaccount_id}/evaluations")
    async def start_evaluation(subaccount_id: str, request: Request):
        user = load_user(claims_from(request))
        acct_doc = store.get_document(CollectionName.SUBACCOUNTS, subaccount_id)
        if acct_doc is None:
            raise _not_found("subaccount")
        acct = Subaccount.from_doc(acct_doc.body)
        if acct.user_id != user.user_id and user.role != Role.ORGANISER:
            raise _forbidden("not your subaccount")
        comp = load_competition(acct.competition_id)
        now = utc_iso(clock.now())
        if not (comp.start_time <= now <= comp.end_time):
            raise ApiError(409, "competition_closed", "outside the submission window")

        if acct.active_submission_id:
            active = store.get_document(CollectionName.SUBMISSIONS, acct.active_submission_id)
            if active is not None and SubmissionStatus(active.body["status"]) not in TERMINAL_STATUSES:
                raise ApiError(409, "submission_in_flight", "previous evaluation still running")

        submission_id = uuid.uuid4().hex
        claimed = {**acct_doc.body, "active_submission_id": submission_id}
        try:
            store.put_document(
                CollectionName.SUBACCOUNTS,
                claimed,
                doc_id=subaccount_id,
                expected_version=acct_doc.version,
            )
        except VersionConflict:
            raise ApiError(409, "submission_in_flight", "another evaluation was just started")
        submission = Submission(
            submission_id=submission_id,
            subaccount_id=subaccount_id,
            competition_id=acct.competition_id,
            submit_time=now,
        )
        store.put_document(CollectionName.SUBMISSIONS, submission.to_doc(), doc_id=submission_id)
        return {"submission_id": submission_id, "status": "queued"}

    def viewer_for(user: Optional[UserProfile], sub: Submission) -> ViewerKind:
        if user is None:
            return ViewerKind.OTHER
        if user.role == Role.ORGANISER:
            return ViewerKind.ORGANISER
        acct = store.get_document(CollectionName.SUBACCOUNTS, sub.subaccount_id)
        if acct is not None and acct.body.get("user_id") == user.user_id:
            return ViewerKind.OWNER
        return ViewerKind.OTHER

    def redacted_view(user: Optional[UserProfile], sub: Submission) -> SubmissionView:
        comp = load_competition(sub.competition_id)
        return redact_submission_view(sub, viewer_for(user, sub), comp.visibility_policy)

    @app.get("/api/v1/submissions/{submission_id}")
    async def get_submission(submission_id: str, request: Request):
        user = load_user(claims_from(request))
        doc = store.get_document(CollectionName.SUBMISSIONS, submission_id)
        if doc is None:
            raise _not_found("submission")
        return redacted_view(user, Submission.from_doc(doc.body)).to_doc()

    @app.get("/api/v1/submissions/{submission_id}/artifacts/{key:path}")
    async def get_artifact(submission_id: str, key: str, request: Request):
        user = load_user(claims_from(request))
        doc = store.get_document(CollectionName.SUBMISSIONS, submission_id)
        if doc is None:
            raise _not_found("submission")
        view = redacted_view(user, Submission.from_doc(doc.body))
        visible: set[str] = set()
        for outcome in view.stage_outcomes:
            visible.update(r for r in (outcome.stdout_ref, outcome.stderr_ref) if r)
            visible.update(outcome.artifact_refs)
        if key not in visible:
            raise _not_found("artifact")  # includes anything redacted away
        try:
            data = platform.objects.get(key)
        except KeyError:
            raise _not_found("artifact")
        return Response(content=data, media_type="application/octet-stream")

    @app.get("/api/v1/competitions/{competition_id}/submissions")
    async def submission_feed(
        competition_id: str, request: Request, offset: int = 0, limit: int = 50
    ):
        load_user(claims_from(request))
        load_competition(competition_id)
        limit = max(0, min(limit, 200))
        docs = store.query(
            CollectionName.SUBMISSIONS,
            {"competition_id": competition_id},
            sort=[("submit_time", "desc")],
            offset=max(0, offset),
            limit=limit or 1,
        ) if limit else []
        names: dict[str, str] = {}
        rows = []
        for d in docs:
            sid = d.body["subaccount_id"]
            if sid not in names:
                acct = store.get_document(CollectionName.SUBACCOUNTS, sid)
                names[sid] = acct.body["display_name"] if acct else "(removed)"
            rows.append(
                {
                    "submission_id": d.body["submission_id"],
                    "display_name": names[sid],
                    "submit_time": d.body["submit_time"],
                    "status": d.body["status"],
                }
            )
        return {"offset": offset, "rows": rows}

    # -- leaderboard -------------------------------------------------------------------

    def parse_filters(comp: Competition, raw_filters: list[str]) -> list[BoardFilter]:
        directions = {m.metric_name: m.direction for m in comp.metric_schema}
        parsed: list[BoardFilter] = []
        for raw in raw_filters:
            kind, _, rest = raw.partition(":")
            if kind == "undominated":
                metrics = [m for m in rest.split(",") if m]
                if not metrics:
                    raise ApiError(400, "invalid_filter", "undominated needs metric names")
                compare = []
                for m in metrics:
                    if m not in directions:
                        raise ApiError(400, "invalid_filter", f"unknown metric {m!r}")
                    compare.append((m, directions[m]))
                parsed.append(UndominatedFilter(tuple(compare)))
            elif kind == "flag":
                name, _, value = rest.partition("=")
                if not name:
                    raise ApiError(400, "invalid_filter", "flag filter needs a name")
                parsed.append(FlagFilter(name, value.lower() in ("1", "true", "yes", "")))
            elif kind == "range":
                parts = rest.split(",")
                if len(parts) != 3 or parts[0] not in directions:
                    raise ApiError(400, "invalid_filter", "range:<metric>,<low>,<high>")
                low = float(parts[1]) if parts[1] else None
                high = float(parts[2]) if parts[2] else None
                parsed.append(RangeFilter(parts[0], low, high))
            else:
                raise ApiError(400, "invalid_filter", f"unknown filter kind {kind!r}")
        return parsed

    def competition_entries(comp: Competition):
        sub_docs = store.query(
            CollectionName.SUBMISSIONS, {"competition_id": comp.competition_id}
        )
        submissions = [Submission.from_doc(d.body) for d in sub_docs]
        acct_docs = store.query(
            CollectionName.SUBACCOUNTS, {"competition_id": comp.competition_id}
        )
        accounts = {d.body["subaccount_id"]: Subaccount.from_doc(d.body) for d in acct_docs}
        return submissions, accounts

    def resolve_category(comp: Competition, name: Optional[str]):
        from .domain import CategorySpec

        if name:
            try:
                return comp.category(name)
            except KeyError:
                raise _not_found("category")
        if comp.categories:
            return comp.categories[0]
        if not comp.metric_schema:
            raise ApiError(409, "no_metrics", "competition has no metric schema")
        first = comp.metric_schema[0]
        return CategorySpec(
            category_name=f"by_{first.metric_name}",
            scoring_function_id="single_metric",
            scoring_params={"metric": first.metric_name, "direction": first.direction.value},
        )

    @app.get("/api/v1/competitions/{competition_id}/leaderboard")
    async def leaderboard(
        competition_id: str,
        request: Request,
        response: Response,
        category: Optional[str] = None,
    ):
        comp = load_competition(competition_id)
        filters = parse_filters(comp, request.query_params.getlist("filter"))
        submissions, accounts = competition_entries(comp)
        entries = aggregate(submissions, accounts, comp.metric_schema, comp.selection_policy)
        spec = resolve_category(comp, category)
        try:
            board = rank(entries, spec, filters, comp.metric_schema)
        except LeaderboardError as exc:
            raise ApiError(400, "invalid_filter", str(exc))
        response.headers["Cache-Control"] = "public, max-age=30"
        return board_export(board)

    @app.get("/api/v1/competitions/{competition_id}/history")
    async def history(competition_id: str, category: Optional[str] = None, points: int = 40):
        comp = load_competition(competition_id)
        submissions, accounts = competition_entries(comp)
        spec = resolve_category(comp, category)
        points = max(2, min(points, 500))
        start = parse_iso(comp.start_time).timestamp()
        end = min(clock.now(), parse_iso(comp.end_time).timestamp())
        if end <= start:
            end = start + 1
        grid = [utc_iso(start + (end - start) * i / (points - 1)) for i in range(points)]
        series = history_series(submissions, accounts, comp.metric_schema, spec, grid)
        names = {k: v.display_name for k, v in accounts.items()}
        return {
            "category": spec.category_name,
            "grid": grid,
            "series": [
                {
                    "subaccount": sid,
                    "display_name": names.get(sid, sid),
                    "points": [{"t": t, "score": s} for t, s in pts],
                }
                for sid, pts in sorted(series.items())
            ],
        }

    # -- admin ----------------------------------------------------------------------

    @app.post("/api/v1/admin/competitions")
    async def admin_create_competition(body: dict, request: Request):
        require_organiser(request)
        try:
            comp = create_competition(store, body)
        except (DomainError, KeyError, ValueError) as exc:
            raise ApiError(400, "invalid_request", f"bad competition spec: {exc}")
        return competition_summary(comp)

    @app.post("/api/v1/admin/limits")
    async def admin_grant_limit(body: dict, request: Request):
        require_organiser(request)
        try:
            user = grant_subaccount_limit(
                store,
                str(body.get("username", "")),
                str(body.get("competition_id", "")),
                int(body.get("limit", 0)),
            )
        except AdminError as exc:
            raise ApiError(400, "invalid_request", str(exc))
        return {"username": user.username, "subaccount_limits": dict(user.subaccount_limits)}

    @app.post("/api/v1/admin/competitions/{competition_id}/export")
    async def admin_export(competition_id: str, request: Request, body: Optional[dict] = None):
        require_organiser(request)
        from .admin import export_archive

        dest = platform.config.storage.archive_dir / f"export-{competition_id}"
        try:
            manifest = export_archive(store, platform.gateway, competition_id, dest)
        except ExportIncomplete as exc:
            raise ApiError(409, "export_incomplete", str(exc))
        except AdminError as exc:
            raise _not_found(str(exc))
        return {"dest": str(dest), "manifest": manifest}

    @app.post("/api/v1/admin/competitions/{competition_id}/reset")
    async def admin_reset(competition_id: str, request: Request):
        require_organiser(request)
        try:
            dest = archive_and_reset(
                store, platform.gateway, competition_id, platform.config.storage.archive_dir
            )
        except ExportIncomplete as exc:
            raise ApiError(409, "export_incomplete", str(exc))
        except AdminError as exc:
            raise _not_found(str(exc))
        return {"archived_to": str(dest)}

    # -- worker wire protocol ----------------------------------------------------------

    @app.post("/worker/heartbeat")
    async def worker_heartbeat(body: dict):
        kills = platform.scheduler.heartbeat(
            body["worker_id"],
            WorkerCapability(body["capability"]),
            ResourceVector.from_doc(body["capacity"]),
        )
        return {"v": PROTOCOL_VERSION, "kill": kills}

    @app.post("/worker/lease")
    async def worker_lease(body: dict):
        try:
            ticket = platform.scheduler.next_assignment(body["worker_id"])
        except StaleWorker as exc:
            raise ApiError(409, "stale_worker", str(exc))
        return {"v": PROTOCOL_VERSION, "ticket": ticket.to_doc() if ticket else None}

    @app.post("/worker/result")
    async def worker_result(body: dict):
        platform.scheduler.report_result(body["worker_id"], body["job_id"], body["result"])
        return {"v": PROTOCOL_VERSION, "ok": True}

    @app.post("/worker/kill-ack")
    async def worker_kill_ack(body: dict):
        platform.scheduler.kill_ack(body["worker_id"], body["job_id"])
        return {"v": PROTOCOL_VERSION, "ok": True}

    # -- git smart HTTP -------------------------------------------------------------------

    try:
        from starlette.middleware.wsgi import WSGIMiddleware
    except ImportError:  # newer starlette moved it
        from a2wsgi import WSGIMiddleware  # type: ignore

    app.mount("/git", WSGIMiddleware(platform.git_http))
    return app
