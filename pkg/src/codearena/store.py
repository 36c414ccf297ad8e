"""Embedded document store backing the platform's four collections.

Single-node, file-backed: each collection keeps an append-only record log of
length-prefixed canonical JSON plus a snapshot file, so the whole platform
runs with zero external services. Writers get optimistic versioning; the
evaluation server observes new submissions through watch streams.

On-disk layout is documented in docs/storage-format.md. Bit-exactness across
package versions is not guaranteed.
"""

from __future__ import annotations

import copy
import json
import struct
import threading
import uuid
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence


class StoreError(Exception):
    pass


class StorageUnavailable(StoreError):
    pass


class VersionConflict(StoreError):
    def __init__(self, doc_id: str, expected, actual):
        super().__init__(f"doc {doc_id}: expected version {expected}, stored {actual}")
        self.doc_id = doc_id
        self.expected = expected
        self.actual = actual


class WatchLagOverflow(StoreError):
    """Watcher buffer overran; re-sync with a query and a fresh token."""


class CollectionName(str, Enum):
    USERS = "users"
    COMPETITIONS = "competitions"
    SUBACCOUNTS = "subaccounts"
    SUBMISSIONS = "submissions"


@dataclass(frozen=True)
class Document:
    id: str
    body: dict
    version: int


@dataclass(frozen=True)
class ChangeEvent:
    seq: int
    collection: CollectionName
    op: str  # "put" | "delete"
    doc: Document


_LEN = struct.Struct(">I")

MAX_QUERY_LIMIT = 1000


def canonical_json(value: Any) -> bytes:
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def _lookup(body: Mapping[str, Any], path: str):
    cur: Any = body
    for part in path.split("."):
        if isinstance(cur, Mapping) and part in cur:
            cur = cur[part]
        else:
            return None
    return cur


_OPS: dict[str, Callable[[Any, Any], bool]] = {
    "$eq": lambda a, b: a == b,
    "$ne": lambda a, b: a != b,
    "$gt": lambda a, b: a is not None and a > b,
    "$gte": lambda a, b: a is not None and a >= b,
    "$lt": lambda a, b: a is not None and a < b,
    "$lte": lambda a, b: a is not None and a <= b,
    "$in": lambda a, b: a in b,
}


def matches(body: Mapping[str, Any], filter: Optional[Mapping[str, Any]]) -> bool:
    """Conjunction of per-field predicates. Value may be a literal (equality)
    or a mapping of $-operators."""
    if not filter:
        return True
    for path, cond in filter.items():
        actual = _lookup(body, path)
        if isinstance(cond, Mapping) and any(k.startswith("$") for k in cond):
            for op, rhs in cond.items():
                fn = _OPS.get(op)
                if fn is None:
                    raise ValueError(f"unknown filter operator {op!r}")
                if not fn(actual, rhs):
                    return False
        else:
            if actual != cond:
                return False
    return True


def _sort_key(value: Any):
    # total order across mixed/missing types: None < bool < number < str < other
    if value is None:
        return (0, "")
    if isinstance(value, bool):
        return (1, value)
    if isinstance(value, (int, float)):
        return (2, value)
    if isinstance(value, str):
        return (3, value)
    return (4, json.dumps(value, sort_keys=True, default=str))


def sort_documents(
    docs: list[Document], sort: Optional[Sequence[tuple[str, str]]]
) -> list[Document]:
    docs = sorted(docs, key=lambda d: d.id)
    if not sort:
        return docs
    for field_name, direction in reversed(list(sort)):
        if direction not in ("asc", "desc"):
            raise ValueError(f"sort direction must be asc|desc, got {direction!r}")
        docs.sort(
            key=lambda d: _sort_key(_lookup(d.body, field_name)),
            reverse=(direction == "desc"),
        )
    return docs


class Watcher:
    """One subscriber's ordered stream of change events.

    Events are delivered exactly once, in commit order. If the internal
    buffer overflows, already-buffered events are still drained and then
    next() raises WatchLagOverflow; the caller must re-sync via query.
    """

    def __init__(self, collection: CollectionName, filter, buffer_size: int):
        self.collection = collection
        self.filter = dict(filter) if filter else None
        self._buffer: deque[ChangeEvent] = deque()
        self._buffer_size = buffer_size
        self._cond = threading.Condition()
        self._overflowed = False
        self._closed = False

    def _offer(self, event: ChangeEvent) -> None:
        with self._cond:
            if self._closed or self._overflowed:
                return
            if len(self._buffer) >= self._buffer_size:
                self._overflowed = True
            else:
                self._buffer.append(event)
            self._cond.notify_all()

    def next(self, timeout: Optional[float] = None) -> Optional[ChangeEvent]:
        """Next event, or None on timeout. Raises WatchLagOverflow once the
        pre-overflow backlog is drained after an overflow."""
        with self._cond:
            if not self._buffer:
                if self._overflowed:
                    raise WatchLagOverflow(f"watcher on {self.collection.value} overran")
                if self._closed:
                    raise StorageUnavailable("watcher closed")
                self._cond.wait(timeout)
            if self._buffer:
                return self._buffer.popleft()
            if self._overflowed:
                raise WatchLagOverflow(f"watcher on {self.collection.value} overran")
            if self._closed:
                raise StorageUnavailable("watcher closed")
            return None

    def drain(self) -> list[ChangeEvent]:
        with self._cond:
            events = list(self._buffer)
            self._buffer.clear()
            return events

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class _Collection:
    def __init__(self, name: CollectionName, directory: Path, fsync: bool, history_size: int):
        self.name = name
        self.dir = directory
        self.fsync = fsync
        self.lock = threading.RLock()
        self.docs: dict[str, Document] = {}
        self.seq = 0
        self.history: deque[ChangeEvent] = deque(maxlen=history_size)
        self.history_floor = 0  # seqs <= floor are no longer replayable
        self.watchers: list[Watcher] = []
        self.dir.mkdir(parents=True, exist_ok=True)
        self._load()
        self._log = open(self.log_path, "ab")

    @property
    def log_path(self) -> Path:
        return self.dir / "records.log"

    @property
    def snapshot_path(self) -> Path:
        return self.dir / "snapshot.json"

    def _load(self) -> None:
        if self.snapshot_path.exists():
            snap = json.loads(self.snapshot_path.read_text("utf-8"))
            self.seq = snap["last_seq"]
            for d in snap["docs"]:
                self.docs[d["id"]] = Document(d["id"], d["body"], d["version"])
        if self.log_path.exists():
            with open(self.log_path, "rb") as fh:
                while True:
                    header = fh.read(_LEN.size)
                    if len(header) < _LEN.size:
                        break
                    (length,) = _LEN.unpack(header)
                    payload = fh.read(length)
                    if len(payload) < length:
                        break  # torn tail write; ignore trailing partial record
                    rec = json.loads(payload.decode("utf-8"))
                    if rec["seq"] <= self.seq:
                        continue  # already folded into the snapshot
                    self.seq = rec["seq"]
                    if rec["op"] == "delete":
                        self.docs.pop(rec["id"], None)
                    else:
                        self.docs[rec["id"]] = Document(rec["id"], rec["body"], rec["version"])
        self.history_floor = self.seq

    def append_record(self, rec: dict) -> None:
        payload = canonical_json(rec)
        self._log.write(_LEN.pack(len(payload)) + payload)
        self._log.flush()
        if self.fsync:
            import os

            os.fsync(self._log.fileno())

    def publish(self, event: ChangeEvent) -> None:
        if self.history.maxlen and len(self.history) == self.history.maxlen:
            self.history_floor = self.history[0].seq
        self.history.append(event)
        for w in self.watchers:
            if matches(event.doc.body, w.filter):
                w._offer(event)

    def compact(self) -> None:
        with self.lock:
            snap = {
                "last_seq": self.seq,
                "docs": [
                    {"id": d.id, "version": d.version, "body": d.body}
                    for d in self.docs.values()
                ],
            }
            tmp = self.snapshot_path.with_suffix(".tmp")
            tmp.write_bytes(canonical_json(snap))
            tmp.replace(self.snapshot_path)
            self._log.close()
            self._log = open(self.log_path, "wb")

    def close(self) -> None:
        with self.lock:
            for w in self.watchers:
                w.close()
            self.watchers.clear()
            self._log.close()


class DocumentStore:
    """The embedded storage backend. Safe for concurrent callers; writes to
    one collection serialise on its lock, watch streams are per-watcher."""

    def __init__(self, root: "Path | str", fsync: bool = True, watch_history: int = 4096):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._closed = False
        self._collections = {
            name: _Collection(name, self.root / name.value, fsync, watch_history)
            for name in CollectionName
        }

    def _coll(self, collection: CollectionName) -> _Collection:
        if self._closed:
            raise StorageUnavailable("store closed")
        return self._collections[CollectionName(collection)]

    def put_document(
        self,
        collection: CollectionName,
        body: Mapping[str, Any],
        doc_id: Optional[str] = None,
        expected_version: Optional[int] = None,
    ) -> tuple[str, int]:
        """Insert or update a document; durable before return.

        expected_version=None inserts (the id must be fresh); an integer
        updates and must match the stored version, else VersionConflict.
        """
        coll = self._coll(collection)
        body = json.loads(canonical_json(body).decode("utf-8"))  # validate + deep copy
        with coll.lock:
            if doc_id is None:
                doc_id = uuid.uuid4().hex
            existing = coll.docs.get(doc_id)
            if expected_version is None:
                if existing is not None:
                    raise VersionConflict(doc_id, None, existing.version)
                version = 1
            else:
                if existing is None:
                    raise VersionConflict(doc_id, expected_version, None)
                if existing.version != expected_version:
                    raise VersionConflict(doc_id, expected_version, existing.version)
                version = existing.version + 1
            coll.seq += 1
            rec = {"seq": coll.seq, "op": "put", "id": doc_id, "version": version, "body": body}
            try:
                coll.append_record(rec)
            except OSError as exc:
                raise StorageUnavailable(str(exc)) from exc
            doc = Document(doc_id, body, version)
            coll.docs[doc_id] = doc
            coll.publish(ChangeEvent(coll.seq, coll.name, "put", doc))
            return doc_id, version

    def get_document(self, collection: CollectionName, doc_id: str) -> Optional[Document]:
        coll = self._coll(collection)
        with coll.lock:
            doc = coll.docs.get(doc_id)
            if doc is None:
                return None
            return Document(doc.id, copy.deepcopy(doc.body), doc.version)

    def delete_document(
        self,
        collection: CollectionName,
        doc_id: str,
        expected_version: Optional[int] = None,
    ) -> bool:
        coll = self._coll(collection)
        with coll.lock:
            existing = coll.docs.get(doc_id)
            if existing is None:
                return False
            if expected_version is not None and existing.version != expected_version:
                raise VersionConflict(doc_id, expected_version, existing.version)
            coll.seq += 1
            rec = {
                "seq": coll.seq,
                "op": "delete",
                "id": doc_id,
                "version": existing.version,
                "body": {},
            }
            try:
                coll.append_record(rec)
            except OSError as exc:
                raise StorageUnavailable(str(exc)) from exc
            del coll.docs[doc_id]
            coll.publish(ChangeEvent(coll.seq, coll.name, "delete", existing))
            return True

    def query(
        self,
        collection: CollectionName,
        filter: Optional[Mapping[str, Any]] = None,
        sort: Optional[Sequence[tuple[str, str]]] = None,
        offset: int = 0,
        limit: int = MAX_QUERY_LIMIT,
    ) -> list[Document]:
        """Filtered, totally ordered (sort keys, then id), paginated read."""
        if limit > MAX_QUERY_LIMIT:
            raise ValueError(f"limit must be <= {MAX_QUERY_LIMIT}")
        coll = self._coll(collection)
        with coll.lock:
            hits = [
                Document(d.id, copy.deepcopy(d.body), d.version)
                for d in coll.docs.values()
                if matches(d.body, filter)
            ]
        hits = sort_documents(hits, sort)
        return hits[offset : offset + limit]

    def current_seq(self, collection: CollectionName) -> int:
        """Resume token: events after this point will be delivered to a
        watch(since_seq=token) subscriber."""
        coll = self._coll(collection)
        with coll.lock:
            return coll.seq

    def watch(
        self,
        collection: CollectionName,
        filter: Optional[Mapping[str, Any]] = None,
        since_seq: Optional[int] = None,
        buffer_size: int = 1024,
    ) -> Watcher:
        """Subscribe to committed writes matching the filter, in commit order.

        since_seq replays retained history after that token first; a token
        older than the retained window raises WatchLagOverflow immediately
        (caller must catch up with a query and subscribe afresh).
        """
        coll = self._coll(collection)
        watcher = Watcher(coll.name, filter, buffer_size)
        with coll.lock:
            if since_seq is not None:
                if since_seq < coll.history_floor:
                    raise WatchLagOverflow(
                        f"token {since_seq} older than retained history ({coll.history_floor})"
                    )
                for ev in coll.history:
                    if ev.seq > since_seq and matches(ev.doc.body, watcher.filter):
                        watcher._offer(ev)
            coll.watchers.append(watcher)
        return watcher

    def unwatch(self, watcher: Watcher) -> None:
        coll = self._collections[watcher.collection]
        with coll.lock:
            if watcher in coll.watchers:
                coll.watchers.remove(watcher)
        watcher.close()

    def compact(self, collection: Optional[CollectionName] = None) -> None:
        names = [collection] if collection else list(CollectionName)
        for name in names:
            self._coll(name).compact()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for coll in self._collections.values():
            coll.close()

    def __enter__(self) -> "DocumentStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
