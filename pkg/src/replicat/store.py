"""Transactional record store.

The persistence contract for the whole system: named record sets (tables) of
JSON-serializable dict records addressed by string keys, mutated only inside
transactions. Transactions are serialized by a re-entrant lock, which makes
every read-modify-write trivially serializable; nested ``transaction()``
calls on the same thread join the outer transaction, so composite operations
commit or roll back as one unit.

Events emitted during a transaction are buffered and appended to the
append-only event log only on commit, so events for rolled-back operations
never become visible.

Records are treated as immutable: mutate by ``put``-ing a fresh dict
(copy-on-write). The undo journal keeps pre-image references only.
"""

import json
import os
import threading
from contextlib import contextmanager

_MISSING = object()

# Tables whose writes do not count as progress (steady background noise).
_UNCOUNTED_TABLES = {"heartbeats", "cursors", "traces"}


class Transaction:
    def __init__(self, store):
        self._store = store
        self._undo = []            # (table, key, pre_image or _MISSING)
        self._pending_events = []  # (event_type, payload, created_at)
        self.writes = 0

    # -- record access ----------------------------------------------------

    def get(self, table, key, default=None):
        return self._store._tables.get(table, {}).get(key, default)

    def put(self, table, key, record):
        tbl = self._store._tables.setdefault(table, {})
        self._journal(table, key, tbl)
        tbl[key] = record
        self._count_write(table)

    def delete(self, table, key):
        tbl = self._store._tables.get(table, {})
        if key not in tbl:
            return False
        self._journal(table, key, tbl)
        del tbl[key]
        self._count_write(table)
        return True

    def scan(self, table):
        """Snapshot of (key, record) pairs; safe to mutate while iterating."""
        return list(self._store._tables.get(table, {}).items())

    def keys(self, table):
        return list(self._store._tables.get(table, {}).keys())

    def next_id(self, sequence) -> int:
        seqs = self._store._tables.setdefault("_seq", {})
        self._journal("_seq", sequence, seqs)
        value = seqs.get(sequence, 0) + 1
        seqs[sequence] = value
        return value

    # -- events ------------------------------------------------------------

    def emit(self, event_type, payload, created_at):
        self._pending_events.append((event_type, dict(payload), created_at))

    # -- internals ----------------------------------------------------------

    def _journal(self, table, key, tbl):
        # Every write gets an undo entry (not one per key) so rolling back
        # to any savepoint restores exact pre-images in reverse order.
        self._undo.append((table, key, tbl.get(key, _MISSING)))

    def _count_write(self, table):
        if table not in _UNCOUNTED_TABLES:
            self.writes += 1

    def savepoint(self):
        return (len(self._undo), len(self._pending_events))

    def _rollback_to(self, savepoint):
        """Undo writes past a savepoint (failed nested transaction)."""
        undo_len, events_len = savepoint
        while len(self._undo) > undo_len:
            table, key, pre = self._undo.pop()
            tbl = self._store._tables.setdefault(table, {})
            if pre is _MISSING:
                tbl.pop(key, None)
            else:
                tbl[key] = pre
        del self._pending_events[events_len:]

    def _rollback(self):
        self._rollback_to((0, 0))

    def _commit(self):
        events = self._store._events
        for event_type, payload, created_at in self._pending_events:
            events.append({
                "event_id": len(events) + 1,
                "event_type": event_type,
                "payload": payload,
                "created_at": created_at,
                "delivered": False,
            })
        self._store.mutations += self.writes
        self._undo.clear()
        self._pending_events.clear()


class MemoryStore:
    """In-process transactional store; the reference embedded deployment."""

    def __init__(self):
        self._tables = {}
        self._events = []
        self._lock = threading.RLock()
        self._local = threading.local()
        self.mutations = 0

    @contextmanager
    def transaction(self):
        self._lock.acquire()
        depth = getattr(self._local, "depth", 0)
        if depth == 0:
            self._local.txn = Transaction(self)
        self._local.depth = depth + 1
        txn = self._local.txn
        savepoint = txn.savepoint()
        try:
            yield txn
        except BaseException:
            if depth == 0:
                txn._rollback()
            else:
                txn._rollback_to(savepoint)
            raise
        else:
            if depth == 0:
                txn._commit()
                self._flush()
        finally:
            self._local.depth = depth
            if depth == 0:
                self._local.txn = None
            self._lock.release()

    # -- event log (read side; writes go through transactions) -------------

    def events_after(self, position, event_type=None):
        slice_ = self._events[position:]
        if event_type is None:
            return list(slice_)
        return [e for e in slice_ if e["event_type"] == event_type]

    def event_count(self) -> int:
        return len(self._events)

    def mark_delivered(self, lo, hi):
        for event in self._events[lo:hi]:
            event["delivered"] = True

    def _flush(self):
        pass


class FileStore(MemoryStore):
    """MemoryStore with a JSON snapshot written atomically on every commit.

    Good enough durability for a desk-scale service: daemon queues and the
    event log survive restarts. Not safe for concurrent processes.
    """

    def __init__(self, path):
        super().__init__()
        self._path = str(path)
        if os.path.exists(self._path):
            with open(self._path, "r", encoding="utf-8") as fh:
                snap = json.load(fh)
            self._tables = snap.get("tables", {})
            self._events = snap.get("events", [])

    def _flush(self):
        tmp = self._path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"tables": self._tables, "events": self._events}, fh)
        os.replace(tmp, self._path)
