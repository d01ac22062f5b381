"""Accounts, authentication, authorization, events, heartbeats, traces.

This is the service spine every other module leans on: who may do what,
the append-only event log with pull cursors, and the heartbeat registry
used to partition daemon work without locks.
"""

import hashlib
import secrets

from .errors import (
    DuplicateAccount,
    DuplicateScope,
    ExpiredToken,
    InvalidCredentials,
    NoLiveWorkers,
    UnknownAccount,
    UnknownCursor,
    UnknownScope,
    UnknownToken,
    UnmappedAccount,
)

USER, GROUP, SERVICE = "USER", "GROUP", "SERVICE"

_PBKDF2_ITERATIONS = 20_000


def stable_hash(key: str) -> int:
    """Process-independent hash used for work partitioning and path layout."""
    digest = hashlib.md5(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _hash_credential(password: str, salt: bytes) -> str:
    return hashlib.pbkdf2_hmac(
        "sha256", password.encode("utf-8"), salt, _PBKDF2_ITERATIONS
    ).hex()


def default_policy(account: dict, action: str, scope: dict | None) -> bool:
    """Read is open to everyone; writes need scope ownership or privilege."""
    if action == "read":
        return True
    if account.get("privileged"):
        return True
    return scope is not None and scope["owner"] == account["account_name"]


class Gateway:
    def __init__(self, system):
        self.system = system
        self.policy = default_policy
        self.heartbeat_expiry = system.config.heartbeat_expiry

    @property
    def store(self):
        return self.system.store

    @property
    def clock(self):
        return self.system.clock

    # -- accounts and scopes -------------------------------------------------

    def add_account(self, account_name, kind=USER, privileged=False,
                    home_scope=None):
        home_scope = home_scope or account_name
        with self.store.transaction() as txn:
            if txn.get("accounts", account_name) is not None:
                raise DuplicateAccount(account_name)
            txn.put("accounts", account_name, {
                "account_name": account_name,
                "kind": kind,
                "privileged": bool(privileged),
                "home_scope": home_scope,
                "created_at": self.clock.now(),
            })
            if txn.get("scopes", home_scope) is None:
                txn.put("scopes", home_scope, {
                    "scope": home_scope,
                    "owner": account_name,
                    "created_at": self.clock.now(),
                })
        return self.get_account(account_name)

    def get_account(self, account_name):
        with self.store.transaction() as txn:
            account = txn.get("accounts", account_name)
        if account is None:
            raise UnknownAccount(account_name)
        return account

    def list_accounts(self):
        with self.store.transaction() as txn:
            return [a for _, a in sorted(txn.scan("accounts"))]

    def add_scope(self, scope, owner):
        with self.store.transaction() as txn:
            if txn.get("accounts", owner) is None:
                raise UnknownAccount(owner)
            if txn.get("scopes", scope) is not None:
                raise DuplicateScope(scope)
            txn.put("scopes", scope, {
                "scope": scope,
                "owner": owner,
                "created_at": self.clock.now(),
            })

    def get_scope(self, scope):
        with self.store.transaction() as txn:
            record = txn.get("scopes", scope)
        if record is None:
            raise UnknownScope(scope)
        return record

    def add_identity(self, username, password, account_name):
        """Map a username/password identity onto an account (many-to-many)."""
        with self.store.transaction() as txn:
            if txn.get("accounts", account_name) is None:
                raise UnknownAccount(account_name)
            identity = txn.get("identities", username)
            if identity is None:
                salt = secrets.token_bytes(16)
                identity = {
                    "username": username,
                    "salt": salt.hex(),
                    "credential": _hash_credential(password, salt),
                    "accounts": [],
                }
            if account_name not in identity["accounts"]:
                identity = dict(identity)
                identity["accounts"] = identity["accounts"] + [account_name]
            txn.put("identities", username, identity)

    # -- tokens ----------------------------------------------------------------

    def login(self, username, password, account_name):
        with self.store.transaction() as txn:
            identity = txn.get("identities", username)
            if identity is None:
                raise InvalidCredentials("unknown identity")
            expected = _hash_credential(password, bytes.fromhex(identity["salt"]))
            if not secrets.compare_digest(expected, identity["credential"]):
                raise InvalidCredentials("bad credential")
            if account_name not in identity["accounts"]:
                raise UnmappedAccount(f"{username} cannot act as {account_name}")
            token = secrets.token_hex(16)
            now = self.clock.now()
            record = {
                "token": token,
                "account": account_name,
                "issued_at": now,
                "expires_at": now + self.system.config.token_lifetime,
            }
            txn.put("tokens", token, record)
        return record

    def validate(self, token):
        with self.store.transaction() as txn:
            record = txn.get("tokens", token)
        if record is None:
            raise UnknownToken("token not recognized")
        if record["expires_at"] < self.clock.now():
            raise ExpiredToken("token expired")
        return record["account"]

    def authorize(self, account_name, action, scope=None) -> bool:
        account = self.get_account(account_name)
        scope_record = None
        if scope is not None:
            with self.store.transaction() as txn:
                scope_record = txn.get("scopes", scope)
        return bool(self.policy(account, action, scope_record))

    def is_privileged(self, account_name) -> bool:
        return bool(self.get_account(account_name).get("privileged"))

    # -- event log ---------------------------------------------------------------

    def emit(self, txn, event_type, payload):
        txn.emit(event_type, payload, self.clock.now())

    def create_cursor(self, name):
        with self.store.transaction() as txn:
            if txn.get("cursors", name) is None:
                txn.put("cursors", name, {"name": name, "position": 0})

    def drain(self, cursor, event_type=None, limit=None):
        """Events past the cursor's acked position, oldest first.

        At-least-once: the same events come back until ``ack`` advances the
        cursor.
        """
        with self.store.transaction() as txn:
            record = txn.get("cursors", cursor)
        if record is None:
            raise UnknownCursor(cursor)
        events = self.store.events_after(record["position"], event_type)
        if limit is not None:
            events = events[:limit]
        return events

    def ack(self, cursor, event_id):
        with self.store.transaction() as txn:
            record = txn.get("cursors", cursor)
            if record is None:
                raise UnknownCursor(cursor)
            old = record["position"]
            if event_id > old:
                txn.put("cursors", cursor, {"name": cursor, "position": event_id})
        if event_id > old:
            self.store.mark_delivered(old, event_id)

    # -- heartbeats and work partitioning ------------------------------------------

    def beat(self, daemon_kind, worker_id):
        with self.store.transaction() as txn:
            txn.put("heartbeats", f"{daemon_kind}|{worker_id}", {
                "daemon_kind": daemon_kind,
                "worker_id": worker_id,
                "last_beat": self.clock.now(),
            })

    def live_workers(self, daemon_kind):
        horizon = self.clock.now() - self.heartbeat_expiry
        with self.store.transaction() as txn:
            rows = [r for _, r in txn.scan("heartbeats")
                    if r["daemon_kind"] == daemon_kind and r["last_beat"] >= horizon]
        return sorted(r["worker_id"] for r in rows)

    def partition(self, daemon_kind, item_key):
        """The worker responsible for an item.

        All live workers of a kind compute the same assignment from the same
        heartbeat snapshot, so no two of them pick up the same item.
        """
        workers = self.live_workers(daemon_kind)
        if not workers:
            raise NoLiveWorkers(daemon_kind)
        return workers[stable_hash(item_key) % len(workers)]

    def owns(self, daemon_kind, worker_id, item_key) -> bool:
        return self.partition(daemon_kind, item_key) == worker_id

    # -- counters -----------------------------------------------------------------

    def count(self, name, delta=1):
        with self.store.transaction() as txn:
            record = txn.get("counters", name, {"value": 0})
            txn.put("counters", name, {"value": record["value"] + delta})

    def counters(self):
        with self.store.transaction() as txn:
            return {k: v["value"] for k, v in sorted(txn.scan("counters"))}

    # -- traces ---------------------------------------------------------------------

    def record_trace(self, trace):
        """Fire-and-forget access telemetry; malformed traces are dropped."""
        required = ("op", "scope", "name", "rse", "account", "status")
        if not isinstance(trace, dict) or any(k not in trace for k in required):
            self.count("traces.dropped")
            return False
        with self.store.transaction() as txn:
            seq = txn.next_id("traces")
            txn.put("traces", f"{seq:010d}", dict(trace, recorded_at=self.clock.now()))
        self.count("traces.recorded")
        at = trace.get("ended_at", self.clock.now())
        try:
            if trace["op"] == "download" and trace["status"] == "ok":
                self.system.storage.record_access(
                    trace["rse"], trace["scope"], trace["name"], at)
            elif trace["op"] == "download" and trace["status"] == "failed_checksum":
                self.count("traces.checksum_failures")
                self.system.auditor.declare_bad(
                    [(trace["rse"], trace["scope"], trace["name"])],
                    reason="CHECKSUM_MISMATCH", declarer="system")
        except Exception:
            # Telemetry must never bounce back to clients.
            self.count("traces.apply_errors")
        return True
