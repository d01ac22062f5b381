"""Expiration and deletion.

Rules with a lifetime are removed when it runs out; replicas left without
any lock get a timed deletion marker. The reaper then clears marked
replicas per RSE in one of two modes: greedy (delete as soon as eligible,
maximizing free space) or threshold-driven (delete the minimal least
recently used prefix needed to restore the configured free-space floor,
keeping the rest around as a cache). Recently accessed replicas survive
threshold deletion for a configurable popularity window.
"""

from .errors import DeletionDisabled, ReplicatError
from .storage import replica_key


class Reaper:
    def __init__(self, system):
        self.system = system

    @property
    def store(self):
        return self.system.store

    @property
    def clock(self):
        return self.system.clock

    def expire_rules(self, worker="0"):
        """Remove rules whose lifetime ran out; grace applies to markers."""
        gw = self.system.gateway
        gw.beat("expirer", worker)
        now = self.clock.now()
        with self.store.transaction() as txn:
            expired = sorted(
                rid for rid, r in txn.scan("rules")
                if r["expires_at"] is not None and r["expires_at"] <= now)
        removed = 0
        for rule_id in expired:
            if gw.partition("expirer", rule_id) != worker:
                continue
            with self.store.transaction() as txn:
                rule = txn.get("rules", rule_id)
                if rule is None or rule["expires_at"] > now:
                    continue
                child_id = rule.get("child_rule")
                if child_id is not None:
                    child = txn.get("rules", child_id)
                    if child is not None and child["state"] != "OK":
                        continue  # pinned by an unfinished rebalance move
                self.system.rules._remove_rule_in(txn, dict(rule),
                                                  purge_now=False)
                removed += 1
        return removed

    def reap(self, rse_name, worker="0", mode=None):
        """Delete unprotected, eligible replicas on one RSE.

        One logical reaper owns an RSE at a time; the lock count is
        re-checked inside each deletion transaction.
        """
        gw = self.system.gateway
        gw.beat("reaper", worker)
        if gw.partition("reaper", rse_name) != worker:
            return 0
        storage = self.system.storage
        rse = storage.get_rse(rse_name)
        if not rse["deletion_enabled"]:
            raise DeletionDisabled(rse_name)
        greedy = rse["greedy"] if mode is None else (mode == "greedy")
        now = self.clock.now()
        with self.store.transaction() as txn:
            candidates = [
                r for r in storage.rse_replicas(txn, rse_name)
                if r["tombstone"] is not None and r["tombstone"] <= now
                and r["lock_count"] == 0]
        if greedy:
            victims = sorted(candidates,
                             key=lambda r: (r["scope"], r["name"]))
            needed = None
        else:
            limits = rse["limits"]
            capacity = limits["total_capacity"]
            min_free = limits["min_free_space"]
            if capacity is None:
                return 0
            free = capacity - storage.used_bytes(rse_name)
            if free >= min_free:
                return 0
            needed = min_free - free
            window = self.system.config.popularity_window
            victims = sorted(
                (r for r in candidates if r["accessed_at"] <= now - window),
                key=lambda r: (r["accessed_at"], r["scope"], r["name"]))
        deleted = 0
        freed = 0
        for victim in victims:
            if needed is not None and freed >= needed:
                break
            if self._delete_replica(rse_name, victim):
                deleted += 1
                freed += victim["bytes"]
        return deleted

    def _delete_replica(self, rse_name, victim) -> bool:
        scope, name = victim["scope"], victim["name"]
        backend = self.system.backends.get(rse_name)
        with self.store.transaction() as txn:
            replica = txn.get("replicas", replica_key(rse_name, scope, name))
            if replica is None or replica["lock_count"] > 0 or \
                    replica["tombstone"] is None:
                return False
            try:
                backend.delete(replica["path"])
            except ReplicatError as exc:
                if exc.code != "NotFound":
                    self.system.gateway.emit(txn, "deletion-failed", {
                        "rse": rse_name, "scope": scope, "name": name,
                        "error": exc.code})
                    self.system.gateway.count("deletions.failed")
                    return False
            self.system.storage.drop_replica(txn, rse_name, scope, name)
            self.system.gateway.emit(txn, "deletion-done", {
                "rse": rse_name, "scope": scope, "name": name,
                "bytes": replica["bytes"]})
            self.system.gateway.count("deletions.done")
        return True

    def reap_all(self, worker="0"):
        """One cycle over every deletion-enabled RSE."""
        total = 0
        for rse in self.system.storage.list_rses():
            if not rse["deletion_enabled"]:
                continue
            if not self.system.backends.has(rse["rse_name"]):
                continue
            total += self.reap(rse["rse_name"], worker)
            total += self.process_dark(rse["rse_name"], worker)
        return total

    def process_dark(self, rse_name, worker="0"):
        """Delete storage-only (dark) paths queued by the auditor."""
        gw = self.system.gateway
        gw.beat("reaper", worker)
        if gw.partition("reaper", rse_name) != worker:
            return 0
        backend = self.system.backends.get(rse_name)
        with self.store.transaction() as txn:
            entries = sorted(
                (k, e) for k, e in txn.scan("dark_deletions")
                if e["rse"] == rse_name)
        deleted = 0
        for key, entry in entries:
            with self.store.transaction() as txn:
                if txn.get("dark_deletions", key) is None:
                    continue
                if txn.get("paths", f"{rse_name}|{entry['path']}") is not None:
                    # The path got registered since the audit; not dark.
                    txn.delete("dark_deletions", key)
                    continue
                try:
                    backend.delete(entry["path"])
                except ReplicatError as exc:
                    if exc.code != "NotFound":
                        self.system.gateway.emit(txn, "deletion-failed", {
                            "rse": rse_name, "path": entry["path"],
                            "error": exc.code, "dark": True})
                        continue
                txn.delete("dark_deletions", key)
                self.system.gateway.emit(txn, "deletion-done", {
                    "rse": rse_name, "path": entry["path"], "dark": True})
                self.system.gateway.count("deletions.dark")
                deleted += 1
        return deleted
