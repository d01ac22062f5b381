"""Catalog/storage consistency and bad-replica recovery.

Inconsistencies are found by comparing three sorted path dumps for one RSE:
the catalog at an earlier time T-D, storage at a historical time T, and the
catalog at a later time T+D. Membership across the three lists classifies
each path: present in all three is consistent; in both catalog dumps but
missing from storage is lost; only on storage is dark; every other
combination is transient churn still being signed off by its workflow.

Dark paths are queued for backend deletion, lost paths become bad replicas,
and the recovery daemon restores bad replicas from a surviving copy or,
when the last copy is gone, retires the file and notifies its owner.
"""

import heapq

from .errors import MissingDump, PermissionDenied, UnknownReplica, UnsortedDump
from .storage import AVAILABLE, BAD, COPYING, did_key, replica_key

CONSISTENT, LOST, DARK, TRANSIENT = "consistent", "lost", "dark", "transient"

_CATEGORY = {
    (True, True, True): CONSISTENT,
    (True, False, True): LOST,
    (False, True, False): DARK,
}

CHECKSUM_MISMATCH = "CHECKSUM_MISMATCH"
SOURCE_FAILURES = "SOURCE_FAILURES"
LOST_ON_STORAGE = "LOST_ON_STORAGE"
DECLARED = "DECLARED"

_REASONS = {CHECKSUM_MISMATCH, SOURCE_FAILURES, LOST_ON_STORAGE, DECLARED}
_INTERNAL_DECLARERS = {"system", "auditor"}


def _checked(paths, label):
    """Pass through a path iterator, enforcing strict ascending order."""
    previous = None
    for path in paths:
        if previous is not None and path <= previous:
            raise UnsortedDump(f"{label} dump not strictly sorted at {path!r}")
        previous = path
        yield path


def classify_stream(before, storage, after):
    """Three-way streaming merge; yields (path, category).

    Memory use is bounded by the merge frontier, never by the dump sizes.
    """
    if before is None or storage is None or after is None:
        raise MissingDump("three dumps are required")
    tagged = heapq.merge(
        ((p, 0) for p in _checked(before, "catalog-before")),
        ((p, 1) for p in _checked(storage, "storage")),
        ((p, 2) for p in _checked(after, "catalog-after")))
    current, members = None, [False, False, False]
    for path, tag in tagged:
        if path != current:
            if current is not None:
                yield current, _CATEGORY.get(tuple(members), TRANSIENT)
            current, members = path, [False, False, False]
        members[tag] = True
    if current is not None:
        yield current, _CATEGORY.get(tuple(members), TRANSIENT)


def classify(before, storage, after):
    """Collected classification: category -> sorted list of paths."""
    out = {CONSISTENT: [], LOST: [], DARK: [], TRANSIENT: []}
    for path, category in classify_stream(before, storage, after):
        out[category].append(path)
    return out


class Auditor:
    def __init__(self, system):
        self.system = system

    @property
    def store(self):
        return self.system.store

    @property
    def clock(self):
        return self.system.clock

    # -- acting on findings ---------------------------------------------------

    def apply_findings(self, rse_name, classification):
        """Queue dark paths for deletion and mark lost paths bad.

        Dark deletion is re-guarded against the live catalog at action time;
        there is no catalog row to remove, only the stray bytes.
        """
        queued = flagged = 0
        with self.store.transaction() as txn:
            for path in classification[DARK]:
                if txn.get("paths", f"{rse_name}|{path}") is not None:
                    continue
                seq = txn.next_id("dark")
                txn.put("dark_deletions", f"{seq:012d}",
                        {"rse": rse_name, "path": path})
                self.system.gateway.emit(txn, "deletion-queued", {
                    "rse": rse_name, "path": path, "dark": True})
                queued += 1
            lost = []
            for path in classification[LOST]:
                owner = txn.get("paths", f"{rse_name}|{path}")
                if owner is None:
                    continue
                scope, name = owner["did"].split(":", 1)
                if txn.get("replicas", replica_key(rse_name, scope, name)):
                    lost.append((rse_name, scope, name))
        if lost:
            flagged = self.declare_bad(lost, reason=LOST_ON_STORAGE,
                                       declarer="auditor")
        return {"dark_queued": queued, "lost_flagged": flagged}

    def run_audit(self, rse_name, storage_dump, before_dump, after_dump,
                  apply=False):
        classification = classify(before_dump, storage_dump, after_dump)
        report = {category: len(paths)
                  for category, paths in classification.items()}
        report["rse"] = rse_name
        if apply:
            report["actions"] = self.apply_findings(rse_name, classification)
        return report, classification

    # -- bad replicas -------------------------------------------------------------

    def declare_bad(self, replicas, reason, declarer):
        """Mark replicas unusable; they vanish from source ranking."""
        if reason not in _REASONS:
            raise PermissionDenied(f"unknown reason {reason!r}")
        if declarer not in _INTERNAL_DECLARERS and \
                not self.system.gateway.is_privileged(declarer):
            raise PermissionDenied(f"{declarer} may not declare bad replicas")
        count = 0
        with self.store.transaction() as txn:
            for rse, scope, name in replicas:
                rk = replica_key(rse, scope, name)
                replica = txn.get("replicas", rk)
                if replica is None:
                    raise UnknownReplica(rk)
                if replica["state"] == BAD:
                    continue
                txn.put("replicas", rk, dict(replica, state=BAD))
                self.system.gateway.emit(txn, "replica-bad", {
                    "rse": rse, "scope": scope, "name": name,
                    "reason": reason, "declared_by": declarer,
                    "at": self.clock.now()})
                count += 1
        return count

    def recover_bad(self, worker="0"):
        """One recovery pass over bad replicas this worker owns.

        A surviving copy elsewhere feeds a transfer back to the same RSE and
        path. A bad last copy is final: the file leaves its datasets, its
        locks are retired, and the owner is told.
        """
        gw = self.system.gateway
        gw.beat("recoverer", worker)
        recovered = lost = retried = 0
        with self.store.transaction() as txn:
            bad = sorted(k for k, r in txn.scan("replicas")
                         if r["state"] == BAD and not r.get("unrecoverable"))
        for key in bad:
            if gw.partition("recoverer", key) != worker:
                continue
            with self.store.transaction() as txn:
                replica = txn.get("replicas", key)
                if replica is None or replica["state"] != BAD:
                    continue
                scope, name = replica["scope"], replica["name"]
                sources = self.system.storage.replica_rses(
                    scope, name, txn, state=AVAILABLE)
                sources = [s for s in sources if s != replica["rse"]]
                if sources:
                    self._inject_recovery(txn, replica)
                    recovered += 1
                elif self.system.storage.replica_rses(scope, name, txn,
                                                      state=COPYING):
                    retried += 1  # a copy is in flight; look again next cycle
                else:
                    self._retire_last_copy(txn, replica)
                    lost += 1
        return {"recovering": recovered, "lost": lost, "waiting": retried}

    def _inject_recovery(self, txn, replica):
        rk = replica_key(replica["rse"], replica["scope"], replica["name"])
        txn.put("replicas", rk, dict(replica, state=COPYING))
        file_record = txn.get("dids",
                              did_key(replica["scope"], replica["name"]))
        self.system.transfer.create_request(
            txn, None, file_record, replica["rse"], activity="recovery")

    def _retire_last_copy(self, txn, replica):
        """The corrupt or vanished copy was the last one; the file is lost.

        The physical bytes go (best effort), the row stays as a bad marker
        so the name resolves to LOST rather than DELETED, and every lock on
        the file is retired: collection rules shrink with the detached file,
        rules directly on the file stay, permanently stuck and reported.
        """
        scope, name = replica["scope"], replica["name"]
        fk = did_key(scope, name)
        catalog = self.system.catalog
        backend = self.system.backends
        if backend.has(replica["rse"]):
            try:
                backend.get(replica["rse"]).delete(replica["path"])
            except Exception:
                pass
        detached_from = catalog.detach_everywhere(txn, scope, name)
        suffix = f"|{fk}"
        for lk, lock in txn.scan("locks"):
            if not lk.endswith(suffix) or lock["scope"] != scope \
                    or lock["name"] != name:
                continue
            rule = txn.get("rules", lock["rule_id"])
            if rule is None:
                txn.delete("locks", lk)
                continue
            rule = dict(rule)
            if rule["did"] == fk:
                if lock["state"] != "STUCK":
                    rule[_COUNTER[lock["state"]]] -= 1
                    rule["locks_stuck"] += 1
                    txn.put("locks", lk, dict(lock, state="STUCK",
                                              attempts=lock["attempts"] + 1))
                    txn.put("rules", rule["rule_id"], rule)
                self.system.rules._refresh_state(txn, rule)
            else:
                self.system.rules._drop_lock(txn, rule, lock)
                self.system.rules._refresh_state(txn, rule)
        for rse in self.system.storage.replica_rses(scope, name, txn):
            rk = replica_key(rse, scope, name)
            husk = txn.get("replicas", rk)
            if husk is not None and husk["state"] == BAD:
                txn.put("replicas", rk, dict(husk, unrecoverable=True))
        file_record = txn.get("dids", fk)
        self.system.gateway.emit(txn, "file-lost", {
            "scope": scope, "name": name,
            "account": file_record["account"] if file_record else None,
            "detached_from": detached_from, "rse": replica["rse"],
        })
        self.system.gateway.count("files.lost")


_COUNTER = {"OK": "locks_ok", "REPLICATING": "locks_replicating",
            "STUCK": "locks_stuck"}
