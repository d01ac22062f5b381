"""Global consistency checks, each recomputed from first principles.

Simulations sweep these every clock tick; they deliberately avoid the
incremental bookkeeping they verify (counters are recounted from the lock
table, usage is recomputed from scratch, transitions are audited from the
log).
"""

from .storage import AVAILABLE, did_key, replica_key
from .transfer import EDGES


def lock_protection(system):
    """No lock may point at a missing replica; locked replicas are never
    tombstoned, and locked available replicas must exist on the backend."""
    violations = []
    with system.store.transaction() as txn:
        recount = {}
        for lk, lock in txn.scan("locks"):
            rk = replica_key(lock["rse"], lock["scope"], lock["name"])
            recount[rk] = recount.get(rk, 0) + 1
            replica = txn.get("replicas", rk)
            if replica is None:
                violations.append(f"lock {lk} points at missing replica")
                continue
            if replica["lock_count"] < 1:
                violations.append(f"replica {rk} locked but lock_count=0")
            if replica["tombstone"] is not None:
                violations.append(f"replica {rk} locked and tombstoned")
            if replica["state"] == AVAILABLE and \
                    system.backends.has(lock["rse"]) and \
                    not system.backends.get(lock["rse"]).exists(replica["path"]):
                violations.append(f"locked replica {rk} missing on backend")
        for rk, replica in txn.scan("replicas"):
            actual = recount.get(rk, 0)
            if actual != replica["lock_count"]:
                violations.append(
                    f"replica {rk} lock_count={replica['lock_count']} "
                    f"actual={actual}")
    return violations


def counter_consistency(system):
    """Rule counters match a lock recount and cover copies x files."""
    violations = []
    with system.store.transaction() as txn:
        per_rule = {}
        for _, lock in txn.scan("locks"):
            counts = per_rule.setdefault(lock["rule_id"],
                                         {"OK": 0, "REPLICATING": 0, "STUCK": 0})
            counts[lock["state"]] += 1
        for rule_id, rule in txn.scan("rules"):
            counts = per_rule.get(rule_id,
                                  {"OK": 0, "REPLICATING": 0, "STUCK": 0})
            stored = (rule["locks_ok"], rule["locks_replicating"],
                      rule["locks_stuck"])
            if stored != (counts["OK"], counts["REPLICATING"], counts["STUCK"]):
                violations.append(
                    f"rule {rule_id} counters {stored} != recount "
                    f"({counts['OK']}, {counts['REPLICATING']}, {counts['STUCK']})")
            scope, name = rule["did"].split(":", 1)
            if txn.get("dids", rule["did"]) is None:
                continue
            files = system.catalog.list_files_in(txn, scope, name)
            expected = rule["copies"] * len(files)
            total = sum(counts.values()) + rule["deficit"]
            if total != expected:
                violations.append(
                    f"rule {rule_id} locks+deficit {total} != "
                    f"copies*files {expected}")
            state = rule["state"]
            if state == "OK" and (counts["REPLICATING"] or counts["STUCK"]
                                  or rule["deficit"]):
                violations.append(f"rule {rule_id} OK with unfinished locks")
    return violations


def state_machine_soundness(system):
    """Every logged request transition is an edge of the state machine."""
    violations = []
    with system.store.transaction() as txn:
        entries = sorted(txn.scan("request_log"))
    for _, entry in entries:
        if (entry["from"], entry["to"]) not in EDGES:
            violations.append(
                f"request {entry['request_id']}: illegal "
                f"{entry['from']} -> {entry['to']}")
    return violations


def quota_accounting(system):
    """Maintained usage equals a from-scratch recount of the lock table."""
    violations = []
    with system.store.transaction() as txn:
        rules = {rid: r for rid, r in txn.scan("rules")}
        recomputed = {}
        for _, lock in txn.scan("locks"):
            rule = rules.get(lock["rule_id"])
            if rule is None:
                continue
            fk = did_key(lock["scope"], lock["name"])
            triple = (rule["account"], lock["rse"], fk)
            if triple in recomputed:
                continue
            replica = txn.get("replicas",
                              replica_key(lock["rse"], lock["scope"],
                                          lock["name"]))
            recomputed[triple] = replica["bytes"] if replica else 0
        expected = {}
        for (account, rse, _), size in recomputed.items():
            key = f"{account}|{rse}"
            expected[key] = expected.get(key, 0) + size
        stored = {k: v["bytes"] for k, v in txn.scan("account_usage")
                  if v["bytes"] != 0}
        expected = {k: v for k, v in expected.items() if v != 0}
        if stored != expected:
            violations.append(f"usage {stored} != recomputed {expected}")
    return violations


def tombstone_validity(system):
    violations = []
    with system.store.transaction() as txn:
        for rk, replica in txn.scan("replicas"):
            if replica["tombstone"] is not None and replica["lock_count"] > 0:
                violations.append(f"replica {rk} tombstoned while locked")
    return violations


ALL_CHECKS = {
    "lock_protection": lock_protection,
    "counter_consistency": counter_consistency,
    "state_machine_soundness": state_machine_soundness,
    "quota_accounting": quota_accounting,
    "tombstone_validity": tombstone_validity,
}


def check_all(system):
    return {name: check(system) for name, check in ALL_CHECKS.items()}
