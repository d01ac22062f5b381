"""The replication rule engine.

A rule is declarative intent: keep `copies` replicas of every file of a DID
on RSEs matching an expression. The engine turns that intent into replica
locks and transfer requests, keeps per-account usage charged from the lock
table, reacts to attachment changes through the re-evaluation queue, and
repairs rules that transfers left stuck. Placement decisions are made once
and never revisited; re-running evaluation over an unchanged rule is a
no-op.
"""

import re

from . import expression
from .errors import (
    ChildRuleNotReady,
    InsufficientTargets,
    InvalidExpression,
    InvalidFilter,
    PermissionDenied,
    QuotaExceeded,
    ReplicatError,
    UnknownAccount,
    UnknownDid,
    UnknownRule,
)
from .storage import AVAILABLE, COPYING, did_key, replica_key

OK, REPLICATING, STUCK = "OK", "REPLICATING", "STUCK"

_MATCH_CURSOR = "subscription-matcher"


def lock_key(rule_id, rse, scope, name) -> str:
    return f"{rule_id}|{rse}|{scope}:{name}"


class RuleEngine:
    def __init__(self, system):
        self.system = system
        self.rng = system.rng_for("rules")

    @property
    def store(self):
        return self.system.store

    @property
    def clock(self):
        return self.system.clock

    @property
    def config(self):
        return self.system.config

    # -- candidate RSEs -------------------------------------------------------

    def _candidates(self, txn, rse_expression):
        """Write-usable RSEs matched by the expression, sorted by name.

        Rule-driven placement needs a derivable path, so only deterministic
        RSEs qualify as rule targets.
        """
        try:
            matched = expression.resolve(rse_expression,
                                         self.system.storage.registry(txn))
        except ReplicatError as exc:
            raise InvalidExpression(str(exc)) from exc
        out = []
        for name in sorted(matched):
            rse = txn.get("rses", name)
            if rse is None:
                continue
            if rse["availability"]["write"] and rse["protocols"] and \
                    rse["deterministic"]:
                out.append(name)
        return out

    def select_targets(self, txn, scope, name, candidates, copies,
                       weight_key=None):
        """Pick `copies` RSEs for one file.

        Candidates already holding an available replica come first (up to
        `copies`, minimizing transfers); the remainder is drawn randomly,
        uniformly or proportional to the numeric value of `weight_key`.
        RSEs without the weight attribute get weight zero and are never
        drawn.
        """
        if len(candidates) < copies:
            raise InsufficientTargets(
                f"{len(candidates)} candidates for {copies} copies")
        holders = [c for c in candidates
                   if self._replica_state(txn, c, scope, name) == AVAILABLE]
        chosen = holders[:copies]
        rest = [c for c in candidates if c not in chosen]
        missing = copies - len(chosen)
        if missing == 0:
            return chosen
        if weight_key is None:
            chosen += self.rng.sample(rest, missing)
            return chosen
        registry = self.system.storage.registry(txn)
        weighted = []
        for c in rest:
            try:
                w = float(registry[c].get(weight_key, 0))
            except (TypeError, ValueError):
                w = 0.0
            if w > 0:
                weighted.append([c, w])
        if len(weighted) < missing:
            raise InsufficientTargets(
                f"only {len(weighted)} candidates carry weight {weight_key!r}")
        for _ in range(missing):
            total = sum(w for _, w in weighted)
            pick = self.rng.random() * total
            acc = 0.0
            for i, (c, w) in enumerate(weighted):
                acc += w
                if pick <= acc:
                    chosen.append(c)
                    del weighted[i]
                    break
            else:
                chosen.append(weighted.pop()[0])
        return chosen

    def _replica_state(self, txn, rse, scope, name):
        replica = txn.get("replicas", replica_key(rse, scope, name))
        return replica["state"] if replica else None

    # -- rule creation -----------------------------------------------------------

    def add_rule(self, account, scope, name, copies, rse_expression,
                 lifetime=None, weight_key=None, grace_delay=None,
                 activity="user", subscription_id=None, parent_rule=None,
                 system_override=False):
        if copies < 1:
            raise InvalidExpression("copies must be at least 1")
        with self.store.transaction() as txn:
            if txn.get("accounts", account) is None:
                raise UnknownAccount(account)
            target = txn.get("dids", did_key(scope, name))
            if target is None:
                raise UnknownDid(did_key(scope, name))
            candidates = self._candidates(txn, rse_expression)
            if len(candidates) < copies:
                raise InsufficientTargets(
                    f"expression matches {len(candidates)} usable RSEs, "
                    f"need {copies}")
            files = self.system.catalog.list_files_in(txn, scope, name)
            now = self.clock.now()
            seq = txn.next_id("rules")
            rule = {
                "rule_id": f"{seq:010d}",
                "account": account,
                "did": did_key(scope, name),
                "scope": scope, "name": name,
                "copies": copies,
                "rse_expression": rse_expression,
                "weight_key": weight_key,
                "lifetime": lifetime,
                "expires_at": None if lifetime is None else now + lifetime,
                "grace_delay": self.config.default_grace_delay
                if grace_delay is None else grace_delay,
                "state": OK,
                "locks_ok": 0, "locks_replicating": 0, "locks_stuck": 0,
                "deficit": 0,
                "child_rule": None, "parent_rule": parent_rule,
                "subscription_id": subscription_id,
                "activity": activity,
                "created_at": now,
            }
            txn.put("rules", rule["rule_id"], rule)
            charged = {}
            for f in files:
                targets = self.select_targets(
                    txn, f["scope"], f["name"], candidates, copies, weight_key)
                for rse in targets:
                    self._create_lock(txn, rule, f, rse, charged)
            self._enforce_quota(txn, account, charged, system_override)
            index = txn.get("did_rules", rule["did"], {"rule_ids": []})
            txn.put("did_rules", rule["did"],
                    {"rule_ids": index["rule_ids"] + [rule["rule_id"]]})
            rule = self._refresh_state(txn, rule, notify=False)
            self.system.gateway.emit(txn, "rule-created", {
                "rule_id": rule["rule_id"], "account": account,
                "did": rule["did"], "copies": copies,
                "rse_expression": rse_expression, "state": rule["state"],
            })
            if rule["state"] == OK:
                self.system.gateway.emit(txn, "rule-ok",
                                         {"rule_id": rule["rule_id"],
                                          "did": rule["did"]})
        return rule

    def _create_lock(self, txn, rule, file_record, rse, charged,
                     make_request=True):
        """Create one lock, registering the replica and transfer if needed."""
        scope, name = file_record["scope"], file_record["name"]
        lk = lock_key(rule["rule_id"], rse, scope, name)
        if txn.get("locks", lk) is not None:
            return None
        replica = txn.get("replicas", replica_key(rse, scope, name))
        if replica is None:
            replica = self.system.storage.register_replica(
                txn, rse, scope, name, COPYING,
                file_record["bytes"], file_record["adler32"])
        state = OK if replica["state"] == AVAILABLE else REPLICATING
        lock = {
            "rule_id": rule["rule_id"], "rse": rse,
            "scope": scope, "name": name,
            "state": state, "attempts": 0, "retry_at": 0.0, "blocked": None,
        }
        if state == REPLICATING and make_request:
            self.system.transfer.create_request(
                txn, rule["rule_id"], file_record, rse, rule["activity"])
        txn.put("locks", lk, lock)
        replica = txn.get("replicas", replica_key(rse, scope, name))
        txn.put("replicas", replica_key(rse, scope, name),
                dict(replica, lock_count=replica["lock_count"] + 1,
                     tombstone=None))
        rule["locks_ok" if state == OK else "locks_replicating"] += 1
        txn.put("rules", rule["rule_id"], rule)
        self._charge(txn, rule["account"], rse, scope, name,
                     file_record["bytes"], +1, charged)
        return lock

    def _drop_lock(self, txn, rule, lock, tombstone_at=None):
        scope, name, rse = lock["scope"], lock["name"], lock["rse"]
        txn.delete("locks", lock_key(rule["rule_id"], rse, scope, name))
        rule[_COUNTER[lock["state"]]] -= 1
        txn.put("rules", rule["rule_id"], rule)
        self._charge(txn, rule["account"], rse, scope, name, None, -1, {})
        rk = replica_key(rse, scope, name)
        replica = txn.get("replicas", rk)
        if replica is None:
            return
        count = replica["lock_count"] - 1
        updated = dict(replica, lock_count=count)
        if count == 0 and tombstone_at is not None:
            updated["tombstone"] = tombstone_at
        txn.put("replicas", rk, updated)

    # -- quota ---------------------------------------------------------------------

    def _charge(self, txn, account, rse, scope, name, bytes_, delta, charged):
        """Adjust usage; an account is charged once per (rse, file) triple."""
        slot = f"{account}|{rse}|{scope}:{name}"
        record = txn.get("charge_index", slot, {"count": 0, "bytes": bytes_ or 0})
        count = record["count"] + delta
        size = record["bytes"] if bytes_ is None else bytes_
        usage_key = f"{account}|{rse}"
        usage = txn.get("account_usage", usage_key, {"bytes": 0})
        if record["count"] == 0 and count == 1:
            txn.put("account_usage", usage_key, {"bytes": usage["bytes"] + size})
            charged[rse] = charged.get(rse, 0) + size
        elif record["count"] == 1 and count == 0:
            txn.put("account_usage", usage_key, {"bytes": usage["bytes"] - size})
        if count <= 0:
            txn.delete("charge_index", slot)
        else:
            txn.put("charge_index", slot, {"count": count, "bytes": size})

    def _enforce_quota(self, txn, account, charged, system_override):
        """Post-charge check: roll the transaction back when limits trip."""
        record = txn.get("accounts", account)
        privileged = bool(record and record.get("privileged")) or system_override
        for rse in sorted(charged):
            limit_row = txn.get("account_limits", f"{account}|{rse}")
            usage = txn.get("account_usage", f"{account}|{rse}", {"bytes": 0})
            if limit_row is None:
                if not privileged:
                    raise QuotaExceeded(f"{account} has no quota on {rse}")
                continue
            if usage["bytes"] > limit_row["bytes"]:
                if not privileged:
                    raise QuotaExceeded(
                        f"{account} over quota on {rse}: "
                        f"{usage['bytes']} > {limit_row['bytes']}")
                self.system.gateway.emit(txn, "quota-override", {
                    "account": account, "rse": rse,
                    "used": usage["bytes"], "limit": limit_row["bytes"]})

    def _quota_ok(self, txn, account, charged):
        record = txn.get("accounts", account)
        if record and record.get("privileged"):
            return True
        for rse in charged:
            limit_row = txn.get("account_limits", f"{account}|{rse}")
            usage = txn.get("account_usage", f"{account}|{rse}", {"bytes": 0})
            if limit_row is None or usage["bytes"] > limit_row["bytes"]:
                return False
        return True

    def set_limit(self, account, rse, limit_bytes):
        with self.store.transaction() as txn:
            if txn.get("accounts", account) is None:
                raise UnknownAccount(account)
            self.system.storage.get_rse(rse, txn)
            txn.put("account_limits", f"{account}|{rse}",
                    {"account": account, "rse_name": rse, "bytes": limit_bytes})

    def account_usage(self, account, rse=None):
        with self.store.transaction() as txn:
            if txn.get("accounts", account) is None:
                raise UnknownAccount(account)
            limits = {k.split("|", 1)[1]: v["bytes"]
                      for k, v in txn.scan("account_limits")
                      if k.split("|", 1)[0] == account}
            usages = {k.split("|", 1)[1]: v["bytes"]
                      for k, v in txn.scan("account_usage")
                      if k.split("|", 1)[0] == account}
        rses = sorted(set(limits) | set(usages)) if rse is None else [rse]
        return [{"account": account, "rse_name": r,
                 "limit_bytes": limits.get(r),
                 "used_bytes": usages.get(r, 0)} for r in rses]

    def check_quota(self, account, rse, delta_bytes) -> bool:
        with self.store.transaction() as txn:
            record = txn.get("accounts", account)
            if record is None:
                raise UnknownAccount(account)
            if record.get("privileged"):
                return True
            limit_row = txn.get("account_limits", f"{account}|{rse}")
            if limit_row is None:
                return False
            usage = txn.get("account_usage", f"{account}|{rse}", {"bytes": 0})
            return usage["bytes"] + delta_bytes <= limit_row["bytes"]

    # -- lookups -----------------------------------------------------------------------

    def get_rule(self, rule_id):
        with self.store.transaction() as txn:
            rule = txn.get("rules", rule_id)
        if rule is None:
            raise UnknownRule(rule_id)
        return rule

    def list_rules(self, scope=None, name=None, account=None):
        with self.store.transaction() as txn:
            rows = [r for _, r in sorted(txn.scan("rules"))]
        if scope is not None and name is not None:
            key = did_key(scope, name)
            rows = [r for r in rows if r["did"] == key]
        if account is not None:
            rows = [r for r in rows if r["account"] == account]
        return rows

    def locks_of(self, rule_id, txn=None):
        prefix = f"{rule_id}|"
        if txn is not None:
            return [v for k, v in txn.scan("locks") if k.startswith(prefix)]
        with self.store.transaction() as t:
            return [v for k, v in t.scan("locks") if k.startswith(prefix)]

    # -- removal ------------------------------------------------------------------------

    def remove_rule(self, rule_id, account=None, purge_now=False,
                    internal=False):
        """Delete a rule; unprotected replicas get a timed deletion marker.

        The marker becomes eligible one grace delay in the future (or
        immediately for a privileged purge), leaving a window to undo the
        removal by placing a new rule.
        """
        with self.store.transaction() as txn:
            rule = txn.get("rules", rule_id)
            if rule is None:
                raise UnknownRule(rule_id)
            if not internal:
                if account is None:
                    raise PermissionDenied("an acting account is required")
                acting = txn.get("accounts", account)
                if acting is None:
                    raise UnknownAccount(account)
                privileged = acting.get("privileged", False)
                if rule["account"] != account and not privileged:
                    raise PermissionDenied(
                        f"{account} does not own rule {rule_id}")
                if purge_now and not privileged:
                    raise PermissionDenied("purge requires privilege")
            child_id = rule.get("child_rule")
            if child_id is not None:
                child = txn.get("rules", child_id)
                if child is not None and child["state"] != OK:
                    raise ChildRuleNotReady(
                        f"rule {rule_id} is pinned by child {child_id}")
            self._remove_rule_in(txn, rule, purge_now)
        return True

    def _remove_rule_in(self, txn, rule, purge_now):
        now = self.clock.now()
        eligible_at = now if purge_now else now + rule["grace_delay"]
        rule = dict(rule)
        for lock in self.locks_of(rule["rule_id"], txn):
            self._drop_lock(txn, rule, lock, tombstone_at=eligible_at)
        index = txn.get("did_rules", rule["did"], {"rule_ids": []})
        remaining = [r for r in index["rule_ids"] if r != rule["rule_id"]]
        if remaining:
            txn.put("did_rules", rule["did"], {"rule_ids": remaining})
        else:
            txn.delete("did_rules", rule["did"])
        parent_id = rule.get("parent_rule")
        if parent_id is not None:
            parent = txn.get("rules", parent_id)
            if parent is not None and parent.get("child_rule") == rule["rule_id"]:
                txn.put("rules", parent_id, dict(parent, child_rule=None))
        txn.delete("rules", rule["rule_id"])
        self.system.gateway.emit(txn, "rule-deleted", {
            "rule_id": rule["rule_id"], "did": rule["did"],
            "account": rule["account"], "purged": purge_now,
        })

    def link_child(self, txn, parent_id, child_id):
        parent = txn.get("rules", parent_id)
        txn.put("rules", parent_id, dict(parent, child_rule=child_id))

    # -- state transitions driven by transfers ----------------------------------------------

    def on_transfer_outcome(self, txn, request, outcome):
        """Apply a finished transfer to its lock and rule.

        Requests whose rule or lock vanished in flight are drained without
        effect (the replica itself is handled by the finisher).
        """
        rule_id = request.get("rule_id")
        if rule_id is None:
            return
        rule = txn.get("rules", rule_id)
        if rule is None:
            return
        lk = lock_key(rule_id, request["dest_rse"], request["scope"],
                      request["name"])
        lock = txn.get("locks", lk)
        if lock is None:
            return
        rule = dict(rule)
        if outcome == "DONE":
            if lock["state"] != OK:
                rule[_COUNTER[lock["state"]]] -= 1
                rule["locks_ok"] += 1
                txn.put("locks", lk, dict(lock, state=OK, blocked=None))
        else:
            if lock["state"] != STUCK:
                rule[_COUNTER[lock["state"]]] -= 1
                rule["locks_stuck"] += 1
            txn.put("locks", lk, dict(
                lock, state=STUCK,
                attempts=lock["attempts"] + 1,
                retry_at=self.clock.now() + self.config.retry_delay))
        txn.put("rules", rule_id, rule)
        self._refresh_state(txn, rule)

    def _refresh_state(self, txn, rule, notify=True):
        if rule["locks_stuck"] > 0 or rule["deficit"] > 0:
            state = STUCK
        elif rule["locks_replicating"] > 0:
            state = REPLICATING
        else:
            state = OK
        if state != rule["state"]:
            rule = dict(rule, state=state)
            txn.put("rules", rule["rule_id"], rule)
            if notify and state == OK:
                self.system.gateway.emit(txn, "rule-ok", {
                    "rule_id": rule["rule_id"], "did": rule["did"]})
            if notify and state == STUCK:
                self.system.gateway.emit(txn, "rule-stuck", {
                    "rule_id": rule["rule_id"], "did": rule["did"]})
        return rule

    # -- attachment re-evaluation --------------------------------------------------------------

    def evaluate_attachments(self, worker="0", limit=None):
        """Drain the re-evaluation queue left behind by attach/detach."""
        gw = self.system.gateway
        gw.beat("evaluator", worker)
        processed = 0
        with self.store.transaction() as txn:
            entries = sorted(txn.scan("reeval_queue"))
        for key, entry in entries:
            if limit is not None and processed >= limit:
                break
            if gw.partition("evaluator", key) != worker:
                continue
            with self.store.transaction() as txn:
                if txn.get("reeval_queue", key) is None:
                    continue
                self._apply_reevaluation(txn, entry)
                txn.delete("reeval_queue", key)
            processed += 1
        return processed

    def _apply_reevaluation(self, txn, entry):
        catalog = self.system.catalog
        rule_ids = catalog._rules_covering(txn, entry["parent"])
        if not rule_ids:
            return
        moved_files = []
        for child_key in entry["children"]:
            child = txn.get("dids", child_key)
            if child is None:
                continue
            moved_files.extend(
                catalog.list_files_in(txn, child["scope"], child["name"]))
        for rule_id in sorted(set(rule_ids)):
            rule = txn.get("rules", rule_id)
            if rule is None:
                continue
            if entry["removed"]:
                self._shrink_rule(txn, dict(rule), moved_files)
            else:
                self._extend_rule(txn, dict(rule), moved_files)

    def _extend_rule(self, txn, rule, files):
        """Cover newly attached files, as add_rule would have.

        Quota shortfall or a thin candidate set never bounces back to the
        caller that attached; the rule goes STUCK (with the locks charged,
        or a recorded deficit) and the repair daemon picks it up.
        """
        existing = {(l["scope"], l["name"]) for l in
                    self.locks_of(rule["rule_id"], txn)}
        current = {did_key(f["scope"], f["name"]) for f in
                   self.system.catalog.list_files_in(
                       txn, rule["scope"], rule["name"])}
        new_files = [f for f in files
                     if (f["scope"], f["name"]) not in existing
                     and did_key(f["scope"], f["name"]) in current]
        if not new_files:
            return
        try:
            candidates = self._candidates(txn, rule["rse_expression"])
        except InvalidExpression:
            candidates = []
        charged = {}
        planned = []
        deficit = 0
        for f in new_files:
            try:
                targets = self.select_targets(
                    txn, f["scope"], f["name"], candidates, rule["copies"],
                    rule["weight_key"])
            except InsufficientTargets:
                usable = min(len(candidates), rule["copies"])
                targets = self.select_targets(
                    txn, f["scope"], f["name"], candidates, usable,
                    rule["weight_key"]) if usable else []
                deficit += rule["copies"] - len(targets)
            planned.append((f, targets))
        quota_ok = self._plan_quota_ok(txn, rule, planned)
        for f, targets in planned:
            for rse in targets:
                lock = self._create_lock(txn, rule, f, rse, charged,
                                         make_request=quota_ok)
                if lock is not None and not quota_ok:
                    self._block_lock(txn, rule, lock)
        if deficit:
            rule["deficit"] += deficit
            txn.put("rules", rule["rule_id"], rule)
        self._refresh_state(txn, rule)
    def _plan_quota_ok(self, txn, rule, planned):
        projected = {}
        for f, targets in planned:
            for rse in targets:
                slot = f"{rule['account']}|{rse}|{f['scope']}:{f['name']}"
                if txn.get("charge_index", slot) is None:
                    projected[rse] = projected.get(rse, 0) + f["bytes"]
        account = txn.get("accounts", rule["account"])
        if account and account.get("privileged"):
            return True
        for rse, delta in projected.items():
            limit_row = txn.get("account_limits", f"{rule['account']}|{rse}")
            if limit_row is None:
                return False
            usage = txn.get("account_usage", f"{rule['account']}|{rse}",
                            {"bytes": 0})
            if usage["bytes"] + delta > limit_row["bytes"]:
                return False
        return True

    def _block_lock(self, txn, rule, lock):
        lk = lock_key(rule["rule_id"], lock["rse"], lock["scope"],
                      lock["name"])
        current = txn.get("locks", lk)
        if current["state"] == REPLICATING:
            txn.put("locks", lk, dict(current, state=STUCK, blocked="quota"))
            rule["locks_replicating"] -= 1
            rule["locks_stuck"] += 1
            txn.put("rules", rule["rule_id"], rule)

    def _shrink_rule(self, txn, rule, files):
        """Drop locks for files that left the rule's closure."""
        current = {did_key(f["scope"], f["name"]) for f in
                   self.system.catalog.list_files_in(
                       txn, rule["scope"], rule["name"])}
        gone = {did_key(f["scope"], f["name"]) for f in files} - current
        if not gone:
            return
        eligible_at = self.clock.now() + rule["grace_delay"]
        for lock in self.locks_of(rule["rule_id"], txn):
            if did_key(lock["scope"], lock["name"]) in gone:
                self._drop_lock(txn, rule, lock, tombstone_at=eligible_at)
        self._refresh_state(txn, rule)

    # -- repair --------------------------------------------------------------------------------

    def repair_stuck(self, worker="0"):
        """One pass of the rule repairer over stuck rules it owns.

        Per stuck lock: retry the same destination while attempts remain,
        then move the lock to an unused alternative from the expression, or
        leave it stuck (reported). Quota-blocked locks wait for headroom.
        """
        gw = self.system.gateway
        gw.beat("repairer", worker)
        repaired = unrepairable = 0
        with self.store.transaction() as txn:
            stuck_ids = sorted(
                rid for rid, r in txn.scan("rules") if r["state"] == STUCK)
        for rule_id in stuck_ids:
            if gw.partition("repairer", rule_id) != worker:
                continue
            with self.store.transaction() as txn:
                rule = txn.get("rules", rule_id)
                if rule is None or rule["state"] != STUCK:
                    continue
                r, u = self._repair_rule(txn, dict(rule))
                repaired += r
                unrepairable += u
        return {"repaired": repaired, "unrepairable": unrepairable}

    def _repair_rule(self, txn, rule):
        now = self.clock.now()
        repaired = unrepairable = 0
        files = {did_key(f["scope"], f["name"]): f for f in
                 self.system.catalog.list_files_in(
                     txn, rule["scope"], rule["name"])}
        locks = self.locks_of(rule["rule_id"], txn)
        locks_by_file = {}
        for lock in locks:
            locks_by_file.setdefault(
                did_key(lock["scope"], lock["name"]), []).append(lock)
        try:
            candidates = self._candidates(txn, rule["rse_expression"])
        except InvalidExpression:
            candidates = []
        for lock in locks:
            if lock["state"] != STUCK:
                continue
            fk = did_key(lock["scope"], lock["name"])
            file_record = files.get(fk)
            if file_record is None:
                continue
            if lock["blocked"] == "quota":
                if self._quota_ok(txn, rule["account"], [lock["rse"]]):
                    self._revive_lock(txn, rule, lock, file_record)
                    repaired += 1
                else:
                    unrepairable += 1
                continue
            if now < lock["retry_at"]:
                continue
            if lock["attempts"] < self.config.max_transfer_retries:
                self._revive_lock(txn, rule, lock, file_record)
                repaired += 1
                continue
            used = {l["rse"] for l in locks_by_file.get(fk, [])}
            alternatives = [c for c in candidates if c not in used]
            if not alternatives:
                unrepairable += 1
                continue
            self._move_lock(txn, rule, lock, file_record, alternatives)
            repaired += 1
        if rule["deficit"] > 0 and candidates:
            self._fill_deficit(txn, rule, files, locks_by_file, candidates)
        self._refresh_state(txn, rule)
        return repaired, unrepairable

    def _revive_lock(self, txn, rule, lock, file_record):
        lk = lock_key(rule["rule_id"], lock["rse"], lock["scope"],
                      lock["name"])
        rk = replica_key(lock["rse"], lock["scope"], lock["name"])
        replica = txn.get("replicas", rk)
        if replica is not None and replica["state"] != AVAILABLE:
            txn.put("replicas", rk, dict(replica, state=COPYING))
            self.system.transfer.create_request(
                txn, rule["rule_id"], file_record, lock["rse"],
                rule["activity"])
            new_state = REPLICATING
        elif replica is None:
            self.system.storage.register_replica(
                txn, lock["rse"], lock["scope"], lock["name"], COPYING,
                file_record["bytes"], file_record["adler32"])
            replica = txn.get("replicas", rk)
            txn.put("replicas", rk,
                    dict(replica, lock_count=replica["lock_count"] + 1))
            self.system.transfer.create_request(
                txn, rule["rule_id"], file_record, lock["rse"],
                rule["activity"])
            new_state = REPLICATING
        else:
            new_state = OK
        txn.put("locks", lk, dict(lock, state=new_state, blocked=None))
        rule["locks_stuck"] -= 1
        rule[_COUNTER[new_state]] += 1
        txn.put("rules", rule["rule_id"], rule)

    def _move_lock(self, txn, rule, lock, file_record, alternatives):
        """Give up on a destination and move the lock elsewhere."""
        self._drop_lock(txn, rule, lock, tombstone_at=self.clock.now())
        target = self.select_targets(
            txn, lock["scope"], lock["name"], alternatives, 1,
            rule["weight_key"])[0]
        self._create_lock(txn, rule, file_record, target, {})

    def _fill_deficit(self, txn, rule, files, locks_by_file, candidates):
        for fk, file_record in sorted(files.items()):
            if rule["deficit"] <= 0:
                break
            used = {l["rse"] for l in locks_by_file.get(fk, [])}
            missing = rule["copies"] - len(used)
            if missing <= 0:
                continue
            unused = [c for c in candidates if c not in used]
            take = min(missing, len(unused), rule["deficit"])
            if take <= 0:
                continue
            targets = self.select_targets(
                txn, file_record["scope"], file_record["name"], unused, take,
                rule["weight_key"])
            for rse in targets:
                self._create_lock(txn, rule, file_record, rse, {})
                rule["deficit"] -= 1
            txn.put("rules", rule["rule_id"], rule)

    # -- subscriptions ----------------------------------------------------------------------------

    def add_subscription(self, account, filter_spec, rule_templates):
        filter_spec = dict(filter_spec)
        for field in ("scope_pattern", "name_pattern"):
            pattern = filter_spec.setdefault(field, ".*")
            try:
                re.compile(pattern)
            except re.error as exc:
                raise InvalidFilter(f"bad {field}: {exc}") from exc
        filter_spec.setdefault("metadata_matches", {})
        if not rule_templates:
            raise InvalidFilter("at least one rule template is required")
        templates = []
        for template in rule_templates:
            try:
                expression.parse(template["rse_expression"])
            except ReplicatError as exc:
                raise InvalidExpression(str(exc)) from exc
            templates.append({
                "rse_expression": template["rse_expression"],
                "copies": int(template.get("copies", 1)),
                "lifetime": template.get("lifetime"),
            })
        with self.store.transaction() as txn:
            if txn.get("accounts", account) is None:
                raise UnknownAccount(account)
            seq = txn.next_id("subscriptions")
            sub = {
                "sub_id": f"{seq:08d}", "account": account,
                "filter": filter_spec, "rule_templates": templates,
                "enabled": True, "created_at": self.clock.now(),
            }
            txn.put("subscriptions", sub["sub_id"], sub)
        return sub

    def list_subscriptions(self):
        with self.store.transaction() as txn:
            return [s for _, s in sorted(txn.scan("subscriptions"))]

    def set_subscription_enabled(self, sub_id, enabled):
        with self.store.transaction() as txn:
            sub = txn.get("subscriptions", sub_id)
            if sub is None:
                raise UnknownRule(sub_id)
            txn.put("subscriptions", sub_id, dict(sub, enabled=bool(enabled)))

    @staticmethod
    def _filter_matches(filter_spec, event_payload):
        if not re.fullmatch(filter_spec["scope_pattern"], event_payload["scope"]):
            return False
        if not re.fullmatch(filter_spec["name_pattern"], event_payload["name"]):
            return False
        metadata = event_payload.get("metadata", {})
        return all(metadata.get(k) == v
                   for k, v in filter_spec["metadata_matches"].items())

    def match_subscriptions(self, worker="0", limit=None):
        """Turn new-DID events into templated rules, at most once per pair."""
        gw = self.system.gateway
        gw.beat("matcher", worker)
        gw.create_cursor(_MATCH_CURSOR)
        events = gw.drain(_MATCH_CURSOR, event_type="did-created", limit=limit)
        created = []
        with self.store.transaction() as txn:
            subs = [s for _, s in sorted(txn.scan("subscriptions"))
                    if s["enabled"]]
        for event in events:
            payload = event["payload"]
            key = did_key(payload["scope"], payload["name"])
            for sub in subs:
                if not self._filter_matches(sub["filter"], payload):
                    continue
                pair = f"{sub['sub_id']}|{key}"
                with self.store.transaction() as txn:
                    if txn.get("sub_matches", pair) is not None:
                        continue
                    txn.put("sub_matches", pair, {"at": self.clock.now()})
                    for template in sub["rule_templates"]:
                        try:
                            rule = self.add_rule(
                                sub["account"], payload["scope"],
                                payload["name"], template["copies"],
                                template["rse_expression"],
                                lifetime=template["lifetime"],
                                activity="subscription",
                                subscription_id=sub["sub_id"])
                            created.append(rule["rule_id"])
                        except ReplicatError as exc:
                            self.system.gateway.emit(
                                txn, "subscription-rule-failed", {
                                    "sub_id": sub["sub_id"], "did": key,
                                    "error": exc.code, "message": str(exc)})
        if events:
            gw.ack(_MATCH_CURSOR, events[-1]["event_id"])
        return created


_COUNTER = {OK: "locks_ok", REPLICATING: "locks_replicating",
            STUCK: "locks_stuck"}
