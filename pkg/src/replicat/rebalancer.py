"""Moving rule-protected data between RSEs.

Three modes share one mechanism: a selected rule gets a child rule at the
new destination, the two are linked, and only when the child has fully
replicated is the original removed, releasing the old copies. Background
mode equalizes the share of lifetime-less (primary) bytes across a set of
RSEs; decommissioning drains everything off one RSE following each rule's
own expression; manual mode moves an operator-chosen volume.
"""

from . import expression
from .errors import (
    InsufficientTargets,
    InvalidVolume,
    NotFoundError,
    QuotaExceeded,
    ReplicatError,
    RseWriteEnabled,
    UnknownRse,
)

BACKGROUND, DECOMMISSION, MANUAL = "BACKGROUND", "DECOMMISSION", "MANUAL"
ACTIVE, COMPLETE = "ACTIVE", "COMPLETE"

_DAY = 86400.0


class Rebalancer:
    def __init__(self, system):
        self.system = system

    @property
    def store(self):
        return self.system.store

    @property
    def clock(self):
        return self.system.clock

    # -- shared helpers ---------------------------------------------------------

    def _ratios(self, txn, rse_names):
        """Primary share of locked bytes per RSE: primary / (primary+secondary).

        A replica counts as primary when at least one lifetime-less rule
        locks it. RSEs with no locked bytes sit at ratio 0.
        """
        primary = {r: 0 for r in rse_names}
        secondary = {r: 0 for r in rse_names}
        rules = {rid: r for rid, r in txn.scan("rules")}
        seen = {}
        for _, lock in txn.scan("locks"):
            rse = lock["rse"]
            if rse not in primary:
                continue
            rule = rules.get(lock["rule_id"])
            if rule is None:
                continue
            fk = (rse, lock["scope"], lock["name"])
            is_primary = rule["lifetime"] is None
            seen[fk] = seen.get(fk, False) or is_primary
        for (rse, scope, name), is_primary in seen.items():
            replica = txn.get("replicas", f"{rse}|{scope}:{name}")
            size = replica["bytes"] if replica else 0
            if is_primary:
                primary[rse] += size
            else:
                secondary[rse] += size
        ratios = {}
        for rse in rse_names:
            total = primary[rse] + secondary[rse]
            ratios[rse] = primary[rse] / total if total else 0.0
        return ratios, primary, secondary

    def _rule_bytes_on(self, txn, rule_id, rse):
        total = files = 0
        prefix = f"{rule_id}|{rse}|"
        for lk, lock in txn.scan("locks"):
            if lk.startswith(prefix):
                replica = txn.get("replicas",
                                  f"{rse}|{lock['scope']}:{lock['name']}")
                if replica:
                    total += replica["bytes"]
                    files += 1
        return total, files

    def _movable_rules(self, txn, source):
        """Single-copy, lifetime-less, unlinked rules with locks on source,
        oldest and least recently used first."""
        with_locks = {}
        for lk, lock in txn.scan("locks"):
            if lock["rse"] == source:
                entry = with_locks.setdefault(lock["rule_id"], [])
                entry.append(lock)
        out = []
        for rule_id, locks in with_locks.items():
            rule = txn.get("rules", rule_id)
            if rule is None or rule["lifetime"] is not None:
                continue
            if rule["copies"] != 1 or rule["child_rule"] is not None:
                continue
            if rule["state"] != "OK":
                continue
            accessed = []
            for lock in locks:
                replica = txn.get(
                    "replicas", f"{source}|{lock['scope']}:{lock['name']}")
                if replica:
                    accessed.append(replica["accessed_at"])
            out.append((rule["created_at"], min(accessed, default=0.0),
                        rule_id))
        return [rule_id for _, _, rule_id in sorted(out)]

    def _clone_rule(self, txn, rule, target_expression):
        child = self.system.rules.add_rule(
            rule["account"], rule["scope"], rule["name"], rule["copies"],
            target_expression, lifetime=rule["lifetime"],
            grace_delay=rule["grace_delay"],
            activity=self.system.config.rebalance_activity,
            parent_rule=rule["rule_id"], system_override=True)
        self.system.rules.link_child(txn, rule["rule_id"], child["rule_id"])
        return child

    def _new_campaign(self, txn, mode, source_rse, **extra):
        seq = txn.next_id("campaigns")
        campaign = {
            "campaign_id": f"{seq:08d}", "mode": mode,
            "source_rse": source_rse, "state": ACTIVE,
            "pairs": [], "unsatisfiable": [],
            "scheduled_bytes": 0, "scheduled_files": 0,
            "shortfall_bytes": 0,
            "activity": self.system.config.rebalance_activity,
            "created_at": self.clock.now(),
            "volume_limit": None, "files_limit": None,
            "day_bytes": {}, "day_files": {},
        }
        campaign.update(extra)
        txn.put("campaigns", campaign["campaign_id"], campaign)
        return campaign

    # -- background mode ------------------------------------------------------------

    def background_cycle(self, rse_names, volume_limit=None, files_limit=None):
        """Move primary data from RSEs above the average share to those below.

        Respects per-day volume and file caps; returns the campaigns created
        (possibly none when nothing is eligible).
        """
        if len(rse_names) < 2:
            raise UnknownRse("background rebalancing needs at least two RSEs")
        campaigns = []
        with self.store.transaction() as txn:
            for name in rse_names:
                if txn.get("rses", name) is None:
                    raise UnknownRse(name)
            ratios, primary, secondary = self._ratios(txn, rse_names)
            average = sum(ratios.values()) / len(rse_names)
            below = sorted((r for r in rse_names if ratios[r] < average),
                           key=lambda r: (ratios[r], r))
            above = sorted((r for r in rse_names if ratios[r] > average),
                           key=lambda r: (-ratios[r], r))
            for source in above:
                campaign = self._drain_source(
                    txn, source, below, ratios, primary, secondary,
                    volume_limit, files_limit, stop_at_average=average)
                if campaign is not None:
                    campaigns.append(campaign)
        return campaigns

    @staticmethod
    def _share(p, s):
        return p / (p + s) if p + s > 0 else 0.0

    def _drain_source(self, txn, source, below, ratios, primary, secondary,
                      volume_limit, files_limit, stop_at_average=None,
                      target_volume=None):
        registry = self.system.storage.registry(txn)
        day = int(self.clock.now() // _DAY)
        campaign = None
        moved_bytes = moved_files = 0
        primary = dict(primary)
        for rule_id in self._movable_rules(txn, source):
            if target_volume is not None and moved_bytes >= target_volume:
                break
            rule = txn.get("rules", rule_id)
            rule_bytes, rule_files = self._rule_bytes_on(txn, rule_id, source)
            src_gain = 0.0
            if stop_at_average is not None:
                # The move may not push the source away from the average.
                cur = abs(self._share(primary[source], secondary[source])
                          - stop_at_average)
                new = abs(self._share(primary[source] - rule_bytes,
                                      secondary[source]) - stop_at_average)
                if new > cur + 1e-12:
                    continue
                src_gain = cur - new
            try:
                matched = expression.resolve(rule["rse_expression"], registry)
            except ReplicatError:
                continue
            locked = {l["rse"] for l in
                      self.system.rules.locks_of(rule_id, txn)}
            dests = [r for r in below
                     if r in matched and r != source and r not in locked]
            if stop_at_average is not None:
                # Same on the receiving side, and at least one endpoint
                # must strictly improve or the move is pointless churn.
                def endpoint_gain(r):
                    cur = abs(self._share(primary[r], secondary[r])
                              - stop_at_average)
                    new = abs(self._share(primary[r] + rule_bytes,
                                          secondary[r]) - stop_at_average)
                    return cur - new
                dests = [r for r in dests
                         if endpoint_gain(r) > -1e-12
                         and (endpoint_gain(r) > 1e-12
                              or src_gain > 1e-12)]
            if not dests:
                continue
            if volume_limit is not None and \
                    moved_bytes + rule_bytes > volume_limit:
                break
            if files_limit is not None and \
                    moved_files + rule_files > files_limit:
                break
            destination = min(
                dests, key=lambda r: (self._share(primary[r], secondary[r]),
                                      r))
            if campaign is None:
                campaign = self._new_campaign(
                    txn, BACKGROUND if target_volume is None else MANUAL,
                    source, volume_limit=volume_limit,
                    files_limit=files_limit)
            try:
                child = self._clone_rule(txn, rule, destination)
            except (QuotaExceeded, InsufficientTargets, ReplicatError):
                continue
            moved_bytes += rule_bytes
            moved_files += rule_files
            primary[source] -= rule_bytes
            primary[destination] += rule_bytes
            campaign["pairs"].append({
                "original": rule_id, "child": child["rule_id"],
                "done": False})
            campaign["scheduled_bytes"] = moved_bytes
            campaign["scheduled_files"] = moved_files
            campaign["day_bytes"][str(day)] = moved_bytes
            campaign["day_files"][str(day)] = moved_files
            txn.put("campaigns", campaign["campaign_id"], campaign)
        return campaign

    # -- decommission mode --------------------------------------------------------------

    def decommission(self, rse_name):
        """Drain an RSE entirely, each rule following its own expression."""
        with self.store.transaction() as txn:
            rse = txn.get("rses", rse_name)
            if rse is None:
                raise UnknownRse(rse_name)
            if rse["availability"]["write"]:
                raise RseWriteEnabled(
                    f"disable writes on {rse_name} before decommissioning")
            campaign = self._new_campaign(txn, DECOMMISSION, rse_name)
            rules_here = sorted({
                lock["rule_id"] for _, lock in txn.scan("locks")
                if lock["rse"] == rse_name})
            for rule_id in rules_here:
                rule = txn.get("rules", rule_id)
                if rule is None:
                    continue
                if rule["child_rule"] is not None:
                    continue
                remainder = f"({rule['rse_expression']})\\{rse_name}"
                try:
                    child = self._clone_rule(txn, rule, remainder)
                except (InsufficientTargets, ReplicatError):
                    campaign["unsatisfiable"].append(rule_id)
                    self.system.gateway.emit(txn, "rebalance-unsatisfiable", {
                        "campaign": campaign["campaign_id"],
                        "rule_id": rule_id, "rse": rse_name})
                    continue
                campaign["pairs"].append({
                    "original": rule_id, "child": child["rule_id"],
                    "done": False})
                rule_bytes, rule_files = self._rule_bytes_on(
                    txn, rule_id, rse_name)
                campaign["scheduled_bytes"] += rule_bytes
                campaign["scheduled_files"] += rule_files
            if not campaign["pairs"] and not campaign["unsatisfiable"]:
                campaign["state"] = COMPLETE
            txn.put("campaigns", campaign["campaign_id"], campaign)
        return campaign

    # -- manual mode -----------------------------------------------------------------------

    def manual_rebalance(self, rse_name, volume_bytes):
        """Move at least volume_bytes off an RSE (stop after the first rule
        crossing the line); schedules what exists and reports any shortfall."""
        if volume_bytes <= 0:
            raise InvalidVolume("volume must be positive")
        with self.store.transaction() as txn:
            if txn.get("rses", rse_name) is None:
                raise UnknownRse(rse_name)
            all_rses = [k for k, _ in txn.scan("rses")]
            ratios, primary, secondary = self._ratios(txn, all_rses)
            below = sorted((r for r in all_rses if r != rse_name),
                           key=lambda r: (ratios[r], r))
            campaign = self._drain_source(
                txn, rse_name, below, ratios, primary, secondary,
                None, None, target_volume=volume_bytes)
            if campaign is None:
                campaign = self._new_campaign(txn, MANUAL, rse_name)
            campaign["shortfall_bytes"] = max(
                0, volume_bytes - campaign["scheduled_bytes"])
            txn.put("campaigns", campaign["campaign_id"], campaign)
        return campaign

    # -- campaign progress --------------------------------------------------------------------

    def cycle(self, worker="0"):
        """Advance campaigns: release originals whose children are complete."""
        gw = self.system.gateway
        gw.beat("rebalancer", worker)
        progressed = 0
        with self.store.transaction() as txn:
            active = sorted(k for k, c in txn.scan("campaigns")
                            if c["state"] == ACTIVE)
        for key in active:
            if gw.partition("rebalancer", key) != worker:
                continue
            with self.store.transaction() as txn:
                campaign = txn.get("campaigns", key)
                if campaign is None or campaign["state"] != ACTIVE:
                    continue
                campaign = dict(campaign,
                                pairs=[dict(p) for p in campaign["pairs"]])
                for pair in campaign["pairs"]:
                    if pair["done"]:
                        continue
                    child = txn.get("rules", pair["child"])
                    original = txn.get("rules", pair["original"])
                    if original is None:
                        pair["done"] = True
                        progressed += 1
                        continue
                    if child is None:
                        # Child vanished; unpin the original.
                        txn.put("rules", pair["original"],
                                dict(original, child_rule=None))
                        pair["done"] = True
                        progressed += 1
                        continue
                    if child["state"] == "OK":
                        self.system.rules._remove_rule_in(
                            txn, dict(original), purge_now=False)
                        child = txn.get("rules", pair["child"])
                        if child is not None:
                            txn.put("rules", pair["child"],
                                    dict(child, parent_rule=None))
                        pair["done"] = True
                        progressed += 1
                if all(p["done"] for p in campaign["pairs"]):
                    if self._campaign_complete(txn, campaign):
                        campaign["state"] = COMPLETE
                txn.put("campaigns", key, campaign)
        return progressed

    def _campaign_complete(self, txn, campaign):
        if campaign["mode"] != DECOMMISSION:
            return True
        locked = any(lock["rse"] == campaign["source_rse"]
                     for _, lock in txn.scan("locks"))
        return not locked and not campaign["unsatisfiable"]

    def get_campaign(self, campaign_id):
        with self.store.transaction() as txn:
            campaign = txn.get("campaigns", campaign_id)
        if campaign is None:
            raise NotFoundError(f"no campaign {campaign_id}")
        return campaign

    def list_campaigns(self):
        with self.store.transaction() as txn:
            return [c for _, c in sorted(txn.scan("campaigns"))]
