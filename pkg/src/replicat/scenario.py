"""Scenario harness: deterministic end-to-end runs on a simulated clock.

A scenario file (YAML, validated against the published JSON schema)
describes an infrastructure (RSEs, accounts, quotas, distances), initial
data, subscriptions, and a timeline of actions. The harness builds it all,
then advances the clock tick by tick, running every daemon round-robin and
sweeping the global invariants, until the stop condition. Identical
(scenario, seed) pairs produce byte-identical reports.
"""

import hashlib
import json
import os
import tempfile
from importlib import resources

import jsonschema
import yaml

from . import daemons, invariants
from .backends import FilesystemBackend, MemoryBackend
from .checksums import adler32_hex
from .clock import SimClock
from .errors import ReplicatError, ScenarioInvalid
from .system import System


def load_schema() -> dict:
    text = resources.files("replicat").joinpath("scenario_schema.json") \
        .read_text(encoding="utf-8")
    return json.loads(text)


def load_scenario(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    validate_scenario(doc)
    return doc


def validate_scenario(doc):
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.path) or "<root>"
        raise ScenarioInvalid(f"at {where}: {first.message}")


def generate_payload(rng, size: int) -> bytes:
    return rng.randbytes(size)


class ScenarioRunner:
    def __init__(self, doc, seed=0, workdir=None):
        validate_scenario(doc)
        self.doc = doc
        self.seed = seed
        self.clock = SimClock()
        self.system = System(clock=self.clock, seed=seed)
        self.workdir = workdir
        self.violations = {}
        self.clean_ticks = 0
        self.ticks = 0
        self.stopped = None

    # -- construction --------------------------------------------------------

    def build(self):
        doc = self.doc
        system = self.system
        if "tool" in doc:
            system.tool.configure(**{
                k: tuple(v) if k == "latency" else v
                for k, v in doc["tool"].items()})
        for account in doc.get("accounts", []):
            system.gateway.add_account(
                account["name"], kind=account.get("kind", "USER"),
                privileged=account.get("privileged", False),
                home_scope=account.get("home_scope"))
        for identity in doc.get("identities", []):
            system.gateway.add_identity(
                identity["username"], identity["password"],
                identity["account"])
        for scope in doc.get("scopes", []):
            system.gateway.add_scope(scope["scope"], scope["owner"])
        for rse in doc.get("rses", []):
            self._add_rse(rse)
        mesh = doc.get("full_mesh_distance")
        names = [r["name"] for r in doc.get("rses", [])]
        if mesh is not None:
            for src in names:
                for dst in names:
                    if src != dst:
                        system.storage.set_distance(src, dst, mesh)
        for entry in doc.get("distances", []):
            system.storage.set_distance(entry["src"], entry["dst"],
                                        entry["value"])
        for quota in doc.get("quotas", []):
            system.rules.set_limit(quota["account"], quota["rse"],
                                   quota["bytes"])
        for sub in doc.get("subscriptions", []):
            system.rules.add_subscription(
                sub["account"], sub.get("filter", {}), sub["templates"])
        for did in doc.get("dids", []):
            self._add_did(did)
        for upload in doc.get("uploads", []):
            self._upload(upload)
        return self

    def _add_rse(self, spec):
        system = self.system
        protocols = spec.get("protocols",
                             [{"scheme": "mock", "prefix": "/data"}])
        system.storage.add_rse(
            spec["name"],
            deterministic=spec.get("deterministic", True),
            volatile=spec.get("volatile", False),
            deletion_enabled=spec.get("deletion_enabled", True),
            attributes=spec.get("attributes", {}),
            protocols=protocols,
            limits=spec.get("limits", {}),
            availability=spec.get("availability", {}),
            greedy=spec.get("greedy", True))
        backend_spec = dict(spec.get("backend", {"kind": "memory"}))
        kind = backend_spec.pop("kind", "memory")
        backend_spec.setdefault(
            "capacity", spec.get("limits", {}).get("total_capacity"))
        rng = self.system.rng_for(f"backend:{spec['name']}")
        if kind == "filesystem":
            if self.workdir is None:
                self.workdir = tempfile.mkdtemp(prefix="replicat-scenario-")
            root = os.path.join(self.workdir, spec["name"])
            backend = FilesystemBackend(root, rng=rng, **backend_spec)
        else:
            backend = MemoryBackend(rng=rng, **backend_spec)
        system.backends.attach(spec["name"], backend)

    def _add_did(self, spec):
        self.system.catalog.add_did(
            spec["scope"], spec["name"], spec.get("type", "DATASET"),
            spec.get("owner", "root"), metadata=spec.get("metadata"))
        for flag in spec.get("flags", []):
            self.system.catalog.set_status(spec["scope"], spec["name"], flag)

    def _upload(self, spec):
        count = spec.get("count", 1)
        rng = self.system.rng_for("payloads")
        for i in range(count):
            name = spec["name"] if count == 1 else spec["name"] % i
            payload = generate_payload(rng, spec.get("size", 1024))
            self.upload_file(
                spec["scope"], name, spec.get("owner", "root"), spec["rse"],
                payload, metadata=spec.get("metadata"),
                rule=spec.get("rule"), attach_to=spec.get("attach_to"))

    def upload_file(self, scope, name, owner, rse, payload, metadata=None,
                    rule=None, attach_to=None):
        """Register the DID, register the replica, store the bytes, and
        optionally pin it with a rule; the canonical ingest sequence."""
        system = self.system
        checksum = adler32_hex(payload)
        system.catalog.add_did(scope, name, "FILE", owner,
                               bytes_=len(payload), adler32=checksum,
                               metadata=metadata)
        with system.store.transaction() as txn:
            replica = system.storage.register_replica(
                txn, rse, scope, name, "COPYING", len(payload), checksum)
        system.backends.get(rse).put(replica["path"], payload)
        with system.store.transaction() as txn:
            row = txn.get("replicas", f"{rse}|{scope}:{name}")
            txn.put("replicas", f"{rse}|{scope}:{name}",
                    dict(row, state="AVAILABLE"))
        if attach_to:
            system.catalog.attach(attach_to[0], attach_to[1],
                                  [(scope, name)])
        if rule:
            system.rules.add_rule(
                rule.get("account", owner), scope, name,
                rule.get("copies", 1), rule.get("rse_expression", rse),
                lifetime=rule.get("lifetime"))

    # -- timeline actions ----------------------------------------------------------

    def _run_action(self, action):
        kind = action["action"]
        args = action.get("args", {})
        handler = getattr(self, f"_action_{kind}", None)
        if handler is None:
            raise ScenarioInvalid(f"unknown action {kind!r}")
        try:
            handler(args)
        except ReplicatError as exc:
            if not action.get("may_fail"):
                raise ScenarioInvalid(
                    f"action {kind} at t={action.get('at', 0)} failed: "
                    f"{exc.code}: {exc}") from exc

    def _action_add_did(self, args):
        self._add_did(args)

    def _action_upload(self, args):
        self._upload(args)

    def _action_attach(self, args):
        self.system.catalog.attach(
            args["scope"], args["name"],
            [tuple(child) for child in args["children"]])

    def _action_close(self, args):
        self.system.catalog.set_status(args["scope"], args["name"], "CLOSE")

    def _action_add_rule(self, args):
        self.system.rules.add_rule(
            args["account"], args["scope"], args["name"],
            args.get("copies", 1), args["rse_expression"],
            lifetime=args.get("lifetime"),
            weight_key=args.get("weight_key"),
            grace_delay=args.get("grace_delay"))

    def _action_remove_rule(self, args):
        rule_id = args.get("rule_id")
        if rule_id is None:
            rules = self.system.rules.list_rules(
                scope=args["scope"], name=args["name"],
                account=args.get("account"))
            for rule in rules:
                self.system.rules.remove_rule(
                    rule["rule_id"], account=args.get("account"),
                    purge_now=args.get("purge_now", False),
                    internal=args.get("account") is None)
        else:
            self.system.rules.remove_rule(
                rule_id, account=args.get("account"),
                purge_now=args.get("purge_now", False),
                internal=args.get("account") is None)

    def _action_set_quota(self, args):
        self.system.rules.set_limit(args["account"], args["rse"],
                                    args["bytes"])

    def _action_set_distance(self, args):
        self.system.storage.set_distance(args["src"], args["dst"],
                                         args["value"])

    def _action_set_rse_availability(self, args):
        flags = {k: v for k, v in args.items() if k != "rse"}
        self.system.storage.set_availability(args["rse"], **flags)

    def _action_set_tool(self, args):
        self.system.tool.configure(**{
            k: tuple(v) if k == "latency" else v for k, v in args.items()})

    def _action_declare_bad(self, args):
        self.system.auditor.declare_bad(
            [(args["rse"], args["scope"], args["name"])],
            reason=args.get("reason", "DECLARED"),
            declarer=args.get("declarer", "system"))

    def _action_corrupt_replica(self, args):
        backend = self.system.backends.get(args["rse"])
        replica = self.system.storage.get_replica(
            args["rse"], args["scope"], args["name"])
        data = backend.get(replica["path"])
        backend.put(replica["path"],
                    (bytes([data[0] ^ 0xFF]) + data[1:]) if data else b"x")

    def _action_decommission(self, args):
        self.system.storage.set_availability(args["rse"], write=False)
        self.system.rebalancer.decommission(args["rse"])

    def _action_manual_rebalance(self, args):
        self.system.rebalancer.manual_rebalance(args["rse"], args["bytes"])

    def _action_background_rebalance(self, args):
        self.system.rebalancer.background_cycle(
            args["rses"], volume_limit=args.get("volume_limit"),
            files_limit=args.get("files_limit"))

    def _action_audit(self, args):
        rse = args["rse"]
        catalog_now = self.system.storage.catalog_dump(rse)
        storage_now = self.system.storage.storage_dump(rse)
        report, classification = self.system.auditor.run_audit(
            rse, storage_now, catalog_now, catalog_now,
            apply=args.get("apply", True))

    # -- the loop ----------------------------------------------------------------------

    def _next_wake(self):
        """Earliest future instant at which idle state can change: transfer
        completions, retry timers, rule expiry, or marker eligibility."""
        now = self.clock.now()
        wakes = []
        tool = self.system.tool
        wakes.extend(job["complete_at"] for job in tool._jobs.values()
                     if job["state"] == "active")
        max_retries = self.system.config.max_transfer_retries
        with self.system.store.transaction() as txn:
            for _, lock in txn.scan("locks"):
                if lock["state"] == "STUCK" and lock["blocked"] is None \
                        and lock["attempts"] <= max_retries:
                    wakes.append(lock["retry_at"])
            for _, rule in txn.scan("rules"):
                if rule["expires_at"] is not None:
                    wakes.append(rule["expires_at"])
            for _, replica in txn.scan("replicas"):
                if replica["tombstone"] is not None \
                        and replica["lock_count"] == 0:
                    wakes.append(replica["tombstone"])
        future = [w for w in wakes if w > now]
        return min(future) if future else None

    def run(self):
        self.build()
        doc = self.doc
        step = doc.get("clock_step", 60)
        stop = doc.get("stop", {"quiescence": True})
        deadline = stop.get("deadline")
        stop_at = stop.get("at")
        quiescence = stop.get("quiescence", stop_at is None)
        script = sorted(doc.get("script", []), key=lambda a: a.get("at", 0))
        pending = list(script)
        idle = 0
        while True:
            now = self.clock.now()
            while pending and pending[0].get("at", 0) <= now:
                self._run_action(pending.pop(0))
            before = self.system.store.mutations
            daemons.run_tick(self.system)
            self._sweep()
            self.ticks += 1
            moved = self.system.store.mutations != before
            if stop_at is not None and now >= stop_at:
                self.stopped = "time"
                break
            if deadline is not None and now >= deadline:
                self.stopped = "deadline"
                break
            advance = step
            if quiescence and not pending and not moved:
                wake = self._next_wake()
                if wake is None:
                    idle += 1
                    if idle >= 2:
                        self.stopped = "quiescence"
                        break
                else:
                    # Nothing can happen until the wake; jump the clock.
                    advance = max(step, wake - self.clock.now())
                    idle = 0
            else:
                idle = 0
            self.clock.advance(advance)
        return self.report()

    def _sweep(self):
        result = invariants.check_all(self.system)
        bad = {k: v for k, v in result.items() if v}
        if bad:
            for key, items in bad.items():
                self.violations.setdefault(key, []).extend(items)
        else:
            self.clean_ticks += 1

    # -- reporting ----------------------------------------------------------------------

    def report(self) -> dict:
        system = self.system
        with system.store.transaction() as txn:
            rules = [r for _, r in txn.scan("rules")]
            requests = [r for _, r in txn.scan("requests")]
            replicas = [r for _, r in txn.scan("replicas")]
            campaigns = [c for _, c in txn.scan("campaigns")]
        events = system.store.events_after(0)
        digest = hashlib.sha256()
        for event in events:
            digest.update(
                f"{event['event_id']}|{event['event_type']}|"
                f"{json.dumps(event['payload'], sort_keys=True)}\n"
                .encode("utf-8"))
        per_rse = {}
        for replica in replicas:
            entry = per_rse.setdefault(replica["rse"],
                                       {"files": 0, "bytes": 0})
            if replica["state"] == "AVAILABLE":
                entry["files"] += 1
                entry["bytes"] += replica["bytes"]
        report = {
            "scenario": self.doc.get("name", "unnamed"),
            "seed": self.seed,
            "ticks": self.ticks,
            "sim_seconds": self.clock.now(),
            "stopped": self.stopped,
            "rules": _count(rules, "state"),
            "requests": _count(requests, "state"),
            "requests_no_source": sum(1 for r in requests if r["no_source"]),
            "replicas": _count(replicas, "state"),
            "tombstoned": sum(1 for r in replicas
                              if r["tombstone"] is not None),
            "replicas_per_rse": {k: per_rse[k] for k in sorted(per_rse)},
            "campaigns": _count(campaigns, "state"),
            "counters": system.gateway.counters(),
            "events": {"count": len(events),
                       "digest": digest.hexdigest()},
            "invariants": {
                "clean_ticks": self.clean_ticks,
                "violations": {k: sorted(set(v))
                               for k, v in sorted(self.violations.items())},
            },
        }
        return report


def _count(rows, field):
    out = {}
    for row in rows:
        out[row[field]] = out.get(row[field], 0) + 1
    return {k: out[k] for k in sorted(out)}


def run_scenario(doc, seed=0, workdir=None) -> dict:
    """Run a scenario document (or path) and return its report."""
    if isinstance(doc, (str, os.PathLike)):
        doc = load_scenario(doc)
    return ScenarioRunner(doc, seed=seed, workdir=workdir).run()


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
