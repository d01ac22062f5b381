"""File movement: request lifecycle and the transfer-tool contract.

Requests walk a strict state machine, QUEUED -> SUBMITTED -> DONE | FAILED |
LOST, driven by three daemon passes: the submitter ranks sources and hands
batches to the tool, the poller maps tool outcomes back onto requests
(verifying the destination checksum before accepting success), and the
finisher updates replicas and rules and emits the transfer events. Failed
and lost requests are reborn as fresh QUEUED attempts by the rule repairer.

The mock tool executes real backend copies so checksums can be verified end
to end, with configurable latency, failure probability, and a throughput
cap.
"""

from .errors import NotFound, ReplicatError, UnknownRequest
from .storage import AVAILABLE, BAD, COPYING, replica_key

QUEUED, SUBMITTED, DONE, FAILED, LOST = (
    "QUEUED", "SUBMITTED", "DONE", "FAILED", "LOST")

EDGES = {
    (None, QUEUED),
    (QUEUED, SUBMITTED),
    (SUBMITTED, DONE),
    (SUBMITTED, FAILED),
    (SUBMITTED, LOST),
}


class ToolUnavailable(ReplicatError):
    http_status = 503


class TransferOrchestrator:
    def __init__(self, system):
        self.system = system

    @property
    def store(self):
        return self.system.store

    @property
    def clock(self):
        return self.system.clock

    @property
    def tool(self):
        return self.system.tool

    # -- request creation (inside caller transactions) ------------------------

    def create_request(self, txn, rule_id, file_record, dest_rse,
                       activity="user"):
        scope, name = file_record["scope"], file_record["name"]
        replica = txn.get("replicas", replica_key(dest_rse, scope, name))
        seq = txn.next_id("requests")
        now = self.clock.now()
        request = {
            "request_id": f"{seq:012d}",
            "scope": scope, "name": name,
            "bytes": file_record["bytes"], "adler32": file_record["adler32"],
            "dest_rse": dest_rse, "dest_path": replica["path"],
            "rule_id": rule_id,
            "state": QUEUED, "external_id": None,
            "sources": [], "attempts": 0,
            "activity": activity,
            "created_at": now, "updated_at": now,
            "finalized": False, "no_source": False,
        }
        txn.put("requests", request["request_id"], request)
        self._log(txn, request["request_id"], None, QUEUED)
        return request

    def _log(self, txn, request_id, old, new):
        seq = txn.next_id("request_log")
        txn.put("request_log", f"{seq:012d}", {
            "request_id": request_id, "from": old, "to": new,
            "at": self.clock.now()})

    def _transition(self, txn, request, new_state, **fields):
        old = request["state"]
        if (old, new_state) not in EDGES:
            raise UnknownRequest(
                f"illegal transition {old} -> {new_state} "
                f"for {request['request_id']}")
        updated = dict(request, state=new_state,
                       updated_at=self.clock.now(), **fields)
        txn.put("requests", request["request_id"], updated)
        self._log(txn, request["request_id"], old, new_state)
        return updated

    def get_request(self, request_id):
        with self.store.transaction() as txn:
            request = txn.get("requests", request_id)
        if request is None:
            raise UnknownRequest(request_id)
        return request

    def list_requests(self, state=None):
        with self.store.transaction() as txn:
            rows = [r for _, r in sorted(txn.scan("requests"))]
        if state is not None:
            rows = [r for r in rows if r["state"] == state]
        return rows

    def metrics(self):
        with self.store.transaction() as txn:
            rows = [r for _, r in txn.scan("requests")]
        out = {s: 0 for s in (QUEUED, SUBMITTED, DONE, FAILED, LOST)}
        for r in rows:
            out[r["state"]] += 1
        out["no_source"] = sum(1 for r in rows if r["no_source"])
        return out

    # -- daemon passes -----------------------------------------------------------

    def submit_pending(self, worker="0", batch_size=None):
        """Rank sources and hand one bunch of queued requests to the tool."""
        gw = self.system.gateway
        gw.beat("submitter", worker)
        batch_size = batch_size or self.system.config.submit_batch_size
        storage = self.system.storage
        jobs = []
        with self.store.transaction() as txn:
            queued = sorted(k for k, r in txn.scan("requests")
                            if r["state"] == QUEUED)
            for key in queued:
                if len(jobs) >= batch_size:
                    break
                if gw.partition("submitter", key) != worker:
                    continue
                request = txn.get("requests", key)
                source_rses = storage.replica_rses(
                    request["scope"], request["name"], txn, state=AVAILABLE)
                ranked = storage.ranked_sources(
                    source_rses, request["dest_rse"], txn)
                src = next((s for s in ranked if self._protocol_pair(
                    txn, s, request["dest_rse"]) is not None), None)
                if src is None:
                    if not request["no_source"]:
                        txn.put("requests", key, dict(request, no_source=True))
                        gw.count("transfers.no_source")
                    continue
                src_replica = txn.get(
                    "replicas",
                    replica_key(src, request["scope"], request["name"]))
                jobs.append({
                    "request_id": key,
                    "src_rse": src, "src_path": src_replica["path"],
                    "dst_rse": request["dest_rse"],
                    "dst_path": request["dest_path"],
                    "bytes": request["bytes"],
                    "sources": ranked,
                })
            if not jobs:
                return 0
            try:
                external = self.tool.submit(jobs)
            except ToolUnavailable:
                return 0
            for job in jobs:
                request = txn.get("requests", job["request_id"])
                self._transition(
                    txn, request, SUBMITTED,
                    external_id=external[job["request_id"]],
                    sources=job["sources"], no_source=False,
                    attempts=request["attempts"] + 1)
        return len(jobs)

    def _protocol_pair(self, txn, src_rse, dest_rse):
        """Cheapest compatible (source, destination) protocol pair.

        Compatibility means equal schemes; cost is the product of the source
        read priority and the destination write priority.
        """
        dest = txn.get("rses", dest_rse)
        src = txn.get("rses", src_rse)
        best = None
        for sp in src["protocols"]:
            for dp in dest["protocols"]:
                if sp["scheme"] != dp["scheme"]:
                    continue
                cost = sp["priorities"]["read"] * dp["priorities"]["write"]
                if best is None or cost < best[0]:
                    best = (cost, sp["scheme"])
        return best

    def poll_submitted(self, worker="0"):
        """Ask the tool about in-flight transfers and map its answers back."""
        gw = self.system.gateway
        gw.beat("poller", worker)
        transitions = 0
        with self.store.transaction() as txn:
            submitted = sorted(
                (k, r["external_id"]) for k, r in txn.scan("requests")
                if r["state"] == SUBMITTED)
        owned = [(k, e) for k, e in submitted
                 if gw.partition("poller", k) == worker]
        if not owned:
            return 0
        try:
            states = self.tool.query([e for _, e in owned])
        except ToolUnavailable:
            return 0
        for key, external_id in owned:
            verdict = states.get(external_id, "unknown")
            if verdict == "active":
                continue
            with self.store.transaction() as txn:
                request = txn.get("requests", key)
                if request is None or request["state"] != SUBMITTED:
                    continue
                if verdict == "done":
                    if self._destination_ok(txn, request):
                        self._transition(txn, request, DONE)
                    else:
                        self._transition(txn, request, FAILED)
                        self._flag_bad_destination(txn, request)
                elif verdict == "failed":
                    self._transition(txn, request, FAILED)
                else:
                    self._transition(txn, request, LOST)
                transitions += 1
        return transitions

    def _destination_ok(self, txn, request):
        backend = self.system.backends.get(request["dest_rse"])
        try:
            stat = backend.stat(request["dest_path"])
        except (NotFound, ReplicatError):
            return False
        return stat["adler32"] == request["adler32"]

    def _flag_bad_destination(self, txn, request):
        rk = replica_key(request["dest_rse"], request["scope"], request["name"])
        replica = txn.get("replicas", rk)
        if replica is not None:
            txn.put("replicas", rk, dict(replica, state=BAD))
            self.system.gateway.emit(txn, "replica-bad", {
                "rse": request["dest_rse"], "scope": request["scope"],
                "name": request["name"], "reason": "CHECKSUM_MISMATCH",
                "declared_by": "transfer-poller"})

    def finish(self, worker="0"):
        """Finalize terminal requests: replicas, rules, events. Idempotent."""
        gw = self.system.gateway
        gw.beat("finisher", worker)
        finalized = 0
        with self.store.transaction() as txn:
            terminal = sorted(
                k for k, r in txn.scan("requests")
                if r["state"] in (DONE, FAILED, LOST) and not r["finalized"])
        for key in terminal:
            if gw.partition("finisher", key) != worker:
                continue
            with self.store.transaction() as txn:
                request = txn.get("requests", key)
                if request is None or request["finalized"]:
                    continue
                if request["state"] == DONE:
                    self._finish_done(txn, request)
                else:
                    self._finish_failed(txn, request)
                txn.put("requests", key, dict(request, finalized=True))
                finalized += 1
        return finalized

    def _finish_done(self, txn, request):
        rk = replica_key(request["dest_rse"], request["scope"], request["name"])
        replica = txn.get("replicas", rk)
        now = self.clock.now()
        if replica is not None:
            txn.put("replicas", rk, dict(
                replica, state=AVAILABLE, accessed_at=now,
                source_failures=0))
        if request["sources"]:
            src_key = replica_key(request["sources"][0], request["scope"],
                                  request["name"])
            src = txn.get("replicas", src_key)
            if src is not None and src["source_failures"]:
                txn.put("replicas", src_key, dict(src, source_failures=0))
        self.system.rules.on_transfer_outcome(txn, request, "DONE")
        self.system.gateway.emit(txn, "transfer-done", {
            "scope": request["scope"], "name": request["name"],
            "src": request["sources"][0] if request["sources"] else None,
            "dst": request["dest_rse"], "bytes": request["bytes"],
            "duration": now - request["created_at"],
            "activity": request["activity"]})
        self.system.gateway.count("transfers.done")

    def _finish_failed(self, txn, request):
        now = self.clock.now()
        if request["state"] == FAILED and request["sources"]:
            self._count_source_failure(txn, request)
        if request["rule_id"] is None:
            # System-injected recovery transfer: put the destination back to
            # BAD so the recovery daemon retries next cycle.
            rk = replica_key(request["dest_rse"], request["scope"],
                             request["name"])
            replica = txn.get("replicas", rk)
            if replica is not None and replica["state"] == COPYING:
                txn.put("replicas", rk, dict(replica, state=BAD))
        else:
            self.system.rules.on_transfer_outcome(txn, request, "FAILED")
        self.system.gateway.emit(txn, "transfer-failed", {
            "scope": request["scope"], "name": request["name"],
            "src": request["sources"][0] if request["sources"] else None,
            "dst": request["dest_rse"], "bytes": request["bytes"],
            "duration": now - request["created_at"],
            "activity": request["activity"], "state": request["state"]})
        self.system.gateway.count("transfers.failed")

    def _count_source_failure(self, txn, request):
        source = request["sources"][0]
        src_key = replica_key(source, request["scope"], request["name"])
        src = txn.get("replicas", src_key)
        if src is None or src["state"] != AVAILABLE:
            return
        failures = src["source_failures"] + 1
        txn.put("replicas", src_key, dict(src, source_failures=failures))
        if failures < self.system.config.source_failure_threshold:
            return
        # Condemning the only available copy on circumstantial evidence
        # would orphan the file; keep counting until recovery has a source.
        others = self.system.storage.replica_rses(
            request["scope"], request["name"], txn, state=AVAILABLE)
        if all(rse == source for rse in others):
            return
        txn.put("replicas", src_key, dict(
            src, source_failures=failures, state=BAD))
        self.system.gateway.emit(txn, "replica-bad", {
            "rse": source, "scope": request["scope"],
            "name": request["name"], "reason": "SOURCE_FAILURES",
            "declared_by": "transfer-finisher"})


class MockTool:
    """Stand-in transfer service running real copies between backends.

    Completion time is sampled latency plus bytes over the throughput cap,
    measured on the system clock; failures and corruption are injected with
    configurable probabilities. The copy itself happens lazily when a query
    first observes completion, so simulated time driving is trivial.
    """

    def __init__(self, system, rng=None, latency=(1.0, 5.0),
                 failure_probability=0.0, corruption_probability=0.0,
                 throughput_cap=None):
        self.system = system
        self.rng = rng or system.rng_for("tool")
        self.latency = latency
        self.failure_probability = failure_probability
        self.corruption_probability = corruption_probability
        self.throughput_cap = throughput_cap
        self.available = True
        self._jobs = {}
        self._seq = 0

    def configure(self, **knobs):
        for key, value in knobs.items():
            if not hasattr(self, key):
                raise AttributeError(key)
            setattr(self, key, value)

    def submit(self, jobs):
        if not self.available:
            raise ToolUnavailable("transfer tool offline")
        out = {}
        now = self.system.clock.now()
        for job in jobs:
            self._seq += 1
            external_id = f"xfer-{self._seq:08d}"
            duration = self.rng.uniform(*self.latency)
            if self.throughput_cap:
                duration += job["bytes"] / self.throughput_cap
            self._jobs[external_id] = {
                **job,
                "complete_at": now + duration,
                "will_fail": self.rng.random() < self.failure_probability,
                "corrupt": self.rng.random() < self.corruption_probability,
                "state": "active",
            }
            out[job["request_id"]] = external_id
        return out

    def query(self, external_ids):
        if not self.available:
            raise ToolUnavailable("transfer tool offline")
        now = self.system.clock.now()
        out = {}
        for external_id in external_ids:
            job = self._jobs.get(external_id)
            if job is None:
                out[external_id] = "unknown"
                continue
            if job["state"] == "active" and now >= job["complete_at"]:
                job["state"] = self._execute(job)
            out[external_id] = job["state"]
        return out

    def _execute(self, job):
        if job["will_fail"]:
            return "failed"
        backends = self.system.backends
        try:
            data = backends.get(job["src_rse"]).get(job["src_path"])
            if job["corrupt"]:
                data = (bytes([data[0] ^ 0xFF]) + data[1:]) if data else b"x"
            backends.get(job["dst_rse"]).put(job["dst_path"], data)
        except ReplicatError:
            return "failed"
        return "done"

    def cancel(self, external_id):
        self._jobs.pop(external_id, None)

    def forget(self, external_id):
        """Test hook: simulate tool amnesia so polls see an unknown id."""
        self._jobs.pop(external_id, None)
