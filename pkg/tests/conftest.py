import pytest

from replicat import System
from replicat.backends import MemoryBackend
from replicat.checksums import adler32_hex
from replicat.clock import SimClock
from replicat import daemons


class Harness:
    """A system on a simulated clock plus shorthand for common setup."""

    def __init__(self, seed=1):
        self.clock = SimClock()
        self.system = System(clock=self.clock, seed=seed)
        self.system.tool.configure(latency=(1.0, 2.0))

    def account(self, name, privileged=False, **kw):
        return self.system.gateway.add_account(name, privileged=privileged,
                                               **kw)

    def scope(self, scope, owner):
        self.system.gateway.add_scope(scope, owner)

    def rse(self, name, attributes=None, capacity=None, min_free=0,
            backend=None, **kw):
        limits = {"total_capacity": capacity, "min_free_space": min_free}
        record = self.system.storage.add_rse(
            name, attributes=attributes or {},
            protocols=[{"scheme": "mock", "prefix": "/data"}],
            limits=limits, **kw)
        self.system.backends.attach(
            name, backend if backend is not None else MemoryBackend(
                capacity=capacity,
                rng=self.system.rng_for(f"backend:{name}")))
        return record

    def mesh(self, value=1):
        names = [r["rse_name"] for r in self.system.storage.list_rses()]
        for src in names:
            for dst in names:
                if src != dst:
                    self.system.storage.set_distance(src, dst, value)

    def upload(self, scope, name, rse, payload=b"x", owner="root",
               metadata=None, accessed_at=None):
        checksum = adler32_hex(payload)
        if not self.system.catalog.exists(scope, name):
            self.system.catalog.add_did(scope, name, "FILE", owner,
                                        bytes_=len(payload), adler32=checksum,
                                        metadata=metadata)
        with self.system.store.transaction() as txn:
            replica = self.system.storage.register_replica(
                txn, rse, scope, name, "AVAILABLE", len(payload), checksum)
            if accessed_at is not None:
                row = txn.get("replicas", f"{rse}|{scope}:{name}")
                txn.put("replicas", f"{rse}|{scope}:{name}",
                        dict(row, accessed_at=accessed_at))
        self.system.backends.get(rse).put(replica["path"], payload)
        return payload

    def tick(self, n=1, step=30.0, kinds=None):
        for _ in range(n):
            self.clock.advance(step)
            daemons.run_tick(self.system, kinds=kinds)

    def run_until(self, predicate, max_ticks=200, step=30.0):
        for _ in range(max_ticks):
            if predicate():
                return True
            self.tick(step=step)
        return predicate()


@pytest.fixture
def harness():
    h = Harness()
    h.account("root", privileged=True)
    h.scope("data", "root")
    return h


@pytest.fixture
def grid(harness):
    """Three linked disk RSEs and a plain user with quota."""
    harness.rse("SITE-A", attributes={"tier": "1", "country": "CH"})
    harness.rse("SITE-B", attributes={"tier": "2", "country": "FR"})
    harness.rse("SITE-C", attributes={"tier": "2", "country": "DE"})
    harness.mesh(1)
    harness.account("user.alice")
    for rse in ("SITE-A", "SITE-B", "SITE-C"):
        harness.system.rules.set_limit("user.alice", rse, 10 ** 9)
    return harness
