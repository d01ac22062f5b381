"""Composition root: wires the store, clock, and all module services."""

import random
from dataclasses import dataclass, field

from .auditor import Auditor
from .backends import BackendRegistry
from .catalog import Catalog
from .clock import Clock, WallClock
from .gateway import Gateway
from .reaper import Reaper
from .rebalancer import Rebalancer
from .rules import RuleEngine
from .storage import Storage
from .store import MemoryStore
from .transfer import MockTool, TransferOrchestrator


@dataclass
class NamingSchema:
    max_name_length: int = 250
    allowed_character_pattern: str = r"[A-Za-z0-9._-]+"
    max_scope_length: int = 25
    scope_pattern: str = r"[A-Za-z0-9._-]+"


@dataclass
class SystemConfig:
    naming_schema: NamingSchema = field(default_factory=NamingSchema)
    unique_metadata_keys: tuple = ("guid",)
    token_lifetime: float = 3600.0
    heartbeat_expiry: float = 120.0
    default_grace_delay: float = 24 * 3600.0
    max_transfer_retries: int = 3
    retry_delay: float = 60.0
    popularity_window: float = 7 * 86400.0
    submit_batch_size: int = 100
    source_failure_threshold: int = 3
    audit_offset: float = 86400.0
    rebalance_activity: str = "rebalance"


class System:
    """One running instance: storage-side state plus module services."""

    def __init__(self, store=None, clock: Clock = None, seed=None, config=None):
        self.store = store if store is not None else MemoryStore()
        self.clock = clock if clock is not None else WallClock()
        self.config = config or SystemConfig()
        self._master_rng = random.Random(seed)
        self._rngs = {}
        self.backends = BackendRegistry()
        self.gateway = Gateway(self)
        self.storage = Storage(self)
        self.catalog = Catalog(self)
        self.rules = RuleEngine(self)
        self.transfer = TransferOrchestrator(self)
        self.reaper = Reaper(self)
        self.auditor = Auditor(self)
        self.rebalancer = Rebalancer(self)
        self.tool = MockTool(self, rng=self.rng_for("tool"))

    def rng_for(self, label: str) -> random.Random:
        """Named deterministic RNG stream (stable given the master seed)."""
        if label not in self._rngs:
            self._rngs[label] = random.Random(self._master_rng.randrange(2 ** 63))
        return self._rngs[label]

    def attach_backends(self, data_dir=None):
        """Rebuild backends from the specs persisted on RSE records.

        Lets a fresh process (a restarted service, a standalone daemon)
        reattach to the same storage; only filesystem backends genuinely
        share bytes across processes.
        """
        from .backends import build_backend

        for record in self.storage.list_rses():
            name = record["rse_name"]
            if record.get("backend") and not self.backends.has(name):
                spec = dict(record["backend"])
                spec.setdefault("capacity",
                                record["limits"]["total_capacity"])
                self.backends.attach(name, build_backend(
                    name, spec, rng=self.rng_for(f"backend:{name}"),
                    data_dir=data_dir))
