"""Storage element registry, distances, path policy, and the replica table.

An RSE is purely catalog-side configuration: attributes, protocols, limits,
distances. Replica rows (the physical incarnations of files) also live here,
together with the secondary indexes other modules rely on: which RSEs hold a
file, which DID owns a path, and per-RSE byte usage.
"""

import hashlib

from .errors import (
    DuplicateRse,
    InvalidProtocol,
    MissingPath,
    PathCollision,
    PathPolicyViolation,
    UnknownReplica,
    UnknownRse,
)

# Replica states.
AVAILABLE, COPYING, BAD = "AVAILABLE", "COPYING", "BAD"


def did_key(scope, name) -> str:
    return f"{scope}:{name}"


def replica_key(rse, scope, name) -> str:
    return f"{rse}|{scope}:{name}"


def hashed_relative_path(scope, name) -> str:
    """Deterministic layout: two hash levels spread files over directories.

    A pure function of (scope, name): the first two bytes of the MD5 of the
    canonical ``scope:name`` string become the directory levels, so paths can
    be computed without consulting any catalog.
    """
    digest = hashlib.md5(f"{scope}:{name}".encode("utf-8")).hexdigest()
    return f"{scope}/{digest[0:2]}/{digest[2:4]}/{name}"


class Storage:
    def __init__(self, system):
        self.system = system

    @property
    def store(self):
        return self.system.store

    @property
    def clock(self):
        return self.system.clock

    # -- RSE registry -------------------------------------------------------

    def add_rse(self, rse_name, deterministic=True, volatile=False,
                deletion_enabled=True, attributes=None, protocols=None,
                limits=None, availability=None, greedy=True, backend=None):
        attributes = dict(attributes or {})
        if "name" in attributes and attributes["name"] != rse_name:
            raise InvalidProtocol("the implicit 'name' attribute cannot be overridden")
        attributes["name"] = rse_name
        protocols = [self._check_protocol(p) for p in (protocols or [])]
        self._check_priority_ranks(protocols)
        record = {
            "rse_name": rse_name,
            "deterministic": bool(deterministic),
            "volatile": bool(volatile),
            "deletion_enabled": bool(deletion_enabled),
            "attributes": attributes,
            "protocols": protocols,
            "limits": dict({"min_free_space": 0, "total_capacity": None},
                           **(limits or {})),
            "availability": dict({"read": True, "write": True, "delete": True},
                                 **(availability or {})),
            "greedy": bool(greedy),
            "backend": dict(backend) if backend else None,
            "created_at": self.clock.now(),
        }
        with self.store.transaction() as txn:
            if txn.get("rses", rse_name) is not None:
                raise DuplicateRse(rse_name)
            txn.put("rses", rse_name, record)
            self.system.gateway.emit(txn, "rse-created", {"rse": rse_name})
        return record

    @staticmethod
    def _check_protocol(proto):
        proto = dict(proto)
        if not proto.get("scheme"):
            raise InvalidProtocol("protocol needs a scheme")
        proto.setdefault("endpoint", "localhost:0")
        proto.setdefault("prefix", "/")
        priorities = dict({"read": 1, "write": 1, "delete": 1,
                           "third_party_copy": 1}, **proto.get("priorities", {}))
        for op, rank in priorities.items():
            if not isinstance(rank, int) or rank < 1:
                raise InvalidProtocol(f"{op} priority must be a positive integer")
        proto["priorities"] = priorities
        return proto

    @staticmethod
    def _check_priority_ranks(protocols):
        for op in ("read", "write", "delete", "third_party_copy"):
            seen = set()
            for proto in protocols:
                rank = (proto["scheme"], proto["priorities"][op])
                if rank in seen:
                    raise InvalidProtocol(
                        f"duplicate {op} priority for scheme {proto['scheme']}")
                seen.add(rank)

    def get_rse(self, rse_name, txn=None):
        if txn is not None:
            record = txn.get("rses", rse_name)
        else:
            with self.store.transaction() as t:
                record = t.get("rses", rse_name)
        if record is None:
            raise UnknownRse(rse_name)
        return record

    def list_rses(self):
        with self.store.transaction() as txn:
            return [r for _, r in sorted(txn.scan("rses"))]

    def registry(self, txn=None):
        """Snapshot of RSE attributes for expression evaluation."""
        if txn is not None:
            rows = txn.scan("rses")
        else:
            with self.store.transaction() as t:
                rows = t.scan("rses")
        return {name: dict(r["attributes"]) for name, r in rows}

    def set_attribute(self, rse_name, key, value):
        if key == "name":
            raise InvalidProtocol("the implicit 'name' attribute cannot be changed")
        with self.store.transaction() as txn:
            record = self.get_rse(rse_name, txn)
            attrs = dict(record["attributes"])
            if value is None:
                attrs.pop(key, None)
            else:
                attrs[key] = str(value)
            txn.put("rses", rse_name, dict(record, attributes=attrs))

    def set_limits(self, rse_name, **limits):
        with self.store.transaction() as txn:
            record = self.get_rse(rse_name, txn)
            txn.put("rses", rse_name,
                    dict(record, limits=dict(record["limits"], **limits)))

    def set_availability(self, rse_name, **flags):
        with self.store.transaction() as txn:
            record = self.get_rse(rse_name, txn)
            txn.put("rses", rse_name,
                    dict(record, availability=dict(record["availability"], **flags)))

    def set_deletion_mode(self, rse_name, greedy: bool):
        with self.store.transaction() as txn:
            record = self.get_rse(rse_name, txn)
            txn.put("rses", rse_name, dict(record, greedy=bool(greedy)))

    # -- distances ------------------------------------------------------------

    def set_distance(self, src, dst, value):
        if not isinstance(value, int) or value < 0:
            raise InvalidProtocol("distance must be a non-negative integer")
        with self.store.transaction() as txn:
            self.get_rse(src, txn)
            self.get_rse(dst, txn)
            txn.put("distances", f"{src}|{dst}", {
                "source": src, "destination": dst, "value": value})

    def get_distance(self, src, dst, txn=None):
        key = f"{src}|{dst}"
        if txn is not None:
            record = txn.get("distances", key)
        else:
            with self.store.transaction() as t:
                record = t.get("distances", key)
        return record["value"] if record else 0

    def ranked_sources(self, replica_rses, dst, txn=None):
        """Sources ordered by ascending distance to dst, name as tie-break.

        Distance zero (or no entry) means no link; such sources are dropped.
        """
        ranked = []
        for src in replica_rses:
            if src == dst:
                continue
            value = self.get_distance(src, dst, txn)
            if value >= 1:
                ranked.append((value, src))
        return [src for _, src in sorted(ranked)]

    # -- path policy -------------------------------------------------------------

    def canonical_prefix(self, rse_record) -> str:
        protocols = rse_record["protocols"]
        if not protocols:
            raise InvalidProtocol(f"{rse_record['rse_name']} has no protocols")
        best = min(protocols, key=lambda p: p["priorities"]["write"])
        return best["prefix"].rstrip("/")

    def derive_path(self, rse_name, scope, name, explicit_path=None, txn=None):
        record = self.get_rse(rse_name, txn)
        prefix = self.canonical_prefix(record)
        if record["deterministic"]:
            if explicit_path is not None:
                raise PathPolicyViolation(
                    f"{rse_name} is deterministic; paths are derived")
            return f"{prefix}/{hashed_relative_path(scope, name)}"
        if explicit_path is None:
            raise MissingPath(f"{rse_name} is non-deterministic; a path is required")
        return f"{prefix}/{explicit_path.lstrip('/')}"

    # -- replica rows (called inside caller transactions) -------------------------

    def register_replica(self, txn, rse_name, scope, name, state, bytes_,
                         adler32, path=None):
        rse = self.get_rse(rse_name, txn)
        path = path if not rse["deterministic"] else None
        full_path = self.derive_path(rse_name, scope, name, path, txn)
        fk = did_key(scope, name)
        path_key = f"{rse_name}|{full_path}"
        owner = txn.get("paths", path_key)
        if owner is not None and owner["did"] != fk:
            raise PathCollision(f"{full_path} already maps to {owner['did']}")
        rk = replica_key(rse_name, scope, name)
        if txn.get("replicas", rk) is not None:
            return txn.get("replicas", rk)
        now = self.clock.now()
        replica = {
            "rse": rse_name, "scope": scope, "name": name,
            "state": state, "path": full_path,
            "bytes": bytes_, "adler32": adler32,
            "tombstone": None, "accessed_at": now, "created_at": now,
            "lock_count": 0, "source_failures": 0, "suspicious": 0,
        }
        txn.put("replicas", rk, replica)
        txn.put("paths", path_key, {"did": fk})
        index = txn.get("file_replicas", fk, {"rses": []})
        if rse_name not in index["rses"]:
            txn.put("file_replicas", fk,
                    {"rses": sorted(index["rses"] + [rse_name])})
        usage = txn.get("rse_usage", rse_name, {"bytes": 0, "files": 0})
        txn.put("rse_usage", rse_name,
                {"bytes": usage["bytes"] + bytes_, "files": usage["files"] + 1})
        return replica

    def drop_replica(self, txn, rse_name, scope, name):
        rk = replica_key(rse_name, scope, name)
        replica = txn.get("replicas", rk)
        if replica is None:
            return None
        txn.delete("replicas", rk)
        txn.delete("paths", f"{rse_name}|{replica['path']}")
        fk = did_key(scope, name)
        index = txn.get("file_replicas", fk, {"rses": []})
        remaining = [r for r in index["rses"] if r != rse_name]
        if remaining:
            txn.put("file_replicas", fk, {"rses": remaining})
        else:
            txn.delete("file_replicas", fk)
        usage = txn.get("rse_usage", rse_name, {"bytes": 0, "files": 0})
        txn.put("rse_usage", rse_name,
                {"bytes": usage["bytes"] - replica["bytes"],
                 "files": usage["files"] - 1})
        return replica

    def get_replica(self, rse_name, scope, name, txn=None):
        rk = replica_key(rse_name, scope, name)
        if txn is not None:
            record = txn.get("replicas", rk)
        else:
            with self.store.transaction() as t:
                record = t.get("replicas", rk)
        if record is None:
            raise UnknownReplica(rk)
        return record

    def replica_rses(self, scope, name, txn, state=None):
        """RSE names holding a replica of the file, optionally state-filtered."""
        index = txn.get("file_replicas", did_key(scope, name), {"rses": []})
        if state is None:
            return list(index["rses"])
        out = []
        for rse in index["rses"]:
            replica = txn.get("replicas", replica_key(rse, scope, name))
            if replica is not None and replica["state"] == state:
                out.append(rse)
        return out

    def list_replicas(self, scope, name):
        with self.store.transaction() as txn:
            rses = self.replica_rses(scope, name, txn)
            return [txn.get("replicas", replica_key(r, scope, name)) for r in rses]

    def rse_replicas(self, txn, rse_name):
        prefix = f"{rse_name}|"
        return [r for k, r in txn.scan("replicas") if k.startswith(prefix)]

    def used_bytes(self, rse_name, txn=None):
        if txn is not None:
            usage = txn.get("rse_usage", rse_name, {"bytes": 0})
        else:
            with self.store.transaction() as t:
                usage = t.get("rse_usage", rse_name, {"bytes": 0})
        return usage["bytes"]

    def free_bytes(self, rse_name, txn=None):
        record = self.get_rse(rse_name, txn)
        capacity = record["limits"]["total_capacity"]
        if capacity is None:
            return None
        return capacity - self.used_bytes(rse_name, txn)

    # -- access tracking ------------------------------------------------------------

    def record_access(self, rse_name, scope, name, at=None):
        """Bump a replica's access time; never regresses (monotone max)."""
        at = self.clock.now() if at is None else at
        flag_missing = False
        with self.store.transaction() as txn:
            replica = self.get_replica(rse_name, scope, name, txn)
            rse = self.get_rse(rse_name, txn)
            updated = dict(replica, accessed_at=max(replica["accessed_at"], at))
            if rse["volatile"] and self.system.backends.has(rse_name):
                if not self.system.backends.get(rse_name).exists(replica["path"]):
                    updated["suspicious"] = updated["suspicious"] + 1
                    flag_missing = True
            txn.put("replicas", replica_key(rse_name, scope, name), updated)
        if flag_missing:
            self.system.auditor.declare_bad(
                [(rse_name, scope, name)], reason="LOST_ON_STORAGE",
                declarer="system")
        return updated

    # -- dumps -------------------------------------------------------------------------

    def storage_dump(self, rse_name) -> list:
        """Paths physically on storage, sorted, for consistency audits."""
        return self.system.backends.get(rse_name).list("")

    def catalog_dump(self, rse_name) -> list:
        """Paths the catalog believes are on storage (available replicas)."""
        with self.store.transaction() as txn:
            rows = self.rse_replicas(txn, rse_name)
        return sorted(r["path"] for r in rows if r["state"] == AVAILABLE)

    @staticmethod
    def write_dump(paths, fileobj):
        for path in paths:
            fileobj.write(path + "\n")
