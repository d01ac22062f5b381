"""The DID namespace: files, datasets, containers, and their hierarchy.

Names are permanent: once a (scope, name) pair has been used it can never
be reused, even after deletion, so a dedicated history index outlives the
DID rows themselves. Availability and completeness are always derived from
the replica catalog on read, never stored.
"""

import re

from .errors import (
    AlreadyClosed,
    ClosedCollection,
    CycleDetected,
    DuplicateIdentifier,
    MonotonicViolation,
    NotACollection,
    SchemaViolation,
    TypeMismatch,
    UniquenessViolation,
    UnknownAttachment,
    UnknownDid,
    UnknownScope,
)
from .storage import did_key

FILE, DATASET, CONTAINER = "FILE", "DATASET", "CONTAINER"
AVAILABLE, LOST, DELETED = "AVAILABLE", "LOST", "DELETED"

_ADLER32 = re.compile(r"^[0-9a-f]{8}$")
_MD5 = re.compile(r"^[0-9a-f]{32}$")

_ALLOWED_CHILDREN = {CONTAINER: {CONTAINER, DATASET}, DATASET: {FILE}}


class Catalog:
    def __init__(self, system):
        self.system = system

    @property
    def store(self):
        return self.system.store

    @property
    def clock(self):
        return self.system.clock

    @property
    def schema(self):
        return self.system.config.naming_schema

    # -- creation ----------------------------------------------------------

    def _check_schema(self, scope, name):
        schema = self.schema
        if len(name) > schema.max_name_length:
            raise SchemaViolation(
                f"name longer than {schema.max_name_length} characters")
        if not re.fullmatch(schema.allowed_character_pattern, name):
            raise SchemaViolation(f"name {name!r} has characters outside the schema")
        if len(scope) > schema.max_scope_length:
            raise SchemaViolation(
                f"scope longer than {schema.max_scope_length} characters")
        if not re.fullmatch(schema.scope_pattern, scope):
            raise SchemaViolation(f"scope {scope!r} does not match the schema")

    def add_did(self, scope, name, did_type, owner, bytes_=None, adler32=None,
                md5=None, metadata=None):
        did_type = did_type.upper()
        if did_type not in (FILE, DATASET, CONTAINER):
            raise SchemaViolation(f"unknown DID type {did_type!r}")
        self._check_schema(scope, name)
        is_file = did_type == FILE
        if is_file:
            if bytes_ is None or adler32 is None:
                raise SchemaViolation("a FILE needs bytes and adler32")
            if not isinstance(bytes_, int) or bytes_ < 0:
                raise SchemaViolation("bytes must be a non-negative integer")
            if not _ADLER32.fullmatch(adler32):
                raise SchemaViolation("adler32 must be 8 lowercase hex digits")
            if md5 is not None and not _MD5.fullmatch(md5):
                raise SchemaViolation("md5 must be 32 lowercase hex digits")
        elif bytes_ is not None or adler32 is not None or md5 is not None:
            raise SchemaViolation("collections carry no size or checksums")
        metadata = dict(metadata or {})
        key = did_key(scope, name)
        with self.store.transaction() as txn:
            if txn.get("scopes", scope) is None:
                raise UnknownScope(scope)
            if txn.get("did_history", key) is not None:
                raise DuplicateIdentifier(f"{key} has been used before")
            self._reserve_unique_metadata(txn, key, metadata)
            record = {
                "scope": scope, "name": name, "did_type": did_type,
                "account": owner,
                "bytes": bytes_, "adler32": adler32, "md5": md5,
                "is_open": not is_file, "monotonic": False, "suppressed": False,
                "created_at": self.clock.now(), "metadata": metadata,
            }
            txn.put("dids", key, record)
            txn.put("did_history", key, {"created_at": record["created_at"]})
            self.system.gateway.emit(txn, "did-created", {
                "scope": scope, "name": name, "did_type": did_type,
                "account": owner, "metadata": metadata,
            })
        return record

    def _reserve_unique_metadata(self, txn, key, items):
        for mkey, value in items.items():
            if mkey not in self.system.config.unique_metadata_keys:
                continue
            slot = f"{mkey}={value}"
            owner = txn.get("unique_metadata", slot)
            if owner is not None and owner["did"] != key:
                raise UniquenessViolation(f"{slot} already used by {owner['did']}")
            txn.put("unique_metadata", slot, {"did": key})

    # -- lookups ----------------------------------------------------------------

    def _get(self, txn, scope, name):
        record = txn.get("dids", did_key(scope, name))
        if record is None:
            raise UnknownDid(did_key(scope, name))
        return record

    def get_raw(self, scope, name):
        with self.store.transaction() as txn:
            return self._get(txn, scope, name)

    def exists(self, scope, name) -> bool:
        with self.store.transaction() as txn:
            return txn.get("dids", did_key(scope, name)) is not None

    def get_did(self, scope, name):
        """The DID with its derived fields (availability or completeness)."""
        with self.store.transaction() as txn:
            record = dict(self._get(txn, scope, name))
            if record["did_type"] == FILE:
                record["availability"] = self._availability(txn, record)
            else:
                record["complete"] = all(
                    self.system.storage.replica_rses(
                        f["scope"], f["name"], txn, state="AVAILABLE")
                    for f in self._files(txn, record))
        return record

    def _availability(self, txn, record):
        key = did_key(record["scope"], record["name"])
        available = self.system.storage.replica_rses(
            record["scope"], record["name"], txn, state="AVAILABLE")
        if available:
            return AVAILABLE
        if self._rules_covering(txn, key):
            return LOST
        # Replica rows that are registered but not on storage (in flight or
        # known-bad) still pin the name to LOST rather than DELETED.
        if txn.get("file_replicas", key) is not None:
            return LOST
        return DELETED

    def _rules_covering(self, txn, key):
        rule_ids = []
        for k in [key] + self.ancestor_keys(txn, key):
            index = txn.get("did_rules", k)
            if index:
                rule_ids.extend(index["rule_ids"])
        return rule_ids

    def rules_covering(self, txn, scope, name):
        return self._rules_covering(txn, did_key(scope, name))

    # -- hierarchy ---------------------------------------------------------------

    def ancestor_keys(self, txn, key):
        seen = set()
        stack = [key]
        while stack:
            current = stack.pop()
            parents = txn.get("parents", current, {"parents": {}})["parents"]
            for parent in parents:
                if parent not in seen:
                    seen.add(parent)
                    stack.append(parent)
        return sorted(seen)

    def attach(self, scope, name, children):
        """Attach children to an open collection; idempotent per pair."""
        with self.store.transaction() as txn:
            parent = self._get(txn, scope, name)
            if parent["did_type"] == FILE:
                raise TypeMismatch("files cannot contain anything")
            if not parent["is_open"]:
                raise ClosedCollection(f"{did_key(scope, name)} is closed")
            allowed = _ALLOWED_CHILDREN[parent["did_type"]]
            parent_key = did_key(scope, name)
            ancestors = set(self.ancestor_keys(txn, parent_key)) | {parent_key}
            attached = []
            content = dict(txn.get("contents", parent_key,
                                   {"children": {}})["children"])
            for child_scope, child_name in children:
                child = self._get(txn, child_scope, child_name)
                if child["did_type"] not in allowed:
                    raise TypeMismatch(
                        f"{parent['did_type']} cannot contain {child['did_type']}")
                child_key = did_key(child_scope, child_name)
                if child_key in ancestors:
                    raise CycleDetected(f"{child_key} is an ancestor of {parent_key}")
                if child_key in content:
                    continue
                content[child_key] = True
                parents = dict(txn.get("parents", child_key,
                                       {"parents": {}})["parents"])
                parents[parent_key] = True
                txn.put("parents", child_key, {"parents": parents})
                attached.append(child_key)
            txn.put("contents", parent_key, {"children": content})
            if attached:
                seq = txn.next_id("reeval")
                txn.put("reeval_queue", f"{seq:012d}", {
                    "parent": parent_key, "children": attached,
                    "removed": False, "at": self.clock.now(),
                })
        return len(attached)

    def detach(self, scope, name, children, privileged=False):
        with self.store.transaction() as txn:
            parent = self._get(txn, scope, name)
            parent_key = did_key(scope, name)
            if not privileged:
                if not parent["is_open"]:
                    raise ClosedCollection(f"{parent_key} is closed")
                if parent["monotonic"]:
                    raise MonotonicViolation(
                        f"{parent_key} is monotonic; content cannot be removed")
            content = dict(txn.get("contents", parent_key,
                                   {"children": {}})["children"])
            removed = []
            for child_scope, child_name in children:
                child_key = did_key(child_scope, child_name)
                if child_key not in content:
                    raise UnknownAttachment(f"{child_key} not in {parent_key}")
                del content[child_key]
                parents = dict(txn.get("parents", child_key,
                                       {"parents": {}})["parents"])
                parents.pop(parent_key, None)
                txn.put("parents", child_key, {"parents": parents})
                removed.append(child_key)
            txn.put("contents", parent_key, {"children": content})
            if removed:
                seq = txn.next_id("reeval")
                txn.put("reeval_queue", f"{seq:012d}", {
                    "parent": parent_key, "children": removed,
                    "removed": True, "at": self.clock.now(),
                })
        return len(removed)

    def detach_everywhere(self, txn, scope, name):
        """Administrative removal of a file from all its parents."""
        child_key = did_key(scope, name)
        parents = txn.get("parents", child_key, {"parents": {}})["parents"]
        for parent_key in list(parents):
            content = dict(txn.get("contents", parent_key,
                                   {"children": {}})["children"])
            content.pop(child_key, None)
            txn.put("contents", parent_key, {"children": content})
        if parents:
            txn.put("parents", child_key, {"parents": {}})
        return sorted(parents)

    # -- status flags ------------------------------------------------------------------

    def set_status(self, scope, name, flag):
        flag = flag.upper()
        with self.store.transaction() as txn:
            record = self._get(txn, scope, name)
            key = did_key(scope, name)
            if flag == "CLOSE":
                if record["did_type"] == FILE:
                    raise NotACollection(key)
                if not record["is_open"]:
                    raise AlreadyClosed(key)
                record = dict(record, is_open=False)
            elif flag == "SET_MONOTONIC":
                if record["did_type"] == FILE:
                    raise NotACollection(key)
                record = dict(record, monotonic=True)
            elif flag == "SUPPRESS":
                record = dict(record, suppressed=True)
            elif flag == "UNSUPPRESS":
                record = dict(record, suppressed=False)
            else:
                raise SchemaViolation(f"unknown status flag {flag!r}")
            txn.put("dids", key, record)
        return record

    # -- listing -----------------------------------------------------------------------

    def _files(self, txn, record):
        """Transitive closure down to files, deduplicated."""
        if record["did_type"] == FILE:
            return [record]
        seen = set()
        files = {}
        stack = [did_key(record["scope"], record["name"])]
        while stack:
            current = stack.pop()
            children = txn.get("contents", current, {"children": {}})["children"]
            for child_key in children:
                if child_key in seen:
                    continue
                seen.add(child_key)
                child = txn.get("dids", child_key)
                if child is None:
                    continue
                if child["did_type"] == FILE:
                    files[child_key] = child
                else:
                    stack.append(child_key)
        return sorted(files.values(), key=lambda f: (f["scope"], f["name"]))

    def list_files(self, scope, name):
        with self.store.transaction() as txn:
            record = self._get(txn, scope, name)
            return self._files(txn, record)

    def list_files_in(self, txn, scope, name):
        return self._files(txn, self._get(txn, scope, name))

    def list_content(self, scope, name, deep=False):
        """Direct children; suppressed entries only show up with deep=True."""
        with self.store.transaction() as txn:
            record = self._get(txn, scope, name)
            if record["did_type"] == FILE:
                raise NotACollection(did_key(scope, name))
            children = txn.get("contents", did_key(scope, name),
                               {"children": {}})["children"]
            out = []
            for child_key in children:
                child = txn.get("dids", child_key)
                if child is None:
                    continue
                if child["suppressed"] and not deep:
                    continue
                out.append(child)
        return sorted(out, key=lambda c: (c["scope"], c["name"]))

    def list_dids(self, scope, deep=False):
        with self.store.transaction() as txn:
            if txn.get("scopes", scope) is None:
                raise UnknownScope(scope)
            rows = [r for _, r in txn.scan("dids") if r["scope"] == scope]
        rows = [r for r in rows if deep or not r["suppressed"]]
        return sorted(rows, key=lambda r: (r["scope"], r["name"]))

    # -- metadata ----------------------------------------------------------------------

    def set_metadata(self, scope, name, key, value):
        with self.store.transaction() as txn:
            record = self._get(txn, scope, name)
            self._reserve_unique_metadata(
                txn, did_key(scope, name), {key: value})
            metadata = dict(record["metadata"])
            metadata[key] = value
            txn.put("dids", did_key(scope, name), dict(record, metadata=metadata))

    def get_metadata(self, scope, name):
        with self.store.transaction() as txn:
            record = self._get(txn, scope, name)
        system_keys = {
            "scope": record["scope"], "name": record["name"],
            "did_type": record["did_type"], "account": record["account"],
            "created_at": record["created_at"],
        }
        if record["did_type"] == FILE:
            system_keys.update(bytes=record["bytes"], adler32=record["adler32"],
                               md5=record["md5"])
        return {**system_keys, **record["metadata"]}
