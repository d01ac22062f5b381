"""Pluggable storage backends.

A backend is the physical side of a storage element: bytes at paths. The
contract is the handful of POSIX-flavored operations the rest of the system
needs (put/get/delete/stat/list) plus fault injection so simulations can
exercise failure handling. Paths are opaque absolute-looking strings owned
by the path-generation policy, e.g. ``/data/scope/ab/cd/name``.
"""

import os
import random
import time

from .checksums import adler32_hex
from .errors import InjectedFailure, InsufficientSpace, NotFound


class StorageBackend:
    """Base class implementing capacity accounting and fault injection."""

    def __init__(self, capacity=None, fail_probability=0.0, latency=0.0,
                 rng=None, sleep=None):
        self.capacity = capacity
        self.fail_probability = fail_probability
        self.latency = latency
        self.rng = rng or random.Random()
        self._sleep = sleep if sleep is not None else time.sleep
        self.used_bytes = 0

    def _maybe_fail(self, op):
        if self.latency > 0:
            self._sleep(self.latency)
        if self.fail_probability > 0 and self.rng.random() < self.fail_probability:
            raise InjectedFailure(f"injected {op} failure")

    def put(self, path, data: bytes):
        self._maybe_fail("put")
        existing = self._size(path)
        projected = self.used_bytes - (existing or 0) + len(data)
        if self.capacity is not None and projected > self.capacity:
            raise InsufficientSpace(path)
        self._write(path, data)
        self.used_bytes = projected

    def get(self, path) -> bytes:
        self._maybe_fail("get")
        data = self._read(path)
        if data is None:
            raise NotFound(path)
        return data

    def delete(self, path):
        self._maybe_fail("delete")
        size = self._size(path)
        if size is None:
            raise NotFound(path)
        self._remove(path)
        self.used_bytes -= size

    def stat(self, path) -> dict:
        self._maybe_fail("stat")
        data = self._read(path)
        if data is None:
            raise NotFound(path)
        return {"bytes": len(data), "adler32": adler32_hex(data)}

    def exists(self, path) -> bool:
        return self._size(path) is not None

    def list(self, prefix="") -> list:
        self._maybe_fail("list")
        return sorted(p for p in self._paths() if p.startswith(prefix))

    # Subclasses provide raw storage primitives.

    def _write(self, path, data):
        raise NotImplementedError

    def _read(self, path):
        raise NotImplementedError

    def _remove(self, path):
        raise NotImplementedError

    def _size(self, path):
        raise NotImplementedError

    def _paths(self):
        raise NotImplementedError


class MemoryBackend(StorageBackend):
    """Simulated storage: a dict of path to bytes."""

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self._blobs = {}

    def _write(self, path, data):
        self._blobs[path] = bytes(data)

    def _read(self, path):
        return self._blobs.get(path)

    def _remove(self, path):
        del self._blobs[path]

    def _size(self, path):
        data = self._blobs.get(path)
        return None if data is None else len(data)

    def _paths(self):
        return list(self._blobs)


class FilesystemBackend(StorageBackend):
    """Stores blobs under a root directory, mirroring the logical paths."""

    def __init__(self, root, **kwargs):
        super().__init__(**kwargs)
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)
        self.used_bytes = sum(
            os.path.getsize(os.path.join(dirpath, f))
            for dirpath, _, files in os.walk(self.root) for f in files)

    def _fs_path(self, path):
        full = os.path.abspath(os.path.join(self.root, path.lstrip("/")))
        if not full.startswith(self.root + os.sep) and full != self.root:
            raise NotFound(path)
        return full

    def _write(self, path, data):
        full = self._fs_path(path)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        tmp = full + ".part"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, full)

    def _read(self, path):
        full = self._fs_path(path)
        if not os.path.isfile(full):
            return None
        with open(full, "rb") as fh:
            return fh.read()

    def _remove(self, path):
        os.remove(self._fs_path(path))

    def _size(self, path):
        full = self._fs_path(path)
        return os.path.getsize(full) if os.path.isfile(full) else None

    def _paths(self):
        out = []
        for dirpath, _, files in os.walk(self.root):
            for f in files:
                rel = os.path.relpath(os.path.join(dirpath, f), self.root)
                out.append("/" + rel.replace(os.sep, "/"))
        return out


class BackendRegistry:
    """Runtime mapping of storage element name to its backend instance."""

    def __init__(self):
        self._backends = {}

    def attach(self, rse_name, backend):
        self._backends[rse_name] = backend

    def get(self, rse_name) -> StorageBackend:
        try:
            return self._backends[rse_name]
        except KeyError:
            raise NotFound(f"no backend attached for {rse_name}") from None

    def has(self, rse_name) -> bool:
        return rse_name in self._backends


def build_backend(rse_name, spec, rng=None, data_dir=None) -> StorageBackend:
    """Construct a backend from the spec persisted on an RSE record.

    Filesystem roots default to ``<data_dir>/<rse_name>`` so independent
    processes (service, standalone daemons) reattach to the same bytes.
    """
    spec = dict(spec or {})
    kind = spec.pop("kind", "memory")
    root = spec.pop("root", None)
    knobs = {k: spec[k] for k in ("capacity", "fail_probability", "latency")
             if k in spec}
    if kind == "filesystem":
        if root is None:
            root = os.path.join(
                data_dir or os.environ.get("REPLICAT_DATA_DIR",
                                           "replicat-data"), rse_name)
        return FilesystemBackend(root, rng=rng, **knobs)
    if kind == "memory":
        return MemoryBackend(rng=rng, **knobs)
    raise NotFound(f"unknown backend kind {kind!r}")
