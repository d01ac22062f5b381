import hashlib
import io
import random
import zlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from replicat import errors
from replicat.backends import FilesystemBackend, MemoryBackend
from replicat.checksums import adler32_hex, checksum
from replicat.storage import hashed_relative_path


class TestChecksums:
    def test_adler32_empty_is_initial_value(self):
        assert checksum(b"", "ADLER32") == "00000001"

    def test_md5_empty_reference_vector(self):
        assert checksum(b"", "MD5") == "d41d8cd98f00b204e9800998ecf8427e"

    def test_adler32_known_value(self):
        assert checksum(b"Wikipedia", "ADLER32") == "11e60398"

    @given(st.binary(max_size=4096))
    def test_matches_reference_implementations(self, data):
        assert checksum(data, "ADLER32") == f"{zlib.adler32(data):08x}"
        assert checksum(data, "MD5") == hashlib.md5(data).hexdigest()

    def test_unknown_algorithm(self):
        with pytest.raises(ValueError):
            checksum(b"", "CRC32")


class TestPathPolicy:
    def test_hash_layout_matches_md5_oracle(self):
        digest = hashlib.md5(b"user.alice:file1").hexdigest()
        assert hashed_relative_path("user.alice", "file1") == \
            f"user.alice/{digest[0:2]}/{digest[2:4]}/file1"

    def test_deterministic_path_pure_function(self, grid):
        first = grid.system.storage.derive_path("SITE-A", "data", "f1")
        again = grid.system.storage.derive_path("SITE-A", "data", "f1")
        assert first == again
        assert first.startswith("/data/")

    def test_same_relative_path_across_rses(self, grid):
        a = grid.system.storage.derive_path("SITE-A", "data", "f1")
        b = grid.system.storage.derive_path("SITE-B", "data", "f1")
        assert a == b  # same prefix configured on both

    def test_deterministic_rejects_explicit_path(self, grid):
        with pytest.raises(errors.PathPolicyViolation):
            grid.system.storage.derive_path("SITE-A", "data", "f1",
                                            explicit_path="raw/f1")

    def test_non_deterministic_requires_and_keeps_path(self, harness):
        harness.rse("TZERO", deterministic=False)
        with pytest.raises(errors.MissingPath):
            harness.system.storage.derive_path("TZERO", "data", "f1")
        path = harness.system.storage.derive_path(
            "TZERO", "data", "f1", explicit_path="raw/2018/run123/f1")
        assert path == "/data/raw/2018/run123/f1"

    def test_purity_over_many_names(self, grid):
        rng = random.Random(42)
        names = [f"file-{rng.randrange(10**9):x}" for _ in range(2000)]
        first = [hashed_relative_path("s", n) for n in names]
        second = [hashed_relative_path("s", n) for n in names]
        assert first == second

    def test_path_collision_detected(self, harness):
        harness.rse("TZERO", deterministic=False)
        with harness.system.store.transaction() as txn:
            harness.system.storage.register_replica(
                txn, "TZERO", "data", "f1", "AVAILABLE", 1, "00000001",
                path="same/path")
            with pytest.raises(errors.PathCollision):
                harness.system.storage.register_replica(
                    txn, "TZERO", "data", "f2", "AVAILABLE", 1, "00000001",
                    path="same/path")


class TestRseRegistry:
    def test_add_rse_with_implied_name_attribute(self, harness):
        record = harness.rse("CERN-DISK", attributes={"tier": "1",
                                                      "country": "CH"})
        assert record["attributes"]["name"] == "CERN-DISK"
        assert record["attributes"]["country"] == "CH"

    def test_duplicate_rse(self, harness):
        harness.rse("SITE-X")
        with pytest.raises(errors.DuplicateRse):
            harness.rse("SITE-X")

    def test_name_attribute_cannot_be_overridden(self, harness):
        with pytest.raises(errors.InvalidProtocol):
            harness.system.storage.add_rse(
                "X", attributes={"name": "Y"},
                protocols=[{"scheme": "mock", "prefix": "/"}])

    def test_protocol_priorities_validated(self, harness):
        with pytest.raises(errors.InvalidProtocol):
            harness.system.storage.add_rse(
                "X", protocols=[{"scheme": "mock",
                                 "priorities": {"read": 0}}])

    def test_duplicate_priority_rank_rejected(self, harness):
        with pytest.raises(errors.InvalidProtocol):
            harness.system.storage.add_rse("X", protocols=[
                {"scheme": "mock", "prefix": "/a"},
                {"scheme": "mock", "prefix": "/b"},
            ])


class TestDistances:
    def _ranked_oracle(self, distances, sources, dst):
        usable = [(distances.get((s, dst), 0), s)
                  for s in sources if s != dst]
        usable = [(d, s) for d, s in usable if d >= 1]
        return [s for _, s in sorted(usable)]

    def test_ranked_sources_example(self, harness):
        for name in ("A", "B", "C", "D"):
            harness.rse(name)
        harness.system.storage.set_distance("A", "D", 2)
        harness.system.storage.set_distance("B", "D", 1)
        harness.system.storage.set_distance("C", "D", 0)
        assert harness.system.storage.ranked_sources(
            ["A", "B", "C"], "D") == ["B", "A"]

    def test_no_linked_source(self, harness):
        harness.rse("A")
        harness.rse("B")
        assert harness.system.storage.ranked_sources(["A"], "B") == []

    def test_ties_break_lexicographically(self, harness):
        for name in ("A", "B", "D"):
            harness.rse(name)
        harness.system.storage.set_distance("B", "D", 1)
        harness.system.storage.set_distance("A", "D", 1)
        assert harness.system.storage.ranked_sources(
            ["B", "A"], "D") == ["A", "B"]

    def test_matches_bruteforce_on_random_matrices(self, harness):
        rng = random.Random(7)
        names = [f"R{i:02d}" for i in range(20)]
        for name in names:
            harness.rse(name)
        distances = {}
        for src in names:
            for dst in names:
                if src != dst and rng.random() < 0.5:
                    value = rng.randrange(0, 5)
                    distances[(src, dst)] = value
                    harness.system.storage.set_distance(src, dst, value)
        for _ in range(100):
            dst = rng.choice(names)
            sources = rng.sample(names, rng.randrange(1, len(names)))
            assert harness.system.storage.ranked_sources(sources, dst) == \
                self._ranked_oracle(distances, sources, dst)

    def test_distance_validation(self, harness):
        harness.rse("A")
        with pytest.raises(errors.UnknownRse):
            harness.system.storage.set_distance("A", "NOPE", 1)
        with pytest.raises(errors.InvalidProtocol):
            harness.system.storage.set_distance("A", "A", -1)


@pytest.mark.parametrize("make_backend", [
    lambda tmp_path: MemoryBackend(),
    lambda tmp_path: FilesystemBackend(tmp_path / "backend"),
], ids=["memory", "filesystem"])
class TestBackendContract:
    def test_put_stat_round_trip(self, make_backend, tmp_path):
        backend = make_backend(tmp_path)
        rng = random.Random(3)
        for i in range(20):
            payload = rng.randbytes(rng.randrange(0, 2048))
            path = f"/data/s/{i:02d}/blob{i}"
            backend.put(path, payload)
            stat = backend.stat(path)
            assert stat == {"bytes": len(payload),
                            "adler32": adler32_hex(payload)}
            assert backend.get(path) == payload

    def test_delete_idempotent_in_effect(self, make_backend, tmp_path):
        backend = make_backend(tmp_path)
        backend.put("/x", b"abc")
        backend.delete("/x")
        with pytest.raises(errors.NotFound):
            backend.delete("/x")
        with pytest.raises(errors.NotFound):
            backend.get("/x")

    def test_capacity_enforced(self, make_backend, tmp_path):
        backend = make_backend(tmp_path)
        backend.capacity = 10
        backend.put("/a", b"12345")
        with pytest.raises(errors.InsufficientSpace):
            backend.put("/b", b"123456")
        backend.put("/b", b"12345")
        assert backend.used_bytes == 10

    def test_overwrite_updates_usage(self, make_backend, tmp_path):
        backend = make_backend(tmp_path)
        backend.put("/a", b"12345")
        backend.put("/a", b"12")
        assert backend.used_bytes == 2

    def test_fault_injection_total(self, make_backend, tmp_path):
        backend = make_backend(tmp_path)
        backend.put("/a", b"x")
        backend.fail_probability = 1.0
        for op in (lambda: backend.put("/b", b"y"),
                   lambda: backend.get("/a"),
                   lambda: backend.delete("/a"),
                   lambda: backend.stat("/a"),
                   lambda: backend.list()):
            with pytest.raises(errors.InjectedFailure):
                op()

    def test_list_sorted_with_prefix(self, make_backend, tmp_path):
        backend = make_backend(tmp_path)
        backend.put("/b/2", b"x")
        backend.put("/a/1", b"x")
        backend.put("/a/3", b"x")
        assert backend.list() == ["/a/1", "/a/3", "/b/2"]
        assert backend.list("/a/") == ["/a/1", "/a/3"]


class TestAccessTracking:
    def test_access_time_is_monotone_max(self, grid):
        grid.upload("data", "f1", "SITE-A")
        grid.system.storage.record_access("SITE-A", "data", "f1", at=500.0)
        assert grid.system.storage.get_replica(
            "SITE-A", "data", "f1")["accessed_at"] == 500.0
        grid.system.storage.record_access("SITE-A", "data", "f1", at=100.0)
        assert grid.system.storage.get_replica(
            "SITE-A", "data", "f1")["accessed_at"] == 500.0

    def test_unknown_replica(self, grid):
        with pytest.raises(errors.UnknownReplica):
            grid.system.storage.record_access("SITE-A", "data", "ghost")

    def test_volatile_missing_copy_flagged_suspicious(self, harness):
        harness.rse("CACHE", volatile=True)
        harness.upload("data", "f1", "CACHE")
        replica = harness.system.storage.get_replica("CACHE", "data", "f1")
        harness.system.backends.get("CACHE").delete(replica["path"])
        updated = harness.system.storage.record_access("CACHE", "data", "f1")
        assert updated["suspicious"] == 1
        assert harness.system.storage.get_replica(
            "CACHE", "data", "f1")["state"] == "BAD"


class TestDumps:
    def test_dump_format_sorted_one_path_per_line(self, grid):
        for i in (3, 1, 2):
            grid.upload("data", f"f{i}", "SITE-A", payload=bytes([i]))
        paths = grid.system.storage.catalog_dump("SITE-A")
        assert paths == sorted(paths)
        buffer = io.StringIO()
        grid.system.storage.write_dump(paths, buffer)
        text = buffer.getvalue()
        assert text.endswith("\n") and len(text.splitlines()) == 3

    def test_storage_and_catalog_agree_after_uploads(self, grid):
        for i in range(5):
            grid.upload("data", f"g{i}", "SITE-B", payload=bytes([i]))
        assert grid.system.storage.storage_dump("SITE-B") == \
            grid.system.storage.catalog_dump("SITE-B")
