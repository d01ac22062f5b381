import random

import pytest

from replicat import errors, invariants
from replicat.auditor import classify, classify_stream


def truth_table_oracle(before, storage, after):
    """Independent oracle: set membership over the 8 combinations."""
    b, s, a = set(before), set(storage), set(after)
    out = {"consistent": [], "lost": [], "dark": [], "transient": []}
    for path in sorted(b | s | a):
        triple = (path in b, path in s, path in a)
        category = {
            (True, True, True): "consistent",
            (True, False, True): "lost",
            (False, True, False): "dark",
        }.get(triple, "transient")
        out[category].append(path)
    return out


class TestClassify:
    def test_spec_examples(self):
        result = classify(["/a", "/b", "/c"], ["/a", "/d"], ["/a", "/b"])
        assert result["consistent"] == ["/a"]
        assert result["lost"] == ["/b"]
        assert result["dark"] == ["/d"]
        assert result["transient"] == ["/c"]

    def test_all_eight_membership_cases(self):
        # one path per non-empty membership combination
        paths = {
            (1, 1, 1): "/p111", (1, 1, 0): "/p110", (1, 0, 1): "/p101",
            (1, 0, 0): "/p100", (0, 1, 1): "/p011", (0, 1, 0): "/p010",
            (0, 0, 1): "/p001",
        }
        before = sorted(p for (b, s, a), p in paths.items() if b)
        storage = sorted(p for (b, s, a), p in paths.items() if s)
        after = sorted(p for (b, s, a), p in paths.items() if a)
        result = classify(before, storage, after)
        assert result["consistent"] == ["/p111"]
        assert result["lost"] == ["/p101"]
        assert result["dark"] == ["/p010"]
        assert sorted(result["transient"]) == ["/p001", "/p011", "/p100",
                                               "/p110"]

    def test_matches_oracle_on_random_dumps(self):
        rng = random.Random(13)
        universe = [f"/d/{i:05d}" for i in range(5000)]
        for _ in range(20):
            before = sorted(p for p in universe if rng.random() < 0.5)
            storage = sorted(p for p in universe if rng.random() < 0.5)
            after = sorted(p for p in universe if rng.random() < 0.5)
            assert classify(before, storage, after) == \
                truth_table_oracle(before, storage, after)

    def test_streaming_consumes_iterators(self):
        # generators (no len, no random access) are enough
        result = classify(iter(["/a"]), iter(["/a"]), iter(["/a"]))
        assert result["consistent"] == ["/a"]

    def test_unsorted_dump_detected(self):
        with pytest.raises(errors.UnsortedDump):
            classify(["/b", "/a"], [], [])
        with pytest.raises(errors.UnsortedDump):
            classify([], ["/a", "/a"], [])  # duplicates are disorder too

    def test_missing_dump(self):
        with pytest.raises(errors.MissingDump):
            classify(None, [], [])

    def test_stream_yields_in_path_order(self):
        pairs = list(classify_stream(["/a", "/c"], ["/b"], ["/a"]))
        assert [p for p, _ in pairs] == ["/a", "/b", "/c"]


class TestApplyFindings:
    def test_dark_paths_queued_for_deletion(self, grid):
        grid.system.gateway.create_cursor("probe")
        result = grid.system.auditor.apply_findings(
            "SITE-A", {"consistent": [], "lost": [],
                       "dark": ["/data/x/1", "/data/x/2", "/data/x/3",
                                "/data/x/4", "/data/x/5"],
                       "transient": []})
        assert result["dark_queued"] == 5
        with grid.system.store.transaction() as txn:
            assert len(txn.scan("dark_deletions")) == 5
        assert len(grid.system.gateway.drain(
            "probe", event_type="deletion-queued")) == 5

    def test_live_catalog_guard_skips_registered_paths(self, grid):
        grid.upload("data", "f", "SITE-A")
        replica = grid.system.storage.get_replica("SITE-A", "data", "f")
        result = grid.system.auditor.apply_findings(
            "SITE-A", {"consistent": [], "lost": [],
                       "dark": [replica["path"]], "transient": []})
        assert result["dark_queued"] == 0

    def test_lost_paths_become_bad_replicas(self, grid):
        grid.upload("data", "f1", "SITE-A")
        grid.upload("data", "f2", "SITE-A")
        paths = [grid.system.storage.get_replica("SITE-A", "data", n)["path"]
                 for n in ("f1", "f2")]
        result = grid.system.auditor.apply_findings(
            "SITE-A", {"consistent": [], "lost": sorted(paths), "dark": [],
                       "transient": []})
        assert result["lost_flagged"] == 2
        for name in ("f1", "f2"):
            assert grid.system.storage.get_replica(
                "SITE-A", "data", name)["state"] == "BAD"

    def test_transient_only_no_actions(self, grid):
        result = grid.system.auditor.apply_findings(
            "SITE-A", {"consistent": [], "lost": [], "dark": [],
                       "transient": ["/data/in/flight"]})
        assert result == {"dark_queued": 0, "lost_flagged": 0}

    def test_end_to_end_audit_detects_inconsistencies(self, grid):
        grid.upload("data", "kept", "SITE-A", payload=b"kk")
        grid.upload("data", "vanished", "SITE-A", payload=b"vv")
        backend = grid.system.backends.get("SITE-A")
        gone = grid.system.storage.get_replica("SITE-A", "data", "vanished")
        backend.delete(gone["path"])
        backend.put("/data/stray", b"ss")
        catalog = grid.system.storage.catalog_dump("SITE-A")
        storage = grid.system.storage.storage_dump("SITE-A")
        report, classification = grid.system.auditor.run_audit(
            "SITE-A", storage, catalog, catalog, apply=True)
        assert report["lost"] == 1 and report["dark"] == 1
        assert report["consistent"] == 1
        assert grid.system.storage.get_replica(
            "SITE-A", "data", "vanished")["state"] == "BAD"
        grid.system.reaper.process_dark("SITE-A")
        assert not backend.exists("/data/stray")


class TestDeclareBad:
    def test_operator_declares_several(self, grid):
        for i in range(3):
            grid.upload("data", f"f{i}", "SITE-A")
        count = grid.system.auditor.declare_bad(
            [("SITE-A", "data", f"f{i}") for i in range(3)],
            reason="DECLARED", declarer="root")
        assert count == 3

    def test_unprivileged_declarer_rejected(self, grid):
        grid.upload("data", "f", "SITE-A")
        with pytest.raises(errors.PermissionDenied):
            grid.system.auditor.declare_bad([("SITE-A", "data", "f")],
                                            reason="DECLARED",
                                            declarer="user.alice")

    def test_unknown_replica(self, grid):
        with pytest.raises(errors.UnknownReplica):
            grid.system.auditor.declare_bad([("SITE-A", "data", "ghost")],
                                            reason="DECLARED",
                                            declarer="root")

    def test_third_consecutive_source_failure_goes_auto_bad(self, grid):
        # two copies so the condemned source is recoverable
        grid.upload("data", "f", "SITE-A", payload=b"payload")
        grid.upload("data", "f", "SITE-C", payload=b"payload")
        grid.system.tool.configure(failure_probability=1.0)
        grid.system.storage.set_distance("SITE-C", "SITE-B", 9)  # A ranks 1st
        rule = grid.system.rules.add_rule("root", "data", "f", 3, "*")
        threshold = grid.system.config.source_failure_threshold
        for _ in range(threshold):
            grid.system.transfer.submit_pending()
            grid.clock.advance(5)
            grid.system.transfer.poll_submitted()
            grid.system.transfer.finish()
            grid.clock.advance(grid.system.config.retry_delay + 1)
            grid.system.rules.repair_stuck()
        assert grid.system.storage.get_replica(
            "SITE-A", "data", "f")["state"] == "BAD"

    def test_last_copy_not_condemned_by_source_failures(self, grid):
        grid.upload("data", "f", "SITE-A", payload=b"only copy")
        grid.system.tool.configure(failure_probability=1.0)
        grid.system.rules.add_rule("root", "data", "f", 2, "*")
        for _ in range(10):
            grid.tick()
        assert grid.system.storage.get_replica(
            "SITE-A", "data", "f")["state"] == "AVAILABLE"


class TestRecovery:
    def test_restore_from_alternate_copy(self, grid):
        payload = b"the good bits"
        grid.upload("data", "f", "SITE-A", payload=payload)
        grid.upload("data", "f", "SITE-B", payload=payload)
        rule = grid.system.rules.add_rule("root", "data", "f", 2,
                                          "SITE-A|SITE-B")
        # corrupt and condemn the copy at A
        replica = grid.system.storage.get_replica("SITE-A", "data", "f")
        grid.system.backends.get("SITE-A").put(replica["path"], b"garbage!")
        grid.system.auditor.declare_bad([("SITE-A", "data", "f")],
                                        reason="CHECKSUM_MISMATCH",
                                        declarer="root")
        report = grid.system.auditor.recover_bad()
        assert report["recovering"] == 1
        assert grid.run_until(
            lambda: grid.system.storage.get_replica(
                "SITE-A", "data", "f")["state"] == "AVAILABLE",
            max_ticks=30)
        fixed = grid.system.storage.get_replica("SITE-A", "data", "f")
        assert grid.system.backends.get("SITE-A").get(fixed["path"]) == \
            payload
        # replica count back to its pre-loss value at the affected RSE
        assert len(grid.system.storage.list_replicas("data", "f")) == 2
        assert not invariants.lock_protection(grid.system)

    def test_last_copy_lost_detaches_and_notifies_owner(self, grid):
        grid.system.catalog.add_did("data", "ds", "DATASET", "root")
        grid.upload("data", "f", "SITE-A", payload=b"bits", owner="root")
        grid.system.catalog.attach("data", "ds", [("data", "f")])
        grid.system.catalog.set_status("data", "ds", "CLOSE")
        rule = grid.system.rules.add_rule("root", "data", "ds", 1, "SITE-A")
        grid.system.gateway.create_cursor("probe")
        grid.system.auditor.declare_bad([("SITE-A", "data", "f")],
                                        reason="LOST_ON_STORAGE",
                                        declarer="root")
        report = grid.system.auditor.recover_bad()
        assert report["lost"] == 1
        events = grid.system.gateway.drain("probe", event_type="file-lost")
        assert events[0]["payload"]["account"] == "root"
        # removed from the (closed) dataset via the administrative path
        assert grid.system.catalog.list_files("data", "ds") == []
        assert grid.system.catalog.get_did(
            "data", "f")["availability"] == "LOST"
        # dataset rule holds no locks on the vanished file
        rule = grid.system.rules.get_rule(rule["rule_id"])
        assert rule["locks_ok"] + rule["locks_replicating"] + \
            rule["locks_stuck"] == 0
        assert not invariants.lock_protection(grid.system)
        assert not invariants.counter_consistency(grid.system)

    def test_no_linked_source_retries_next_cycle(self, grid):
        payload = b"bits"
        grid.upload("data", "f", "SITE-A", payload=payload)
        grid.upload("data", "f", "SITE-B", payload=payload)
        grid.system.auditor.declare_bad([("SITE-A", "data", "f")],
                                        reason="DECLARED", declarer="root")
        report = grid.system.auditor.recover_bad()
        assert report["recovering"] == 1
        # the injected request has a source (B); drop the link to strand it
        grid.system.storage.set_distance("SITE-B", "SITE-A", 0)
        grid.system.storage.set_distance("SITE-C", "SITE-A", 0)
        assert grid.system.transfer.submit_pending() == 0
        request = grid.system.transfer.list_requests(state="QUEUED")[0]
        assert request["no_source"] and request["activity"] == "recovery"
