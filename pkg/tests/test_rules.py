import collections

import pytest

from replicat import errors, invariants


def add_file(h, name, rse=None, payload=b"0123456789", scope="data",
             owner="root"):
    if rse:
        h.upload(scope, name, rse, payload=payload, owner=owner)
    else:
        from replicat.checksums import adler32_hex
        h.system.catalog.add_did(scope, name, "FILE", owner,
                                 bytes_=len(payload),
                                 adler32=adler32_hex(payload))


def brute_force_usage(system):
    """Independent recount: distinct (account, rse, file) lock triples."""
    with system.store.transaction() as txn:
        rules = {rid: r for rid, r in txn.scan("rules")}
        triples = {}
        for _, lock in txn.scan("locks"):
            rule = rules[lock["rule_id"]]
            replica = txn.get(
                "replicas", f"{lock['rse']}|{lock['scope']}:{lock['name']}")
            triples[(rule["account"], lock["rse"],
                     f"{lock['scope']}:{lock['name']}")] = replica["bytes"]
    usage = collections.defaultdict(int)
    for (account, rse, _), size in triples.items():
        usage[(account, rse)] += size
    return dict(usage)


class TestAddRule:
    def test_lifetime_sets_expiry(self, grid):
        add_file(grid, "myanalysis", "SITE-B", owner="user.alice",
                 scope="data")
        rule = grid.system.rules.add_rule(
            "user.alice", "data", "myanalysis", 1, "tier=2",
            lifetime=48 * 3600.0)
        assert rule["expires_at"] == pytest.approx(
            grid.clock.now() + 48 * 3600.0)

    def test_existing_replica_means_no_transfer(self, grid):
        add_file(grid, "f", "SITE-B")
        rule = grid.system.rules.add_rule("root", "data", "f", 1, "tier=2")
        assert rule["state"] == "OK"
        assert grid.system.transfer.list_requests() == []

    def test_insufficient_targets(self, grid):
        add_file(grid, "f", "SITE-A")
        with pytest.raises(errors.InsufficientTargets):
            grid.system.rules.add_rule("root", "data", "f", 3, "tier=2")

    def test_unknown_did(self, grid):
        with pytest.raises(errors.UnknownDid):
            grid.system.rules.add_rule("root", "data", "ghost", 1, "*")

    def test_invalid_expression(self, grid):
        add_file(grid, "f", "SITE-A")
        with pytest.raises(errors.InvalidExpression):
            grid.system.rules.add_rule("root", "data", "f", 1, "a&|b")

    def test_write_disabled_rse_not_a_candidate(self, grid):
        add_file(grid, "f", "SITE-A")
        grid.system.storage.set_availability("SITE-B", write=False)
        with pytest.raises(errors.InsufficientTargets):
            grid.system.rules.add_rule("root", "data", "f", 2, "tier=2")

    def test_rule_on_dataset_locks_all_files(self, grid):
        grid.system.catalog.add_did("data", "ds", "DATASET", "root")
        for i in range(4):
            add_file(grid, f"f{i}", "SITE-A")
        grid.system.catalog.attach("data", "ds",
                                   [("data", f"f{i}") for i in range(4)])
        rule = grid.system.rules.add_rule("root", "data", "ds", 1, "SITE-A")
        assert rule["locks_ok"] == 4
        assert rule["state"] == "OK"

    def test_transfer_created_for_missing_copy(self, grid):
        add_file(grid, "f", "SITE-A")
        rule = grid.system.rules.add_rule("root", "data", "f", 2, "*")
        assert rule["state"] == "REPLICATING"
        assert rule["locks_ok"] == 1 and rule["locks_replicating"] == 1
        requests = grid.system.transfer.list_requests(state="QUEUED")
        assert len(requests) == 1


class TestSelectTargets:
    def test_forced_choice_prefers_existing_replica(self, grid):
        add_file(grid, "f", "SITE-C")
        with grid.system.store.transaction() as txn:
            chosen = grid.system.rules.select_targets(
                txn, "data", "f", ["SITE-A", "SITE-B", "SITE-C"], 1)
        assert chosen == ["SITE-C"]

    def test_saturation_takes_everything(self, grid):
        add_file(grid, "f")
        with grid.system.store.transaction() as txn:
            chosen = grid.system.rules.select_targets(
                txn, "data", "f", ["SITE-A", "SITE-B", "SITE-C"], 3)
        assert sorted(chosen) == ["SITE-A", "SITE-B", "SITE-C"]

    def test_weighted_sampling_monte_carlo(self, grid):
        # weight A:3, B:1 -> P(A) = 0.75 within +-0.03 over 10^4 draws
        grid.system.storage.set_attribute("SITE-A", "w", "3")
        grid.system.storage.set_attribute("SITE-B", "w", "1")
        add_file(grid, "f")
        hits = 0
        with grid.system.store.transaction() as txn:
            for _ in range(10_000):
                chosen = grid.system.rules.select_targets(
                    txn, "data", "f", ["SITE-A", "SITE-B"], 1,
                    weight_key="w")
                hits += chosen == ["SITE-A"]
        assert abs(hits / 10_000 - 0.75) <= 0.03

    def test_weightless_candidates_never_drawn(self, grid):
        grid.system.storage.set_attribute("SITE-A", "w", "2")
        add_file(grid, "f")
        with grid.system.store.transaction() as txn:
            for _ in range(50):
                assert grid.system.rules.select_targets(
                    txn, "data", "f", ["SITE-A", "SITE-B"], 1,
                    weight_key="w") == ["SITE-A"]
            with pytest.raises(errors.InsufficientTargets):
                grid.system.rules.select_targets(
                    txn, "data", "f", ["SITE-A", "SITE-B"], 2,
                    weight_key="w")


class TestQuota:
    def test_shared_copy_double_charging(self, grid):
        grid.account("user.bob")
        grid.system.rules.set_limit("user.bob", "SITE-A", 10 ** 9)
        payload = b"x" * 1000
        add_file(grid, "f", "SITE-A", payload=payload)
        grid.system.rules.add_rule("user.alice", "data", "f", 1, "SITE-A")
        grid.system.rules.add_rule("user.bob", "data", "f", 1, "SITE-A")
        alice = grid.system.rules.account_usage("user.alice", "SITE-A")[0]
        bob = grid.system.rules.account_usage("user.bob", "SITE-A")[0]
        assert alice["used_bytes"] == 1000 and bob["used_bytes"] == 1000
        assert grid.system.storage.used_bytes("SITE-A") == 1000
        assert brute_force_usage(grid.system)[("user.alice", "SITE-A")] == \
            1000

    def test_same_account_two_rules_charged_once(self, grid):
        payload = b"x" * 500
        add_file(grid, "f", "SITE-A", payload=payload)
        grid.system.rules.add_rule("user.alice", "data", "f", 1, "SITE-A")
        grid.system.rules.add_rule("user.alice", "data", "f", 1,
                                   "SITE-A|SITE-B")
        usage = grid.system.rules.account_usage("user.alice", "SITE-A")[0]
        assert usage["used_bytes"] == 500

    def test_over_limit_denied(self, grid):
        grid.system.rules.set_limit("user.alice", "SITE-A", 10)
        add_file(grid, "f", "SITE-A", payload=b"x" * 11)
        with pytest.raises(errors.QuotaExceeded):
            grid.system.rules.add_rule("user.alice", "data", "f", 1,
                                       "SITE-A")
        assert grid.system.rules.account_usage(
            "user.alice", "SITE-A")[0]["used_bytes"] == 0

    def test_no_limit_record_denies_plain_account(self, grid):
        grid.account("user.carol")
        add_file(grid, "f", "SITE-A")
        with pytest.raises(errors.QuotaExceeded):
            grid.system.rules.add_rule("user.carol", "data", "f", 1,
                                       "SITE-A")

    def test_privileged_overflow_emits_override_event(self, grid):
        grid.system.rules.set_limit("root", "SITE-A", 1)
        add_file(grid, "f", "SITE-A", payload=b"x" * 100)
        grid.system.gateway.create_cursor("probe")
        grid.system.rules.add_rule("root", "data", "f", 1, "SITE-A")
        events = grid.system.gateway.drain("probe",
                                           event_type="quota-override")
        assert len(events) == 1

    def test_check_quota(self, grid):
        grid.system.rules.set_limit("user.alice", "SITE-A", 10 * 2 ** 30)
        with grid.system.store.transaction() as txn:
            txn.put("account_usage", "user.alice|SITE-A",
                    {"bytes": 9 * 2 ** 30})
        assert not grid.system.rules.check_quota("user.alice", "SITE-A",
                                                 2 * 2 ** 30)
        assert grid.system.rules.check_quota("user.alice", "SITE-A",
                                             1 * 2 ** 30)


class TestRemoveRule:
    def test_grace_keeps_replica_protected_from_deletion(self, grid):
        add_file(grid, "f", "SITE-A")
        rule = grid.system.rules.add_rule("user.alice", "data", "f", 1,
                                          "SITE-A")
        grid.system.rules.remove_rule(rule["rule_id"], account="user.alice")
        replica = grid.system.storage.get_replica("SITE-A", "data", "f")
        assert replica["lock_count"] == 0
        assert replica["tombstone"] == pytest.approx(
            grid.clock.now() + 24 * 3600.0)
        assert grid.system.reaper.reap("SITE-A") == 0  # not eligible yet

    def test_shared_replica_keeps_other_lock(self, grid):
        grid.account("user.bob")
        grid.system.rules.set_limit("user.bob", "SITE-A", 10 ** 9)
        add_file(grid, "f", "SITE-A")
        r1 = grid.system.rules.add_rule("user.alice", "data", "f", 1,
                                        "SITE-A")
        grid.system.rules.add_rule("user.bob", "data", "f", 1, "SITE-A")
        grid.system.rules.remove_rule(r1["rule_id"], account="user.alice")
        replica = grid.system.storage.get_replica("SITE-A", "data", "f")
        assert replica["lock_count"] == 1
        assert replica["tombstone"] is None

    def test_purge_now_requires_privilege(self, grid):
        add_file(grid, "f", "SITE-A")
        rule = grid.system.rules.add_rule("user.alice", "data", "f", 1,
                                          "SITE-A")
        with pytest.raises(errors.PermissionDenied):
            grid.system.rules.remove_rule(rule["rule_id"],
                                          account="user.alice",
                                          purge_now=True)
        grid.system.rules.remove_rule(rule["rule_id"], account="root",
                                      purge_now=True)
        replica = grid.system.storage.get_replica("SITE-A", "data", "f")
        assert replica["tombstone"] == grid.clock.now()

    def test_only_owner_or_privileged(self, grid):
        grid.account("user.bob")
        add_file(grid, "f", "SITE-A")
        rule = grid.system.rules.add_rule("user.alice", "data", "f", 1,
                                          "SITE-A")
        with pytest.raises(errors.PermissionDenied):
            grid.system.rules.remove_rule(rule["rule_id"],
                                          account="user.bob")

    def test_new_lock_cancels_tombstone(self, grid):
        add_file(grid, "f", "SITE-A")
        rule = grid.system.rules.add_rule("user.alice", "data", "f", 1,
                                          "SITE-A")
        grid.system.rules.remove_rule(rule["rule_id"], account="root",
                                      purge_now=True)
        grid.system.rules.add_rule("user.alice", "data", "f", 1, "SITE-A")
        replica = grid.system.storage.get_replica("SITE-A", "data", "f")
        assert replica["tombstone"] is None and replica["lock_count"] == 1


class TestReevaluation:
    def test_attach_extends_rule(self, grid):
        grid.system.catalog.add_did("data", "ds", "DATASET", "root")
        rule = grid.system.rules.add_rule("root", "data", "ds", 1, "SITE-A")
        for i in range(5):
            add_file(grid, f"f{i}", "SITE-A")
        grid.system.catalog.attach("data", "ds",
                                   [("data", f"f{i}") for i in range(5)])
        grid.system.rules.evaluate_attachments()
        rule = grid.system.rules.get_rule(rule["rule_id"])
        assert rule["locks_ok"] == 5 and rule["state"] == "OK"

    def test_container_rule_two_levels_up(self, grid):
        grid.system.catalog.add_did("data", "cont", "CONTAINER", "root")
        grid.system.catalog.add_did("data", "ds", "DATASET", "root")
        grid.system.catalog.attach("data", "cont", [("data", "ds")])
        rule = grid.system.rules.add_rule("root", "data", "cont", 1,
                                          "SITE-A")
        add_file(grid, "f", "SITE-A")
        grid.system.catalog.attach("data", "ds", [("data", "f")])
        grid.system.rules.evaluate_attachments()
        rule = grid.system.rules.get_rule(rule["rule_id"])
        assert rule["locks_ok"] == 1

    def test_attach_without_rules_creates_no_locks(self, grid):
        grid.system.catalog.add_did("data", "ds", "DATASET", "root")
        add_file(grid, "f", "SITE-A")
        grid.system.catalog.attach("data", "ds", [("data", "f")])
        grid.system.rules.evaluate_attachments()
        with grid.system.store.transaction() as txn:
            assert txn.scan("locks") == []

    def test_detach_releases_locks(self, grid):
        grid.system.catalog.add_did("data", "ds", "DATASET", "root")
        add_file(grid, "f", "SITE-A")
        grid.system.catalog.attach("data", "ds", [("data", "f")])
        rule = grid.system.rules.add_rule("root", "data", "ds", 1, "SITE-A")
        grid.system.catalog.detach("data", "ds", [("data", "f")])
        grid.system.rules.evaluate_attachments()
        rule = grid.system.rules.get_rule(rule["rule_id"])
        assert rule["locks_ok"] == 0
        replica = grid.system.storage.get_replica("SITE-A", "data", "f")
        assert replica["lock_count"] == 0 and replica["tombstone"]

    def test_quota_shortfall_marks_rule_stuck_not_attach(self, grid):
        grid.system.rules.set_limit("user.alice", "SITE-A", 15)
        grid.system.catalog.add_did("data", "ds", "DATASET", "user.alice")
        rule = grid.system.rules.add_rule("user.alice", "data", "ds", 1,
                                          "SITE-A")
        add_file(grid, "big", "SITE-B", payload=b"x" * 100)
        grid.system.gateway.create_cursor("probe")
        grid.system.catalog.attach("data", "ds", [("data", "big")])
        grid.system.rules.evaluate_attachments()
        rule = grid.system.rules.get_rule(rule["rule_id"])
        assert rule["state"] == "STUCK" and rule["locks_stuck"] == 1
        assert grid.system.gateway.drain("probe", event_type="rule-stuck")
        # raising the limit lets the repairer revive it
        grid.system.rules.set_limit("user.alice", "SITE-A", 1000)
        grid.system.rules.repair_stuck()
        rule = grid.system.rules.get_rule(rule["rule_id"])
        assert rule["state"] == "REPLICATING"

    def test_placement_never_revisited(self, grid):
        grid.system.catalog.add_did("data", "ds", "DATASET", "root")
        for i in range(3):
            add_file(grid, f"f{i}", "SITE-A")
        grid.system.catalog.attach("data", "ds",
                                   [("data", f"f{i}") for i in range(3)])
        rule = grid.system.rules.add_rule("root", "data", "ds", 1, "*")
        with grid.system.store.transaction() as txn:
            locks_before = sorted(k for k, _ in txn.scan("locks"))
            requests_before = len(txn.scan("requests"))
        # drive re-evaluation again over unchanged content
        grid.system.catalog.attach("data", "ds", [("data", "f0")])
        grid.system.rules.evaluate_attachments()
        with grid.system.store.transaction() as txn:
            assert sorted(k for k, _ in txn.scan("locks")) == locks_before
            assert len(txn.scan("requests")) == requests_before

    def test_adding_rule_leaves_other_rules_untouched(self, grid):
        add_file(grid, "f", "SITE-A")
        r1 = grid.system.rules.add_rule("user.alice", "data", "f", 1,
                                        "SITE-A")
        locks_r1 = grid.system.rules.locks_of(r1["rule_id"])
        grid.system.rules.add_rule("root", "data", "f", 2, "*")
        assert grid.system.rules.locks_of(r1["rule_id"]) == locks_r1


class TestTransferOutcomes:
    def test_last_lock_ok_emits_rule_ok(self, grid):
        add_file(grid, "f", "SITE-A")
        grid.system.gateway.create_cursor("probe")
        rule = grid.system.rules.add_rule("root", "data", "f", 2,
                                          "SITE-A|SITE-B")
        assert grid.run_until(
            lambda: grid.system.rules.get_rule(rule["rule_id"])["state"]
            == "OK", max_ticks=30)
        events = grid.system.gateway.drain("probe", event_type="rule-ok")
        assert [e["payload"]["rule_id"] for e in events] == [rule["rule_id"]]

    def test_failure_marks_rule_stuck(self, grid):
        grid.system.tool.configure(failure_probability=1.0)
        add_file(grid, "f", "SITE-A")
        rule = grid.system.rules.add_rule("root", "data", "f", 2, "*")
        assert grid.run_until(
            lambda: grid.system.rules.get_rule(rule["rule_id"])["state"]
            == "STUCK", max_ticks=10)

    def test_done_after_rule_removed_is_harmless(self, grid):
        add_file(grid, "f", "SITE-A")
        rule = grid.system.rules.add_rule("root", "data", "f", 2, "*")
        grid.tick(2)  # submit
        grid.system.rules.remove_rule(rule["rule_id"], account="root",
                                      purge_now=True)
        grid.tick(10)  # poll + finish the orphan
        checks = invariants.check_all(grid.system)
        assert not any(checks.values())


class TestRepair:
    def test_transient_failure_then_recovery(self, grid):
        grid.system.tool.configure(failure_probability=1.0)
        add_file(grid, "f", "SITE-A")
        rule = grid.system.rules.add_rule("root", "data", "f", 2,
                                          "SITE-A|SITE-B")
        assert grid.run_until(
            lambda: grid.system.rules.get_rule(rule["rule_id"])["state"]
            == "STUCK", max_ticks=10)
        grid.system.tool.configure(failure_probability=0.0)
        assert grid.run_until(
            lambda: grid.system.rules.get_rule(rule["rule_id"])["state"]
            == "OK", max_ticks=60)

    def test_lock_moves_to_alternative_when_destination_broken(self, grid):
        backend = grid.system.backends.get("SITE-B")
        backend.fail_probability = 1.0  # destination writes always fail
        add_file(grid, "f", "SITE-A")
        rule = grid.system.rules.add_rule("root", "data", "f", 2,
                                          "SITE-A|SITE-B|SITE-C")
        # force placement onto the broken RSE for determinism
        with grid.system.store.transaction() as txn:
            locks = grid.system.rules.locks_of(rule["rule_id"], txn)
        if not any(l["rse"] == "SITE-B" for l in locks):
            backend.fail_probability = 0.0
            grid.system.backends.get("SITE-C").fail_probability = 1.0
        assert grid.run_until(
            lambda: grid.system.rules.get_rule(rule["rule_id"])["state"]
            == "OK", max_ticks=100)
        rses = {l["rse"] for l in grid.system.rules.locks_of(
            rule["rule_id"])}
        assert len(rses) == 2

    def test_no_alternative_stays_stuck_and_reported(self, grid):
        grid.system.backends.get("SITE-B").fail_probability = 1.0
        add_file(grid, "f", "SITE-A")
        rule = grid.system.rules.add_rule("root", "data", "f", 2,
                                          "SITE-A|SITE-B")
        for _ in range(40):
            grid.tick()
            report = grid.system.rules.repair_stuck()
            if report["unrepairable"]:
                break
        assert grid.system.rules.get_rule(
            rule["rule_id"])["state"] == "STUCK"
        assert report["unrepairable"] >= 1


class TestSubscriptions:
    def _tape_subscription(self, grid, account="root"):
        grid.rse("TAPE-1", attributes={"type": "tape"})
        grid.mesh(1)
        return grid.system.rules.add_subscription(
            account,
            {"metadata_matches": {"datatype": "RAW"}},
            [{"rse_expression": "type=tape", "copies": 1}])

    def test_matching_did_gets_templated_rule(self, grid):
        self._tape_subscription(grid)
        grid.system.catalog.add_did("data", "raw1", "DATASET", "root",
                                    metadata={"datatype": "RAW"})
        created = grid.system.rules.match_subscriptions()
        assert len(created) == 1
        rule = grid.system.rules.get_rule(created[0])
        assert rule["rse_expression"] == "type=tape"
        assert rule["account"] == "root"

    def test_non_matching_did_ignored(self, grid):
        self._tape_subscription(grid)
        grid.system.catalog.add_did("data", "aod1", "DATASET", "root",
                                    metadata={"datatype": "AOD"})
        assert grid.system.rules.match_subscriptions() == []

    def test_replay_does_not_duplicate(self, grid):
        sub = self._tape_subscription(grid)
        grid.system.catalog.add_did("data", "raw1", "DATASET", "root",
                                    metadata={"datatype": "RAW"})
        assert len(grid.system.rules.match_subscriptions()) == 1
        # rewind the cursor to replay the same events
        with grid.system.store.transaction() as txn:
            txn.put("cursors", "subscription-matcher",
                    {"name": "subscription-matcher", "position": 0})
        assert grid.system.rules.match_subscriptions() == []

    def test_rule_failure_becomes_event_not_exception(self, grid):
        grid.account("user.poor")
        sub = grid.system.rules.add_subscription(
            "user.poor", {"metadata_matches": {"datatype": "RAW"}},
            [{"rse_expression": "SITE-A", "copies": 1}])
        grid.system.gateway.create_cursor("probe")
        grid.upload("data", "raw9", "SITE-B", metadata={"datatype": "RAW"})
        assert grid.system.rules.match_subscriptions() == []
        failed = grid.system.gateway.drain(
            "probe", event_type="subscription-rule-failed")
        assert failed and failed[0]["payload"]["error"] == "QuotaExceeded"

    def test_invalid_filter(self, grid):
        with pytest.raises(errors.InvalidFilter):
            grid.system.rules.add_subscription(
                "root", {"name_pattern": "["},
                [{"rse_expression": "*", "copies": 1}])
        with pytest.raises(errors.InvalidFilter):
            grid.system.rules.add_subscription("root", {}, [])


class TestCounterInvariant:
    def test_counters_match_recount_through_lifecycle(self, grid):
        grid.system.catalog.add_did("data", "ds", "DATASET", "root")
        for i in range(6):
            add_file(grid, f"f{i}", "SITE-A")
        grid.system.catalog.attach("data", "ds",
                                   [("data", f"f{i}") for i in range(6)])
        grid.system.rules.add_rule("root", "data", "ds", 2, "*")
        for _ in range(20):
            grid.tick()
            assert not invariants.counter_consistency(grid.system)
            assert not invariants.quota_accounting(grid.system)
