"""Discrete-event simulator: determinism, faults, and safety checks."""

import pytest

from pbftkit import simnet
from pbftkit.simnet import (CRASH_AT, EQUIVOCATE, MUTE, NonQuiescent,
                            SimConfig, World, trace_lines)

FAST = dict(auth=False, client_auth=False)


def run_world(**kw):
    kw = {**FAST, **kw}
    until = kw.pop("until", None)
    world = World(SimConfig(**kw))
    world.run(until=until)
    return world


class TestDeterminism:
    def test_same_seed_same_trace(self):
        cfg = dict(seed=11, drop_prob=0.05, requests_per_client=20,
                   num_clients=2)
        a = run_world(**cfg)
        b = run_world(**cfg)
        assert trace_lines(a.trace) == trace_lines(b.trace)
        assert a.committed == b.committed

    def test_different_seed_different_trace(self):
        a = run_world(seed=1, drop_prob=0.05, requests_per_client=20)
        b = run_world(seed=2, drop_prob=0.05, requests_per_client=20)
        assert trace_lines(a.trace) != trace_lines(b.trace)


class TestFailureFree:
    @pytest.mark.parametrize("n,f", [(4, 1), (7, 2), (10, 3)])
    def test_all_requests_commit_everywhere(self, n, f):
        world = run_world(n=n, f=f, requests_per_client=15, num_clients=2)
        for i in range(n):
            assert world.total_requests_committed(i) == 30
        assert world.max_view() == 0
        world.check_agreement()
        world.check_total_order()

    def test_client_sees_all_completions(self):
        world = run_world(requests_per_client=25)
        sess = world.clients[4].session
        assert [c.request_id for c in sess.completions] == list(range(25))

    def test_validity_checks_real_signatures(self):
        world = World(SimConfig(requests_per_client=3))
        world.run()
        world.check_validity()
        # forge one committed request and expect the oracle to object
        seq, digest, batch = world.committed[0][0]
        bad = batch[0].__class__(batch[0].client_id, batch[0].request_id,
                                 b"forged", batch[0].signature)
        world.committed[0][0] = (seq, digest, (bad,))
        with pytest.raises(AssertionError):
            world.check_validity()


class TestLossyLinks:
    def test_drops_do_not_break_safety(self):
        for seed in range(5):
            world = run_world(seed=seed, drop_prob=0.15,
                              requests_per_client=10, until=60.0)
            world.check_agreement()
            world.check_total_order()

    def test_total_loss_commits_nothing(self):
        world = run_world(drop_prob=1.0, requests_per_client=5, until=30.0)
        assert all(world.committed_count(i) == 0 for i in range(4))


class TestFaults:
    def test_crash_at_stops_participation(self):
        world = run_world(faults={2: (CRASH_AT, 0.0)},
                          requests_per_client=10)
        assert world.nodes[2].crashed
        assert world.committed_count(2) == 0
        for i in (0, 1, 3):
            assert world.total_requests_committed(i) == 10

    def test_leader_crash_triggers_view_change(self):
        world = run_world(seed=7, num_clients=2, faults={0: (CRASH_AT, 0.25)},
                          requests_per_client=50, view_change_timeout=0.5)
        assert world.max_view() == 1
        for i in (1, 2, 3):
            assert world.total_requests_committed(i) == 100
        world.check_agreement()

    def test_mute_follower_harmless(self):
        world = run_world(faults={3: (MUTE,)}, requests_per_client=10)
        for i in (0, 1, 2):
            assert world.total_requests_committed(i) == 10
        world.check_agreement()

    def test_equivocating_leader_never_splits_commits(self):
        world = run_world(seed=3, faults={0: (EQUIVOCATE,)},
                          requests_per_client=10, view_change_timeout=0.5,
                          client_timeout=2.0, until=120.0)
        world.check_agreement()
        world.check_total_order()

    def test_two_crashes_at_f_two(self):
        world = run_world(n=7, f=2, seed=7,
                          faults={0: (CRASH_AT, 0.25), 1: (CRASH_AT, 0.25)},
                          requests_per_client=10, view_change_timeout=0.5)
        assert world.max_view() <= 2
        for i in range(2, 7):
            assert world.total_requests_committed(i) == 10
        world.check_agreement()


class TestPartitions:
    def test_minority_partition_heals(self):
        world = run_world(partitions=((0.0, 2.0, frozenset({3})),),
                          requests_per_client=10, until=60.0)
        world.check_agreement()
        world.check_total_order()
        assert world.total_requests_committed(0) == 10


class TestSafetyValve:
    def test_non_quiescent_run_raises(self):
        with pytest.raises(NonQuiescent):
            run_world(max_events=50, requests_per_client=100)


class TestAuthenticatedPath:
    def test_forged_inter_node_traffic_rejected(self):
        # With auth on, a frame whose tag fails verification is counted
        # as rejected and never reaches the replica core.
        world = World(SimConfig(requests_per_client=2, drop_prob=0.0))
        from pbftkit import wire
        from pbftkit.wire import MessageKind, WireEnvelope
        env = WireEnvelope(MessageKind.PREPARE, 0, 1, 2, b"\x00" * 32,
                           auths=((1, b"\x00" * 32),))
        world._push(0.001, ("deliver", 2, 1, wire.encode(env)))
        world.run()
        assert world.nodes[1].replica.counters["rejected"] >= 1
        world.check_agreement()
        assert world.total_requests_committed(0) == 2
