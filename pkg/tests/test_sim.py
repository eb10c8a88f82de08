"""Scale-out simulator tests: classification, scheduling, oracle agreement."""

import random
from collections import defaultdict

import pytest

from walletemu.errors import EmptyTrace
from walletemu.sim import (
    BootDist,
    BootType,
    Node,
    SimConfig,
    VariantProfile,
    default_profiles,
    oracle_simulate,
    simulate,
)
from walletemu.sim.engine import advance, classify_boot, make_run, nearest_rank
from walletemu.traceio import TraceEvent


def ev(i, app, fn, arrival, duration):
    return TraceEvent(i, app, fn, float(arrival), float(duration))


def wallet_profile(cold=1000.0, lukewarm=10.0, warm=0.0):
    return VariantProfile("Wallet", BootDist(cold), BootDist(warm),
                          BootDist(lukewarm), 60 * 1024)


def cvm_profile(cold=2000.0, warm=0.0, cap=None):
    return VariantProfile("CVM", BootDist(cold), BootDist(warm),
                          per_function_memory=1,
                          per_node_instance_cap=cap)


def random_trace(rng, n, apps=4, fns=10, span=3000, max_dur=400):
    trace = [ev(i, rng.randrange(apps), rng.randrange(fns),
                rng.randint(0, span), rng.randint(1, max_dur))
             for i in range(n)]
    trace.sort(key=lambda e: (e.arrival_ms, e.invocation_id))
    return trace


class TestClassifyBoot:
    def test_cached_function_is_warm(self):
        node = Node(0, 4, 8)
        node.cache[(1, 5)] = True
        assert classify_boot(node, ev(0, 1, 5, 0, 10),
                             wallet_profile()) is BootType.WARM

    def test_sibling_app_is_lukewarm_for_wallet(self):
        node = Node(0, 4, 8)
        node.cache[(1, 6)] = True
        assert classify_boot(node, ev(0, 1, 5, 0, 10),
                             wallet_profile()) is BootType.LUKEWARM

    def test_sibling_app_is_cold_without_lukewarm_tier(self):
        node = Node(0, 4, 8)
        node.cache[(1, 6)] = True
        assert classify_boot(node, ev(0, 1, 5, 0, 10),
                             cvm_profile()) is BootType.COLD


class TestProfiles:
    def test_lukewarm_tier_is_wallet_only(self):
        with pytest.raises(ValueError):
            VariantProfile("CVM", BootDist(1.0), BootDist(0.0), BootDist(1.0))
        with pytest.raises(ValueError):
            VariantProfile("Wallet", BootDist(1.0), BootDist(0.0))

    def test_default_cvm_cap_is_509(self):
        assert default_profiles()["CVM"].per_node_instance_cap == 509

    def test_point_mass_sampling_consumes_no_rng(self):
        rng = random.Random(1)
        state = rng.getstate()
        assert BootDist(42.0).sample(rng) == 42.0
        assert rng.getstate() == state

    def test_jitter_preserves_mean_roughly(self):
        rng = random.Random(2)
        dist = BootDist(100.0, sigma=0.5)
        mean = sum(dist.sample(rng) for _ in range(4000)) / 4000
        assert mean == pytest.approx(100.0, rel=0.1)


class TestScheduling:
    def test_cached_node_preferred_over_empty(self):
        trace = [ev(0, 1, 1, 0, 10), ev(1, 1, 1, 100, 10)]
        config = SimConfig(nodes=2, slots=1, cache_size=4,
                           profiles={"CVM": cvm_profile(cold=5.0)}, seed=0)
        stats = simulate(trace, config)["CVM"]
        assert stats.outcomes[0].node_id == stats.outcomes[1].node_id
        assert stats.outcomes[1].boot_type is BootType.WARM

    def test_all_nodes_busy_queues_fifo(self):
        trace = [ev(0, 0, 0, 0, 100), ev(1, 0, 1, 0, 100),
                 ev(2, 0, 2, 5, 50)]
        config = SimConfig(nodes=2, slots=1, cache_size=4,
                           profiles={"CVM": cvm_profile(cold=0.0)}, seed=0)
        stats = simulate(trace, config)["CVM"]
        third = stats.outcomes[2]
        assert third.delay_ms == 95.0  # waits until t=100 for a slot
        assert third.start_ms == 100.0

    def test_instance_cap_makes_node_ineligible(self):
        # One node, cap 2: with two resident instances the arrival must
        # queue even though slots are free.
        trace = [ev(0, 0, 0, 0, 50), ev(1, 0, 1, 0, 50), ev(2, 0, 2, 10, 50)]
        config = SimConfig(nodes=1, slots=8, cache_size=8,
                           profiles={"CVM": cvm_profile(cold=0.0, cap=2)},
                           seed=0)
        stats = simulate(trace, config)["CVM"]
        outcomes = {o.invocation_id: o for o in stats.outcomes}
        assert outcomes[0].delay_ms == 0.0
        # Second arrival already exceeds the cap (1 busy + 1 cached).
        assert outcomes[1].delay_ms > 0.0
        assert outcomes[2].delay_ms > 0.0

    def test_node_at_509_residents_is_ineligible_despite_free_slots(self):
        node = Node(0, slots=1024, cache_size=1024)
        node.busy = 500
        for i in range(9):
            node.cache[(0, i)] = True
        assert node.resident_instances() == 509
        assert node.busy < node.slots           # slots are free
        assert not node.eligible(509)           # the key cap binds anyway
        assert node.memory_resident(336 * 1048576) == 509 * 336 * 1048576

    def test_lukewarm_tier_prefers_same_app_node(self):
        # Second arrival lands after the first completed (cold 1000 + 10).
        trace = [ev(0, 7, 1, 0, 10), ev(1, 7, 2, 2000, 10)]
        config = SimConfig(nodes=3, slots=1, cache_size=4,
                           profiles={"Wallet": wallet_profile()}, seed=0)
        stats = simulate(trace, config)["Wallet"]
        assert stats.outcomes[1].node_id == stats.outcomes[0].node_id
        assert stats.outcomes[1].boot_type is BootType.LUKEWARM


class TestAdvance:
    def test_equal_time_completions_by_invocation_id(self):
        trace = [ev(1, 0, 1, 0, 100), ev(0, 0, 0, 0, 100)]
        config = SimConfig(nodes=2, slots=1, cache_size=2,
                           profiles={"CVM": cvm_profile(cold=0.0)}, seed=0)
        run = make_run(trace, config.profiles["CVM"], config)
        while advance(run):
            pass
        finishes = sorted((o.finish_ms, o.invocation_id)
                          for o in run.outcomes)
        assert [f[1] for f in finishes] == [0, 1]

    def test_arrival_during_full_occupancy_only_queues(self):
        trace = [ev(0, 0, 0, 0, 100), ev(1, 0, 1, 10, 100)]
        config = SimConfig(nodes=1, slots=1, cache_size=2,
                           profiles={"CVM": cvm_profile(cold=0.0)}, seed=0)
        run = make_run(trace, config.profiles["CVM"], config)
        advance(run)  # arrival 0 dispatches
        advance(run)  # arrival 1 queues
        assert len(run.queue) == 1
        assert len(run.outcomes) == 1

    def test_final_event_records_makespan(self):
        trace = [ev(0, 0, 0, 0, 100)]
        config = SimConfig(nodes=1, slots=1, cache_size=2,
                           profiles={"CVM": cvm_profile(cold=25.0)}, seed=0)
        stats = simulate(trace, config)["CVM"]
        assert stats.makespan_ms == 125.0


class TestSimulate:
    def test_empty_trace_rejected(self):
        with pytest.raises(EmptyTrace):
            simulate([], SimConfig())

    def test_degenerate_configs_rejected(self):
        from walletemu.errors import InvariantError
        trace = [ev(0, 0, 0, 0, 10)]
        with pytest.raises(InvariantError):
            simulate(trace, SimConfig(nodes=0))
        with pytest.raises(InvariantError):
            simulate(trace, SimConfig(slots=0))

    def test_single_invocation_delay_is_one_cold_boot(self):
        trace = [ev(0, 0, 0, 0, 10)]
        config = SimConfig(nodes=4, slots=4, cache_size=4,
                           profiles={"CVM": cvm_profile(cold=777.0)}, seed=0)
        stats = simulate(trace, config)["CVM"]
        assert stats.outcomes[0].delay_ms == 777.0
        assert stats.boot_counts()["cold"] == 1

    def test_back_to_back_closed_form(self):
        # nodes=1, slots=1: the second arrival waits for the first's
        # remaining service of (boot + duration - gap).
        boot, dur, gap = 40.0, 100.0, 30.0
        trace = [ev(0, 0, 0, 0, dur), ev(1, 0, 0, gap, dur)]
        config = SimConfig(nodes=1, slots=1, cache_size=4,
                           profiles={"CVM": cvm_profile(cold=boot, warm=0.0)},
                           seed=0)
        stats = simulate(trace, config)["CVM"]
        second = stats.outcomes[1]
        assert second.delay_ms == (boot + dur - gap) + 0.0  # wait + warm boot
        assert second.boot_type is BootType.WARM

    def test_determinism(self):
        rng = random.Random(5)
        trace = random_trace(rng, 150)
        config = SimConfig(nodes=4, slots=2, cache_size=4, seed=9)
        a = {k: v.outcomes for k, v in simulate(trace, config).items()}
        b = {k: v.outcomes for k, v in simulate(trace, config).items()}
        assert a == b

    def test_conservation_every_invocation_once(self):
        rng = random.Random(6)
        trace = random_trace(rng, 200)
        stats = simulate(trace, SimConfig(nodes=3, slots=2, cache_size=3,
                                          seed=1))["Wallet"]
        assert sorted(o.invocation_id for o in stats.outcomes) == \
            sorted(e.invocation_id for e in trace)

    def test_capacity_never_exceeded(self):
        rng = random.Random(7)
        trace = random_trace(rng, 300, span=1500)
        config = SimConfig(nodes=3, slots=2, cache_size=3, seed=1,
                           record_occupancy=True)
        for stats in simulate(trace, config).values():
            occupancy = defaultdict(int)
            # At equal times the engine frees slots before re-filling them.
            for _t, node_id, delta in sorted(stats.occupancy_log,
                                             key=lambda x: (x[0], x[2])):
                occupancy[node_id] += delta
                assert 0 <= occupancy[node_id] <= config.slots

    def test_warm_rate_ordering_wallet_vs_cvm(self):
        rng = random.Random(8)
        profiles = {
            "Wallet": wallet_profile(cold=2380.0, lukewarm=10.3, warm=0.5),
            "CVM": cvm_profile(cold=8300.0, warm=10.0),
        }
        for trial in range(5):
            trace = random_trace(rng, 250, apps=3, fns=12, span=20000)
            results = simulate(trace, SimConfig(
                nodes=4, slots=4, cache_size=4, profiles=profiles, seed=0))
            assert results["Wallet"].boot_counts()["cold"] <= \
                results["CVM"].boot_counts()["cold"]

    def test_monotone_dominance_under_smaller_boots(self):
        rng = random.Random(9)
        for trial in range(5):
            trace = random_trace(rng, 200, apps=4, fns=10, span=8000)
            slow = {"Wallet": wallet_profile(cold=3000.0, lukewarm=40.0,
                                             warm=8.0)}
            fast = {"Wallet": slow["Wallet"].scaled(0.5)}
            base = simulate(trace, SimConfig(nodes=3, slots=2, cache_size=4,
                                             profiles=slow, seed=0))["Wallet"]
            better = simulate(trace, SimConfig(nodes=3, slots=2, cache_size=4,
                                               profiles=fast, seed=0))["Wallet"]
            for a, b in zip(base.outcomes, better.outcomes):
                assert b.delay_ms <= a.delay_ms + 1e-9

    def test_slowdown_is_one_for_instant_warm_start(self):
        trace = [ev(0, 0, 0, 0, 50), ev(1, 0, 0, 200, 50)]
        config = SimConfig(nodes=1, slots=1, cache_size=2,
                           profiles={"CVM": cvm_profile(cold=0.0, warm=0.0)},
                           seed=0)
        stats = simulate(trace, config)["CVM"]
        assert stats.outcomes[1].slowdown == 1.0


class TestNearestRank:
    def test_examples(self):
        values = [1.0, 2.0, 3.0, 4.0]
        assert nearest_rank(values, 0.50) == 2.0   # ceil(0.5*4) = 2nd
        assert nearest_rank(values, 0.99) == 4.0
        assert nearest_rank(values, 0.01) == 1.0
        assert nearest_rank([], 0.5) == 0.0


class TestOracle:
    def test_agreement_on_random_traces(self):
        rng = random.Random(10)
        for trial in range(10):
            trace = random_trace(rng, rng.randint(1, 120), apps=3, fns=8,
                                 span=2500, max_dur=300)
            profiles = {
                "Wallet": wallet_profile(cold=float(rng.randint(10, 800)),
                                         lukewarm=float(rng.randint(1, 30)),
                                         warm=float(rng.randint(0, 5))),
                "CVM": cvm_profile(cold=float(rng.randint(10, 1500)),
                                   warm=float(rng.randint(0, 10)),
                                   cap=rng.choice([None, 5])),
            }
            config = SimConfig(nodes=rng.randint(1, 4),
                               slots=rng.randint(1, 3),
                               cache_size=rng.randint(1, 4),
                               profiles=profiles, seed=0)
            engine = simulate(trace, config)
            oracle = oracle_simulate(trace, config)
            for name in profiles:
                for a, b in zip(engine[name].outcomes, oracle[name].outcomes):
                    assert a.invocation_id == b.invocation_id
                    assert abs(a.delay_ms - b.delay_ms) <= 1.0
                    assert a.boot_type == b.boot_type

    def test_unqueued_trace_delays_equal_boot_samples(self):
        trace = [ev(i, 0, i, i * 1000, 10) for i in range(5)]
        config = SimConfig(nodes=8, slots=4, cache_size=8,
                           profiles={"CVM": cvm_profile(cold=33.0)}, seed=0)
        oracle = oracle_simulate(trace, config)["CVM"]
        assert all(o.delay_ms == 33.0 for o in oracle.outcomes)

    def test_oracle_rejects_oversized_traces(self):
        trace = [ev(i, 0, 0, i, 1) for i in range(1001)]
        with pytest.raises(ValueError):
            oracle_simulate(trace, SimConfig())
