import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedmob.errors import AggregationError, FedmobError, IncompatibleWeightsError, RoundError
from fedmob.federation import (AugmentationConfig, DermsServer, EvAgent, FederationConfig,
                               community_accuracy, direct_sharers, distribute, fed_avg,
                               form_peer_groups, init_state, make_round_plan, peer_share,
                               run_plain_fl_round, run_round)
from fedmob.mobility import (NON_TRANSITORY, TRANSITORY, ChargeEvent, CityConfig, MobilityClass,
                             generate_fleet)
from fedmob.seqmodel import (EncoderNet, ModelConfig, OptimizerConfig, TokenizerConfig,
                             WeightBundle, build_samples, predict)
from oracles import brute_mean

LAYOUT = [("a", (3,)), ("b", (2, 2))]


def bundle(values, layout=LAYOUT):
    return WeightBundle.zeros(layout).with_values(np.asarray(values, dtype=np.float64))


def random_bundles(n, seed=0, layout=LAYOUT):
    rng = np.random.default_rng(seed)
    size = WeightBundle.zeros(layout).n_params
    return [bundle(rng.normal(size=size), layout) for _ in range(n)]


def vec(*xs):
    return bundle(np.array(xs, dtype=float), [("w", (len(xs),))])


PLAIN = AugmentationConfig(alpha=1.0, normalize=True)


# -- fed_avg ---------------------------------------------------------------------

def test_fed_avg_two_point_mean():
    assert fed_avg([vec(0, 0), vec(2, 4)]).values.tolist() == [1.0, 2.0]


def test_fed_avg_identical_bundles_is_exact():
    w = random_bundles(1, seed=4)[0]
    assert fed_avg([w.copy() for _ in range(5)]).identical(w)


def test_fed_avg_matches_brute_force_mean():
    bundles = random_bundles(7, seed=11)
    got = fed_avg(bundles).values
    want = brute_mean([b.values.tolist() for b in bundles])
    assert np.max(np.abs(got - want)) < 1e-12


def test_fed_avg_sample_weighting():
    bundles = random_bundles(3, seed=2)
    counts = [1, 5, 2]
    got = fed_avg(bundles, "by_sample_count", counts).values
    want = brute_mean([b.values.tolist() for b in bundles], counts)
    assert np.max(np.abs(got - want)) < 1e-12


def test_fed_avg_errors():
    with pytest.raises(AggregationError):
        fed_avg([])
    with pytest.raises(IncompatibleWeightsError):
        fed_avg([vec(1, 2), vec(1, 2, 3)])
    with pytest.raises(AggregationError):
        fed_avg([vec(1), vec(2)], "by_sample_count")


@given(st.floats(-8, 8, allow_nan=False).filter(lambda c: abs(c) > 1e-3),
       st.integers(2, 6), st.integers(0, 10_000))
def test_fed_avg_scaling_covariance(c, n, seed):
    bundles = random_bundles(n, seed)
    scaled = [b.with_values(c * b.values) for b in bundles]
    np.testing.assert_allclose(fed_avg(scaled).values, c * fed_avg(bundles).values,
                               rtol=1e-12, atol=1e-12)


# -- peer_share ------------------------------------------------------------------

def test_peer_share_alpha_zero_returns_own():
    own, *peers = random_bundles(3, seed=1)
    out = peer_share(own, peers, AugmentationConfig(alpha=0.0))
    assert out.identical(own)


def test_peer_share_unnormalised_sum():
    out = peer_share(vec(1, 1), [vec(3, 3)], AugmentationConfig(alpha=1.0, normalize=False))
    assert out.values.tolist() == [4.0, 4.0]


def test_peer_share_normalised_divisor():
    out = peer_share(vec(1, 1), [vec(3, 3), vec(5, 5)],
                     AugmentationConfig(alpha=0.5, normalize=True))
    np.testing.assert_allclose(out.values, [(1 + 0.5 * 8) / 2.0] * 2)


def test_group_of_four_emits_identical_group_mean():
    group = random_bundles(4, seed=21)
    outs = [peer_share(w, [p for j, p in enumerate(group) if j != i], PLAIN)
            for i, w in enumerate(group)]
    for o in outs[1:]:
        assert o.identical(outs[0])
    want = brute_mean([b.values.tolist() for b in group])
    assert np.max(np.abs(outs[0].values - want)) < 1e-12
    got_mean = np.mean([o.values for o in outs], axis=0)
    assert np.max(np.abs(got_mean - np.mean([b.values for b in group], axis=0))) < 1e-12


@given(st.integers(1, 6), st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_peer_share_permutation_invariant(n_peers, seed, rnd):
    own, *peers = random_bundles(n_peers + 1, seed)
    cfg = AugmentationConfig(alpha=0.7, normalize=True)
    shuffled = list(peers)
    rnd.shuffle(shuffled)
    assert peer_share(own, peers, cfg).identical(peer_share(own, shuffled, cfg))


def test_peer_share_noise_is_seeded_and_zero_mean():
    own, peer = random_bundles(2, seed=5, layout=[("w", (20_000,))])
    cfg = AugmentationConfig(alpha=1.0, normalize=True, noise_sigma=1e-3)
    a = peer_share(own, [peer], cfg, seed=9)
    b = peer_share(own, [peer], cfg, seed=9)
    assert a.identical(b)
    clean = peer_share(own, [peer], PLAIN)
    noise = a.values - clean.values
    assert abs(noise.mean()) < 5e-5
    assert abs(noise.std() - 1e-3) < 5e-5
    assert a.fingerprint == own.fingerprint


def test_peer_share_errors():
    with pytest.raises(AggregationError):
        peer_share(vec(1, 2), [], PLAIN)
    with pytest.raises(IncompatibleWeightsError):
        peer_share(vec(1, 2), [vec(1, 2, 3)], PLAIN)


# -- groups, DERMS, distribution -----------------------------------------------------

def cls(ev, kind, comm=None):
    return MobilityClass(ev, (0, 1), kind, 1.0 if kind == NON_TRANSITORY else 0.0, comm)


def test_five_non_transitory_form_one_group():
    groups = form_peer_groups([cls(f"e{i}", NON_TRANSITORY, 3) for i in range(5)])
    assert len(groups) == 1 and groups[0].community == 3 and len(groups[0].members) == 5


def test_singleton_group_falls_back_to_direct_sharing():
    classes = [cls("solo", NON_TRANSITORY, 9)]
    groups = form_peer_groups(classes, min_group_size=2)
    assert groups == []
    assert direct_sharers(classes, groups) == ["solo"]


def test_groups_and_direct_sharers_partition_population():
    rng = np.random.default_rng(8)
    classes = []
    for i in range(100):
        if rng.random() < 0.6:
            classes.append(cls(f"e{i:03d}", NON_TRANSITORY, int(rng.integers(1, 15))))
        else:
            classes.append(cls(f"e{i:03d}", TRANSITORY))
    groups = form_peer_groups(classes, min_group_size=3)
    direct = direct_sharers(classes, groups)
    grouped = [e for g in groups for e in g.members]
    assert len(grouped) == len(set(grouped))
    assert set(grouped).isdisjoint(direct)
    assert set(grouped) | set(direct) == {c.ev_id for c in classes}
    assert all(len(g.members) >= 3 for g in groups)


def test_derms_empty_inbox_keeps_model():
    w = random_bundles(1)[0]
    server = DermsServer(1, w.copy())
    assert server.aggregate().identical(w)
    assert server.round == 1


def test_derms_rejects_mismatched_bundle():
    server = DermsServer(1, vec(0, 0))
    with pytest.raises(IncompatibleWeightsError):
        server.submit(vec(1, 2, 3), 1, "tok")


def test_distribute_assigns_theta_bit_for_bit():
    theta, old = random_bundles(2, seed=3)
    ev = EvAgent("ev1", old, [], [])
    distribute(theta, ev, ChargeEvent("ev1", 2, 100, 0.19))
    assert ev.weights.identical(theta)
    assert ev.weights is not theta
    with pytest.raises(FedmobError):
        distribute(theta, ev, ChargeEvent("other", 2, 100, 0.19))
    with pytest.raises(IncompatibleWeightsError):
        distribute(vec(1.0), ev, ChargeEvent("ev1", 2, 100, 0.19))


# -- full rounds ---------------------------------------------------------------------

C = 4
TOK = TokenizerConfig(8, C)
NET = EncoderNet(ModelConfig(C, d_model=8, n_layers=1, n_heads=1, d_ff=8, max_len=8))
OPT = OptimizerConfig(lr=1e-2, batch_floor=8)
FED = FederationConfig(rounds=3, local_epochs=2)


def fleet(seed=3, transitory_only=False, **city):
    base = dict(communities=C, hotspots=1, ev_count=12, horizon_days=4, local_fraction=0.5)
    base.update(city)
    f = generate_fleet(CityConfig(**base), seed)
    trips = [t for t in f.trips if t.pickup != t.dropoff] if transitory_only else f.trips
    return trips, f.charges, build_samples(trips, f.charges, TOK)


def run(trips, charges, samples, rounds=3, augment=True, fed=FED, seed=5, keep=None):
    state = init_state(NET, trips, charges, samples, C, seed)
    reports = []
    for t in range(1, rounds + 1):
        plan = make_round_plan(state, t, fed)
        if keep is not None:
            keep(state, plan)
        step = run_round if augment else run_plain_fl_round
        state, rep = step(state, plan, fed, OPT)
        reports.append(rep)
    return state, reports


def test_round_plan_assigns_each_participant_once():
    trips, charges, samples = fleet()
    state = init_state(NET, trips, charges, samples, C, 1)
    plan = make_round_plan(state, 2, FED)
    assert plan.participants
    assert set(plan.participants) == set(plan.classes)
    grouped = [e for g in plan.groups for e in g.members]
    assert sorted(grouped + plan.direct) == plan.participants
    end = plan.window[1]
    for ev_id, mask in plan.train_masks.items():
        assert np.all(state.agents[ev_id].train.label_times[mask] < end)


def test_rounds_are_deterministic():
    data = fleet()
    a, _ = run(*data)
    b, _ = run(*data)
    for c in range(1, C + 1):
        assert a.derms[c].model.identical(b.derms[c].model)


def test_threaded_training_matches_serial():
    data = fleet()
    serial, _ = run(*data, rounds=2)
    state = init_state(NET, *data, C, 5)
    for t in (1, 2):
        state, _ = run_round(state, make_round_plan(state, t, FED), FED, OPT, threads=3)
    for c in range(1, C + 1):
        assert serial.derms[c].model.identical(state.derms[c].model)


def test_all_transitory_fleet_makes_fltn_equal_plain_fl():
    data = fleet(transitory_only=True)
    fl, reports = run(*data, augment=True)
    pl, _ = run(*data, augment=False)
    assert all(r.non_transitory == 0 for r in reports)
    assert sum(r.participants for r in reports) > 0
    for c in range(1, C + 1):
        assert fl.derms[c].model.identical(pl.derms[c].model)


@pytest.fixture
def trained_bundles(monkeypatch):
    """Records every locally trained bundle of a round, keyed by EV id."""
    from fedmob import federation
    captured = {}
    original = federation._train_one

    def spy(*args):
        out = original(*args)
        captured[out[0]] = out[1]
        return out

    monkeypatch.setattr(federation, "_train_one", spy)
    return captured


def test_single_transitory_ev_sets_theta_to_its_weights(trained_bundles):
    trips, charges, samples = fleet(transitory_only=True, ev_count=1, horizon_days=12)
    state = init_state(NET, trips, charges, samples, C, 2)
    for t in range(1, 13):
        plan = make_round_plan(state, t, FED)
        if plan.participants:
            break
    (ev_id,) = plan.participants
    state, _ = run_plain_fl_round(state, plan, FED, OPT)
    assert state.derms[plan.assignments[ev_id]].model.values.tobytes() == \
        trained_bundles[ev_id].values.tobytes()


def test_plain_fl_theta_is_mean_of_trained_bundles(trained_bundles):
    trips, charges, samples = fleet()
    state = init_state(NET, trips, charges, samples, C, 4)
    plan = make_round_plan(state, 1, FED)
    captured = trained_bundles
    state, _ = run_plain_fl_round(state, plan, FED, OPT)
    for comm in set(plan.assignments.values()):
        members = [e for e in plan.participants if plan.assignments[e] == comm]
        want = brute_mean([captured[e].values.tolist() for e in members])
        assert np.max(np.abs(state.derms[comm].model.values - want)) < 1e-12


def test_charge_time_redistribution_contract():
    trips, charges, samples = fleet(seed=6, ev_count=16, horizon_days=6)
    state = init_state(NET, trips, charges, samples, C, 7)
    unchanged = 0
    for t in (1, 2, 3):
        plan = make_round_plan(state, t, FED)
        before = {e: a.weights.copy() for e, a in state.agents.items()}
        state, rep = run_round(state, plan, FED, OPT)
        assert rep.distributions == sum(len(v) for v in plan.charges.values())
        for ev_id, events in plan.charges.items():
            theta = state.derms[events[-1].community].model
            assert state.agents[ev_id].weights.identical(theta)
        for ev_id, agent in state.agents.items():
            if ev_id not in plan.charges and ev_id not in plan.assignments:
                assert agent.weights.identical(before[ev_id])
                unchanged += 1
    assert state.distribution_log
    assert unchanged > 0


def test_distributed_model_predicts_like_theta():
    trips, charges, samples = fleet(seed=6, ev_count=16, horizon_days=6)
    state, _ = run(trips, charges, samples, rounds=2)
    entry = state.distribution_log[-1]
    ev = state.agents[entry["ev_id"]]
    X = samples.X[:20]
    theta = state.derms[entry["community"]].model
    assert ev.weights.identical(theta)
    assert np.array_equal(predict(NET, ev.weights, X), predict(NET, theta, X))


def test_full_group_mean_preservation_in_round():
    """With alpha 1 and normalisation, augmentation replaces each group
    member's bundle by the group mean, so every community average is the
    same as without augmentation."""
    trips, charges, samples = fleet(ev_count=30, local_fraction=1.0, local_stay=1.0)
    fed = dataclasses.replace(FED, tau=0.0, min_group_size=2)
    fl, reports = run(trips, charges, samples, rounds=3, fed=fed)
    pl, _ = run(trips, charges, samples, rounds=3, fed=fed, augment=False)
    assert sum(r.peer_groups for r in reports) >= 2
    for c in range(1, C + 1):
        np.testing.assert_allclose(fl.derms[c].model.values, pl.derms[c].model.values,
                                   rtol=0, atol=1e-12)


def test_inbox_tokens_are_opaque():
    trips, charges, samples = fleet()
    state = init_state(NET, trips, charges, samples, C, 1)
    plan = make_round_plan(state, 2, FED)
    seen = []
    originals = {c: s.submit for c, s in state.derms.items()}
    for c, server in state.derms.items():
        def record(bundle, count, token, _orig=originals[c]):
            seen.append(token)
            return _orig(bundle, count, token)
        server.submit = record
    run_round(state, plan, FED, OPT)
    assert seen and len(set(seen)) == len(seen)
    assert not any(ev in tok for tok in seen for ev in state.agents)


def test_round_errors_carry_the_round_index():
    trips, charges, samples = fleet()
    state = init_state(NET, trips, charges, samples, C, 1)
    plan = make_round_plan(state, 2, FED)
    comm = next(iter(plan.assignments.values()))
    state.derms[comm].model = vec(0.0)
    with pytest.raises(RoundError) as info:
        run_round(state, plan, FED, OPT)
    assert info.value.round_index == 2


def test_community_accuracy_reports_per_home():
    trips, charges, samples = fleet()
    state, _ = run(trips, charges, samples, rounds=1)
    overall, per = community_accuracy(state)
    assert 0.0 <= overall <= 1.0
    assert set(per) <= set(range(1, C + 1))
