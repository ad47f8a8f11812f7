import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from factorized_fl.data import split_iid, synthetic_blobs, train_val_test_split
from factorized_fl.engine import (
    CostLedger,
    Federation,
    StrategyConfig,
    TrainConfig,
    comm_cost,
    formula_cost,
    matching_scores,
    select_participants,
    similarity_match,
    softmax_weights,
    transmitted_params,
    weighted_average_u,
)
from factorized_fl.errors import ConfigError, NumericError
from factorized_fl.factorized import FactorizedParam, build_net, factor_shape, resnet9

from oracles import softmax_list

SQRT_HALF = 1 / math.sqrt(2)


def federation(strategy, K=4, factorized=None, seed=0, threads=1, same_data=False, x_nan=False, **kw):
    d = synthetic_blobs(num_classes=4, num_examples=320, noise=1.0, seed=seed)
    if x_nan:
        d.x[:] = np.nan
    train, val, test = train_val_test_split(len(d), seed=[seed, 2])
    parts = [p.with_splits(val, test) for p in split_iid(d, K, seed=[seed, 3], indices=train)]
    if same_data:
        parts = [parts[0].__class__(**{**parts[0].__dict__, "client_id": k}) for k in range(K)]
    net = build_net("desk_shallow", num_classes=4)
    cfg = StrategyConfig(strategy=strategy, **kw)
    train_cfg = TrainConfig(lr=0.05, momentum=0.9, weight_decay=1e-6, batch_size=16, local_epochs=1)
    return Federation(net, d, parts, cfg, train_cfg, seed, factorized=factorized, threads=threads)


def leaves_of(fed):
    return [[leaf.copy() for leaf in c.model.leaves()] for c in fed.clients]


def same_leaves(a, b):
    return all(x.tobytes() == y.tobytes() for ca, cb in zip(a, b) for x, y in zip(ca, cb))


# ---------------------------------------------------------------- matching

def test_similarity_hand_cosines():
    vs = [np.array([1.0, 0.0]), np.array([SQRT_HALF, SQRT_HALF]), np.array([0.0, 1.0])]
    assert similarity_match(vs, 0, 0.6) == pytest.approx([1.0, 0.70710678, 0.0], abs=1e-8)


def test_similarity_identical_and_orthogonal():
    v = np.array([0.3, -1.2, 2.0])
    assert similarity_match([v, v.copy(), v.copy()], 1, 0.9).tolist() == [1.0, 1.0, 1.0]
    assert similarity_match([np.array([1.0, 0]), np.array([0, 1.0])], 0, 0.5).tolist() == [1.0, 0.0]


def test_zero_norm_names_the_client():
    with pytest.raises(NumericError, match="client index 2"):
        similarity_match([np.ones(2), np.ones(2), np.zeros(2)], 0, 0.5)


def test_softmax_hand_weights_and_direct_sum():
    sig = np.array([1.0, 0.5, 0.0])
    w = softmax_weights(sig, 2.0)
    assert w == pytest.approx([0.66524, 0.24473, 0.09003], abs=1e-5)
    assert w == pytest.approx(softmax_list([2.0, 1.0, 0.0]), abs=1e-15)
    rng = np.random.default_rng(0)
    us = [[rng.standard_normal(4), rng.standard_normal(3)] for _ in range(3)]
    out = weighted_average_u(us, sig, 2.0)
    ref = softmax_list([2.0, 1.0, 0.0])
    for layer in range(2):
        direct = sum(ref[i] * us[i][layer] for i in range(3))
        assert np.max(np.abs(out[layer] - direct)) < 1e-15


def test_equal_scores_give_plain_mean():
    rng = np.random.default_rng(1)
    us = [[rng.standard_normal(5)] for _ in range(4)]
    out = weighted_average_u(us, np.full(4, 0.3), 7.0)
    assert np.allclose(out[0], np.mean([u[0] for u in us], axis=0), atol=1e-15)


def test_large_epsilon_saturates_on_the_best_score():
    w = softmax_weights(np.array([0.2, 0.9, 0.5]), 1e3)
    assert w.max() == w[1] and w[1] > 1 - 1e-6


def test_thresholded_self_dominates_with_large_epsilon():
    rng = np.random.default_rng(2)
    vs = [rng.standard_normal(6) for _ in range(3)]
    us = [[rng.standard_normal(4)] for _ in range(3)]
    sig = similarity_match(vs, 1, 1 + 1e-9)
    assert sig.tolist() == [0.0, 1.0, 0.0]
    out = weighted_average_u(us, sig, 1e3)
    assert np.allclose(out[0], us[1][0], atol=1e-12)


@given(sig=st.lists(st.floats(-1, 1), min_size=1, max_size=12), eps=st.floats(0.01, 20),
       c=st.floats(0.1, 10))
def test_softmax_weights_positive_normalized_and_scale_invariant(sig, eps, c):
    sig = np.array(sig)
    w = softmax_weights(sig, eps)
    assert abs(w.sum() - 1) < 1e-12 and np.all(w > 0)
    assert np.max(np.abs(softmax_weights(sig * c, eps / c) - w)) < 1e-12


@given(seed=st.integers(0, 2**31), K=st.integers(2, 6), tau=st.floats(0, 1))
def test_aggregation_is_permutation_equivariant(seed, K, tau):
    rng = np.random.default_rng(seed)
    vs = [rng.standard_normal(5) for _ in range(K)]
    us = [[rng.standard_normal(3), rng.standard_normal(2)] for _ in range(K)]
    perm = rng.permutation(K)

    def aggregate(vs, us):
        return [weighted_average_u(us, similarity_match(vs, k, tau), 5.0) for k in range(K)]

    base = aggregate(vs, us)
    moved = aggregate([vs[i] for i in perm], [us[i] for i in perm])
    for pos, i in enumerate(perm):
        for a, b in zip(moved[pos], base[i]):
            assert np.max(np.abs(a - b)) < 1e-12


def test_random_and_worst_matchers_pick_match_count_partners():
    rng = np.random.default_rng(3)
    vs = [rng.standard_normal(4) for _ in range(6)]
    worst = StrategyConfig("factorized_fl", matching="worst", match_count=2)
    sig, mask = matching_scores(vs, 0, worst)
    assert mask.sum() == 3 and mask[0]
    raw = similarity_match(vs, 0, -1.0)
    assert sorted(np.flatnonzero(mask[1:]) + 1) == sorted(sorted(range(1, 6), key=lambda i: raw[i])[:2])
    rand = StrategyConfig("factorized_fl", matching="random", match_count=3)
    _, mask = matching_scores(vs, 2, rand, np.random.default_rng(0))
    assert mask.sum() == 4 and mask[2]


def test_exclude_zero_sigma_masks_thresholded_clients():
    vs = [np.array([1.0, 0.0]), np.array([1.0, 0.1]), np.array([0.0, 1.0])]
    cfg = StrategyConfig("factorized_fl", tau=0.5, exclude_zero_sigma=True)
    sig, mask = matching_scores(vs, 0, cfg)
    assert mask.tolist() == [True, True, False]
    assert softmax_weights(sig, 10.0, mask)[2] == 0.0


# ---------------------------------------------------------------- accounting

def test_full_scale_formula_cost():
    net = resnet9(10)
    fedavg = formula_cost(net, StrategyConfig("fedavg"), 20, 50)
    assert fedavg == 2_568_384 * 8 * 1000
    assert abs(fedavg / 1e9 - 20.39) / 20.39 < 0.015
    ffl = formula_cost(net, StrategyConfig("factorized_fl"), 20, 50)
    assert ffl / fedavg < 0.02
    assert formula_cost(net, StrategyConfig("standalone"), 20, 50) == 0


def test_ledger_cumulative_is_sum_of_rounds():
    ledger = CostLedger()
    ledger.charge(0, 10, 0)
    ledger.charge(1, 3, 4)
    ledger.charge(2, 3, 4)
    d = ledger.to_dict()
    assert [e["cumulative_bytes"] for e in d["entries"]] == [40, 68, 96]
    assert comm_cost(ledger) == d["total_bytes"] == 96
    assert comm_cost(ledger, upto_round=1) == 68


def test_factorized_ledger_counts_only_u_and_similarity_v():
    fed = federation("factorized_fl", K=3)
    fed.run(3)
    blocks = fed.clients[0].model.blocks
    n_u = sum(len(b.u) for b in blocks)
    n_vsim = len(blocks[-2].v)
    full = sum(b.size for b in blocks)
    entries = fed.server.ledger.entries
    assert entries[0] == {"round": 0, "s2c_params": 3 * full, "c2s_params": 0}
    for e in entries[1:]:
        assert e["s2c_params"] == 3 * n_u
        assert e["c2s_params"] == 3 * (n_u + n_vsim)
    for r in fed.reports:
        assert r.cumulative_bytes == comm_cost(fed.server.ledger, upto_round=r.round)


def test_beta_ledger_counts_the_full_factorized_model():
    fed = federation("factorized_fl_beta", K=2)
    fed.run(2)
    full = sum(b.size for b in fed.clients[0].model.blocks)
    for e in fed.server.ledger.entries[1:]:
        assert e["s2c_params"] == e["c2s_params"] == 2 * full


def test_transmitted_params_respect_classifier_sharing():
    net = build_net("desk_shallow", num_classes=4)
    layers = [layer for layer in net if layer.trainable]
    local = StrategyConfig("fedavg", share_classifier=False)
    assert transmitted_params(net, local) == (math.prod(layers[0].weight_shape),) * 2
    n_u = sum(factor_shape(layer)[0] for layer in layers)
    assert transmitted_params(net, StrategyConfig("factorized_fl")) == (n_u, n_u + factor_shape(layers[0])[1])


def test_standalone_costs_nothing():
    fed = federation("standalone", K=2)
    fed.run(2)
    assert comm_cost(fed.server.ledger) == 0
    assert all(r.cumulative_bytes == 0 for r in fed.reports)


# ---------------------------------------------------------------- participants

def test_select_participants():
    assert select_participants(8, 1.0, 3, seed=0) == list(range(8))
    rounds = [select_participants(8, 0.5, r, seed=0) for r in range(1, 6)]
    assert all(len(s) == 4 for s in rounds)
    assert len({tuple(s) for s in rounds}) > 1
    assert rounds == [select_participants(8, 0.5, r, seed=0) for r in range(1, 6)]
    assert len(select_participants(7, 0.3, 1, seed=1)) == 3


def test_absent_clients_keep_their_models():
    fed = federation("standalone", K=4, participation_fraction=0.5)
    before = leaves_of(fed)
    report = fed.run_round()
    after = leaves_of(fed)
    for k in range(4):
        unchanged = same_leaves([before[k]], [after[k]])
        assert unchanged == (k not in report.participants)


# ---------------------------------------------------------------- trajectories

def test_single_client_factorized_equals_standalone_factorized():
    a = federation("factorized_fl", K=1)
    b = federation("standalone", K=1, factorized=True)
    a.run(3)
    b.run(3)
    assert same_leaves(leaves_of(a), leaves_of(b))
    assert [r.metrics for r in a.reports] == [r.metrics for r in b.reports]


def test_fedprox_without_penalty_is_fedavg():
    a = federation("fedavg", K=3)
    b = federation("fedprox", K=3, prox_mu=0.0)
    a.run(2)
    b.run(2)
    assert same_leaves(leaves_of(a), leaves_of(b))
    c = federation("fedprox", K=3, prox_mu=0.5)
    c.run(2)
    assert not same_leaves(leaves_of(a), leaves_of(c))


def test_fedavg_equal_sizes_is_arithmetic_mean():
    fed = federation("fedavg", K=4)
    fed.run_round()
    sizes = {c.num_train for c in fed.clients}
    assert len(sizes) == 1
    for i, g in fed.server.global_blocks.items():
        mean = np.mean([c.model.blocks[i] for c in fed.clients], axis=0)
        assert np.max(np.abs(g - mean)) < 1e-14


def test_fedavg_single_client_global_is_that_client():
    fed = federation("fedavg", K=1)
    fed.run_round()
    for i, g in fed.server.global_blocks.items():
        assert np.array_equal(g, fed.clients[0].model.blocks[i])


def test_local_classifier_is_not_synchronised():
    fed = federation("fedavg", K=3, share_classifier=False)
    fed.run(2)
    assert sorted(fed.server.global_blocks) == [0]
    clf = [c.model.blocks[-1] for c in fed.clients]
    assert not np.array_equal(clf[0], clf[1])


def _make_twins(fed):
    fed.run_round()
    fed.clients[1].model = fed.clients[0].model.copy()
    fed.server.uploads[1] = {k: [a.copy() for a in v] if isinstance(v, list) else v.copy()
                             for k, v in fed.server.uploads[0].items()}
    return fed.run_round()


def test_identical_twins_receive_identical_u():
    report = _make_twins(federation("factorized_fl", K=2))
    assert np.array_equal(report.u_snapshot[0], report.u_snapshot[1])
    assert report.sigma.tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_identical_twins_receive_identical_beta_factors():
    report = _make_twins(federation("factorized_fl_beta", K=2))
    assert np.array_equal(report.u_snapshot[0], report.u_snapshot[1])
    assert np.array_equal(report.v_snapshot[0], report.v_snapshot[1])


def test_beta_with_equal_scores_is_uniform_average():
    fed = federation("factorized_fl_beta", K=3, tau=1.0)
    fed.run_round()
    up = {k: dict(fed.server.uploads[k]) for k in range(3)}
    # tau = 1 zeroes every cross score: weights exp(eps)/Z for self, exp(0)/Z for the rest
    fed.run_round()
    w_self = softmax_list([10.0, 0.0, 0.0])[0]
    w_other = (1 - w_self) / 2
    for k in range(3):
        others = [j for j in range(3) if j != k]
        expect = w_self * up[k]["u"][0] + w_other * (up[others[0]]["u"][0] + up[others[1]]["u"][0])
        assert np.allclose(fed.reports[-1].u_snapshot[k], expect, atol=1e-12)


def test_no_aggregation_in_round_one():
    fed = federation("factorized_fl", K=3)
    report = fed.run_round()
    assert report.sigma is None
    init_u = report.u_snapshot[0]
    assert all(np.array_equal(u, init_u) for u in report.u_snapshot)


@pytest.mark.parametrize("strategy", ["fedavg", "factorized_fl", "factorized_fl_beta", "standalone"])
def test_thread_count_does_not_change_results(strategy):
    a = federation(strategy, K=4, threads=1)
    b = federation(strategy, K=4, threads=4)
    a.run(2)
    b.run(2)
    assert same_leaves(leaves_of(a), leaves_of(b))
    assert [r.metrics for r in a.reports] == [r.metrics for r in b.reports]


def test_nan_training_reports_client_and_round():
    fed = federation("fedavg", K=2, x_nan=True)
    with pytest.raises(NumericError) as info:
        fed.run_round()
    assert info.value.client_id == 0 and info.value.round_index == 1


def test_strategy_and_model_kind_must_agree():
    with pytest.raises(ConfigError):
        federation("fedavg", factorized=True)
    with pytest.raises(ConfigError):
        federation("factorized_fl", factorized=False)
    with pytest.raises(ConfigError):
        StrategyConfig("fedavg", tau=1.5)
    with pytest.raises(ConfigError):
        StrategyConfig("fedavg", participation_fraction=0.0)
