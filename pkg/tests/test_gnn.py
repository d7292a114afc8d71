import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmbrl import diffcore as dc
from modmbrl.design import DesignGraph, Module, ModuleKind, builtin_design, builtin_sets, build_design
from modmbrl.gnn import (NetConfig, Networks, graph_index, hidden_map, model_forward, policy_forward,
                         torque_forward, zero_hidden)
from modmbrl.simworld import RobotSim, make_terrain
from modmbrl.simworld.constants import HF_N, WIN_N
from modmbrl.simworld.terrain import Heightfield, TerrainKind, terrain_window, window_offsets
from modmbrl.trainer import collect_random
from modmbrl.trainer.checks import randomized_networks

SMALL = NetConfig(hidden=12, mlp=12)
ALL = builtin_sets().train + builtin_sets().test


def _obs(d, b, rng):
    J = d.n_joints
    return (0.1 * rng.standard_normal((b, 2)), rng.normal(0, 0.5, (b, J)),
            rng.normal(0, 1.0, (b, J)), -0.25 + 0.05 * rng.standard_normal((b, WIN_N)))


def _state(d, b, rng):
    sim = RobotSim(d)
    hf = make_terrain("flat", 0)
    s = np.stack([sim.reset(hf, i) for i in range(b)])
    s[:, 3:6] += 0.1 * rng.standard_normal((b, 3))
    s[:, 6 + d.n_joints:] += rng.standard_normal((b, 2 * d.n_joints))
    return s


def _permuted(d, perm):
    """Same robot with limb node ids relabelled by ``perm`` (new position -> old limb)."""
    limbs = [d.limbs[i] for i in perm]
    nodes = (d.nodes[0],) + tuple(Module(k + 1, m.kind, m.x) for k, m in enumerate(limbs))
    return DesignGraph(d.name + "-perm", d.body_length, nodes)


def _joint_perm(d, perm):
    sl = d.joint_slices()
    return np.concatenate([np.arange(sl[d.limbs[i].node_id].start, sl[d.limbs[i].node_id].stop)
                           for i in perm])


# -- weight sharing -------------------------------------------------------------

def test_parameter_count_independent_of_design():
    nets = Networks(SMALL, 0)
    before = {r: nets.store.count_trainable(r + "/") for r in ("policy", "model", "torque")}
    three = builtin_design("legs-three")
    six = build_design("six", [(ModuleKind.LEG, x) for x in (-0.45, -0.15, 0.15, 0.45)]
                       + [(ModuleKind.WHEEL, x) for x in (-0.3, 0.3)])
    rng = np.random.default_rng(0)
    for d in (three, six):
        mu, lv, h = policy_forward(nets.policy, d, *_obs(d, 2, rng))
        assert mu.shape == (2, d.n_joints) and h.shape == (2, d.n_nodes, SMALL.hidden)
        model_forward(nets.model, d, _state(d, 2, rng), np.zeros((2, d.n_joints)), _obs(d, 2, rng)[3])
    after = {r: nets.store.count_trainable(r + "/") for r in ("policy", "model", "torque")}
    assert before == after


def test_identical_leg_nodes_identical_outputs():
    nets = randomized_networks(SMALL, 1)
    d = build_design("two-legs", [(ModuleKind.LEG, -0.3), (ModuleKind.LEG, 0.3)])
    gi = graph_index(d)
    rng = np.random.default_rng(2)
    leg_row = rng.standard_normal(5)
    inputs = {ModuleKind.BODY: dc.Tensor(rng.standard_normal((1, 1, 2 + SMALL.terrain_features))),
              ModuleKind.LEG: dc.Tensor(np.tile(leg_row, (1, 2, 1)))}
    hrow = rng.standard_normal(SMALL.hidden)
    h = dc.Tensor(np.stack([rng.standard_normal(SMALL.hidden), hrow, hrow])[None])
    out, h1 = nets.policy.propagate(gi, inputs, h)
    leg = out[ModuleKind.LEG].data[0]
    assert np.array_equal(leg[0], leg[1])
    assert np.array_equal(h1.data[0, 1], h1.data[0, 2])


# -- equivariance ---------------------------------------------------------------

@settings(max_examples=10, deadline=None)
@given(st.sampled_from(ALL), st.randoms(use_true_random=False))
def test_policy_permutation_equivariance(d, rnd):
    perm = list(range(len(d.limbs)))
    rnd.shuffle(perm)
    dp = _permuted(d, perm)
    jp = _joint_perm(d, perm)
    nets = randomized_networks(SMALL, 3)
    rng = np.random.default_rng(4)
    body, q, qd, win = _obs(d, 3, rng)
    h = rng.standard_normal((3, d.n_nodes, SMALL.hidden))
    hp = h[:, [0] + [i + 1 for i in perm]]
    mu, lv, h1 = policy_forward(nets.policy, d, body, q, qd, win, dc.Tensor(h))
    mup, lvp, h1p = policy_forward(nets.policy, dp, body, q[:, jp], qd[:, jp], win, dc.Tensor(hp))
    np.testing.assert_allclose(mup.data, mu.data[:, jp], rtol=0, atol=1e-12)
    np.testing.assert_allclose(lvp.data, lv.data[:, jp], rtol=0, atol=1e-12)
    np.testing.assert_allclose(h1p.data, h1.data[:, [0] + [i + 1 for i in perm]], rtol=0, atol=1e-12)


@pytest.mark.parametrize("role", ["model", "torque"])
def test_model_and_torque_permutation_equivariance(role):
    d = builtin_design("wheels-mid")
    perm = [2, 0, 1]
    dp = _permuted(d, perm)
    jp = _joint_perm(d, perm)
    nets = randomized_networks(SMALL, 5)
    rng = np.random.default_rng(6)
    s = _state(d, 4, rng)
    a = rng.standard_normal((4, d.n_joints))
    sp = np.concatenate([s[:, :6]] + [s[:, 6 + k * d.n_joints:6 + (k + 1) * d.n_joints][:, jp]
                                      for k in range(3)], axis=1)
    win = _obs(d, 4, rng)[3]
    if role == "model":
        out = model_forward(nets.model, d, s, a, win).data
        outp = model_forward(nets.model, dp, sp, a[:, jp], win).data
        J = d.n_joints
        expect = np.concatenate([out[:, :6]] + [out[:, 6 + k * J:6 + (k + 1) * J][:, jp]
                                                for k in range(3)], axis=1)
    else:
        expect = torque_forward(nets.torque, d, s, a).data[:, jp]
        outp = torque_forward(nets.torque, dp, sp, a[:, jp]).data
    np.testing.assert_allclose(outp, expect, rtol=0, atol=1e-12)


# -- recurrence -----------------------------------------------------------------

def test_memoryless_when_hidden_reset():
    d = builtin_design("wheels-front")
    nets = randomized_networks(SMALL, 7)
    rng = np.random.default_rng(8)
    o1, o2, o3 = (_obs(d, 2, rng) for _ in range(3))
    z = zero_hidden(d, 2, SMALL)
    ref = policy_forward(nets.policy, d, *o3, z)[0].data
    for prev in (o1, o2):
        policy_forward(nets.policy, d, *prev, z)
        again = policy_forward(nets.policy, d, *o3, zero_hidden(d, 2, SMALL))[0].data
        assert np.array_equal(ref, again)


def test_memory_carries_earlier_observation():
    d = builtin_design("wheels-front")
    nets = randomized_networks(SMALL, 7)
    rng = np.random.default_rng(9)
    seq = [_obs(d, 1, rng) for _ in range(3)]
    alt = list(seq)
    b, q, qd, w = seq[0]
    alt[0] = (b, q + 0.5, qd, w)

    def last(obs_seq):
        h = zero_hidden(d, 1, SMALL)
        for o in obs_seq:
            mu, _, h = policy_forward(nets.policy, d, *o, h)
        return mu.data
    assert not np.allclose(last(seq), last(alt))


def test_hidden_map_keys_match_nodes():
    d = builtin_design("legs-three")
    hm = hidden_map(zero_hidden(d, 2, SMALL), d)
    assert sorted(hm) == [n.node_id for n in d.nodes]
    assert all(np.all(v == 0) for v in hm.values())
    with pytest.raises(ValueError):
        hidden_map(np.zeros((2, 3, SMALL.hidden)), d)


# -- terrain encoder --------------------------------------------------------------

def test_terrain_encoding_ignores_heights_outside_window():
    base = make_terrain("stairs", 3, 0)
    x, z = 1.0, 0.25
    lo = x + window_offsets()[0]
    hi = x + window_offsets()[-1]
    cells = -2.0 + 0.05 * np.arange(HF_N)
    other = base.heights.copy()
    outside = (cells < lo - 0.05) | (cells > hi + 0.05)
    other[outside] += np.random.default_rng(0).uniform(0, 0.3, outside.sum())
    hf2 = Heightfield(TerrainKind.STAIRS, 3, 0, other)
    w1 = terrain_window(base.heights, np.array([x]), np.array([z]))
    w2 = terrain_window(hf2.heights, np.array([x]), np.array([z]))
    nets = randomized_networks(SMALL, 0)
    e1 = nets.policy.encode_terrain(w1).data
    e2 = nets.policy.encode_terrain(w2).data
    assert np.array_equal(e1, e2)
    inside = w1.copy()
    inside[0, 10] += 0.1
    assert not np.allclose(nets.policy.encode_terrain(inside).data, e1)


def test_running_stats_update_only_in_train_mode():
    nets = Networks(SMALL, 0)
    w = -0.25 + 0.05 * np.random.default_rng(1).standard_normal((8, WIN_N))
    m0 = nets.store["policy/terrain/run_mean"].data.copy()
    nets.policy.encode_terrain(w, train=False)
    assert np.array_equal(nets.store["policy/terrain/run_mean"].data, m0)
    nets.policy.encode_terrain(w, train=True)
    assert not np.array_equal(nets.store["policy/terrain/run_mean"].data, m0)
    assert nets.store["policy/terrain/run_n"].data[0] == 1.0
    assert not nets.store["policy/terrain/run_mean"].requires_grad


def test_terrain_window_shape_checked():
    nets = Networks(SMALL, 0)
    with pytest.raises(dc.ShapeError):
        nets.policy.encode_terrain(np.zeros((2, 20)))


# -- zero-initialised decoders ----------------------------------------------------

@pytest.mark.parametrize("d", ALL, ids=lambda d: d.name)
def test_fresh_policy_zero_mean(d):
    nets = Networks(SMALL, 0)
    J = d.n_joints
    mu, lv, h = policy_forward(nets.policy, d, np.zeros((1, 2)), np.zeros((1, J)), np.zeros((1, J)),
                               np.zeros((1, WIN_N)))
    assert np.array_equal(mu.data, np.zeros((1, J)))
    assert np.all((lv.data >= -8) & (lv.data <= 2))


@pytest.mark.parametrize("d", ALL, ids=lambda d: d.name)
def test_fresh_model_identity_and_zero_torque(d):
    nets = Networks(SMALL, 0)
    rng = np.random.default_rng(3)
    s = _state(d, 3, rng)
    a = rng.standard_normal((3, d.n_joints))
    nxt = model_forward(nets.model, d, s, a, _obs(d, 3, rng)[3]).data
    J = d.n_joints
    assert np.array_equal(nxt[:, :6 + 2 * J], s[:, :6 + 2 * J])
    assert np.array_equal(nxt[:, 6 + 2 * J:], a)
    tq = torque_forward(nets.torque, d, s, a).data
    assert tq.shape == (3, J) and np.array_equal(tq, np.zeros((3, J)))


def test_logvar_clamped():
    nets = randomized_networks(SMALL, 0, scale=50.0)
    d = builtin_design("legs-three")
    _, lv, _ = policy_forward(nets.policy, d, *_obs(d, 16, np.random.default_rng(0)))
    assert lv.data.min() >= -8 and lv.data.max() <= 2


def test_dimension_mismatch_errors():
    nets = Networks(SMALL, 0)
    d = builtin_design("wheels-mid")
    J = d.n_joints
    with pytest.raises(dc.ShapeError):
        policy_forward(nets.policy, d, np.zeros((1, 2)), np.zeros((1, J + 1)), np.zeros((1, J)),
                       np.zeros((1, WIN_N)))
    with pytest.raises(dc.ShapeError):
        model_forward(nets.model, d, np.zeros((1, d.state_dim)), np.zeros((1, J - 1)), np.zeros((1, WIN_N)))
    with pytest.raises(dc.ShapeError):
        torque_forward(nets.torque, d, np.zeros((1, d.state_dim + 1)), np.zeros((1, J)))


# -- gradients --------------------------------------------------------------------

def test_model_gradient_matches_finite_differences():
    d = builtin_design("wheels-rear")
    nets = randomized_networks(SMALL, 2)
    rng = np.random.default_rng(0)
    s = _state(d, 2, rng)
    a = rng.standard_normal((2, d.n_joints))
    win = _obs(d, 2, rng)[3]
    loss = lambda: dc.tsum(dc.square(model_forward(nets.model, d, s, a, win)))
    err = dc.grad_check_store(loss, nets.store, names=list(nets.store.trainable("model/")),
                              max_per_param=3, rng=np.random.default_rng(1))
    assert err < 1e-4


def test_policy_gradient_matches_finite_differences():
    d = builtin_design("legs-three")
    nets = randomized_networks(SMALL, 2)
    body, q, qd, win = _obs(d, 2, np.random.default_rng(0))

    def loss():
        mu, lv, h = policy_forward(nets.policy, d, body, q, qd, win)
        mu2, lv2, _ = policy_forward(nets.policy, d, body, q, qd, win, h)
        return dc.add(dc.tsum(dc.square(mu2)), dc.tsum(lv2))
    err = dc.grad_check_store(loss, nets.store, names=list(nets.store.trainable("policy/")),
                              max_per_param=3, rng=np.random.default_rng(1))
    assert err < 1e-4


# -- torque estimator ---------------------------------------------------------------

def test_torque_estimator_explains_label_variance():
    """Fitted on 200 random trajectories, held-out MSE < 10% of label variance."""
    from modmbrl.trainer import Hyperparams, TrajectoryDataset, train_torque_estimator
    d = builtin_design("wheels-mid")
    nets = Networks(NetConfig(), 0)
    data = TrajectoryDataset()
    data.extend(d, collect_random(d, None, 200, seed=0))
    with nets.store.frozen("policy/"), nets.store.frozen("model/"):
        train_torque_estimator(nets, data, Hyperparams(), np.random.default_rng(0))
    test = collect_random(d, None, 10, seed=99)
    s = np.concatenate([t.s for t in test])
    a = np.concatenate([t.a for t in test])
    y = np.concatenate([t.torque for t in test])
    pred = torque_forward(nets.torque, d, s, a).data
    assert np.mean((pred - y) ** 2) < 0.1 * np.mean((y - y.mean(axis=0)) ** 2)
