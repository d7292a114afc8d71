import numpy as np
import pytest

from modmbrl.design import TEST_NAMES, TRAIN_NAMES, build_design, builtin_design, builtin_sets
from modmbrl.simworld import (RobotSim, TerrainKind, leg_phase_offsets, make_terrain,
                              terrain_window, tripod_baseline, wheel_speed)
from modmbrl.simworld import constants as C
from modmbrl.simworld.sim import ground_below
from modmbrl.simworld.terrain import sample_x, window_offsets

ALL_NAMES = TRAIN_NAMES + TEST_NAMES


def _rollout(sim, hf, s, actions, use_jit=None):
    states = [s]
    for a in actions:
        s, _, _ = sim.step(s, a, hf.heights, use_jit=use_jit)
        states.append(s)
    return np.concatenate(states)


def _baseline_distance(d, kind, level, seed, steps=C.EPISODE_STEPS):
    sim, hf = RobotSim(d), make_terrain(kind, level, seed)
    s = sim.reset(hf, seed)[None]
    x0 = s[0, 0]
    for t in range(steps):
        s, _, f = sim.step(s, tripod_baseline(sim, s, t, hf.feature_height), hf.heights)
        if f[0]:
            break
    return s[0, 0] - x0


# -- terrain -------------------------------------------------------------

def test_flat_is_zero():
    for level in (0, 3, 7):
        assert not make_terrain("flat", level, seed=level).heights.any()


def test_stairs_level5_step_height():
    hf = make_terrain(TerrainKind.STAIRS, 5, seed=0)
    jumps = np.diff(hf.heights)
    rises = jumps[jumps != 0]
    np.testing.assert_allclose(rises, 0.10, atol=1e-12)
    # treads are 0.30 m = 6 cells between consecutive risers
    edges = np.flatnonzero(jumps)
    assert set(np.diff(edges)) == {6}


def test_curbs_level1_blocks():
    hf = make_terrain("curbs", 1, seed=0)
    assert hf.heights.max() == pytest.approx(0.02)
    on = np.flatnonzero(np.diff(np.r_[0, (hf.heights > 0).astype(int), 0]))
    widths = (on[1::2] - on[::2]) * C.HF_DX
    np.testing.assert_allclose(widths, 0.30, atol=1e-9)


@pytest.mark.parametrize("kind", ["stairs", "curbs", "staggered"])
def test_start_zone_and_feature_height(kind):
    for seed in range(5):
        hf = make_terrain(kind, 3, seed)
        xs = sample_x()
        assert not hf.heights[xs < 0.85].any()
        jumps = np.abs(np.diff(hf.heights))
        assert jumps.max() == pytest.approx(0.06)


def test_seed_moves_features():
    a = make_terrain("stairs", 2, 0).heights
    b = make_terrain("stairs", 2, 1).heights
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, make_terrain("stairs", 2, 0).heights)


def test_terrain_errors():
    with pytest.raises(ValueError, match="unknown terrain"):
        make_terrain("lava", 1)
    with pytest.raises(ValueError):
        make_terrain("stairs", -1)


def test_window_geometry():
    off = window_offsets()
    assert off.shape == (21,)
    assert off[0] == pytest.approx(-0.25) and off[-1] == pytest.approx(1.25)
    hf = make_terrain("stairs", 5, 0)
    w = terrain_window(hf.heights, 0.5, 0.3)
    np.testing.assert_allclose(w, hf.height_at(0.5 + off) - 0.3)
    wb = terrain_window(np.stack([hf.heights] * 2), np.array([0.5, 0.5]), np.array([0.3, 0.3]))
    np.testing.assert_array_equal(wb, np.stack([w, w]))


# -- reset ---------------------------------------------------------------

def test_reset_examples():
    d = builtin_design("wheels-mid")
    sim, hf = RobotSim(d), make_terrain("flat", 0)
    states = np.stack([sim.reset(hf, seed) for seed in range(10)])
    assert (states[:, 0] == 0).all()
    np.testing.assert_array_equal(sim.reset(hf, 3), sim.reset(hf, 3))
    q = states[:, sim.layout.q]
    assert np.abs(q - sim.q_nominal).max() <= 0.02
    assert len({tuple(r) for r in q}) == 10
    assert np.abs(states[:, 2]).max() <= 0.05


def test_reset_rests_on_ground():
    d = builtin_design("legs-three")
    sim, hf = RobotSim(d), make_terrain("flat", 0)
    s = sim.reset(hf, None)
    assert s[1] == pytest.approx(C.STANCE_DEPTH, abs=1e-12)
    off = sim.endpoint_offsets(s[sim.layout.q], s[2])[0]
    np.testing.assert_allclose(s[1] + off[:, 1], 0.0, atol=1e-12)


# -- dynamics ------------------------------------------------------------

@pytest.mark.parametrize("name", ALL_NAMES)
def test_static_equilibrium(name):
    sim, hf = RobotSim(builtin_design(name)), make_terrain("flat", 0)
    s0 = sim.reset(hf, None)[None]
    traj = _rollout(sim, hf, s0, np.zeros((100, 1, sim.n_joints)))
    assert np.abs(traj - s0).max() < 1e-9


def test_zero_command_never_drifts():
    sim, hf = RobotSim(builtin_design("wheel-fore")), make_terrain("flat", 0)
    s0 = sim.reset(hf, None)[None]
    traj = _rollout(sim, hf, s0, np.zeros((1000, 1, sim.n_joints)))
    assert traj[-1, 0] == s0[0, 0]


def test_wheel_rolls_without_slip():
    sim, hf = RobotSim(build_design("unicycle", [("wheel", 0.0)])), make_terrain("flat", 0)
    s = sim.reset(hf, None)[None]
    L = sim.layout
    s[:, L.qd] = 2.0
    s[:, L.pending] = 2.0
    for _ in range(5):
        s, _, _ = sim.step(s, np.full((1, 1), 2.0), hf.heights)
        assert s[0, 3] == pytest.approx(0.16, abs=1e-12)


def test_latency_one_step():
    sim, hf = RobotSim(builtin_design("wheels-rear")), make_terrain("stairs", 3, 0)
    rng = np.random.default_rng(4)
    s0 = sim.reset(hf, 1)[None]
    s0[:, sim.layout.pending] = rng.normal(size=(1, sim.n_joints))
    a, b = rng.normal(size=(2, 1, sim.n_joints))
    s1a, _, _ = sim.step(s0, a, hf.heights)
    s1b, _, _ = sim.step(s0, b, hf.heights)
    L = sim.layout
    np.testing.assert_array_equal(s1a[:, :L.pending.start], s1b[:, :L.pending.start])
    c = np.zeros((1, sim.n_joints))
    s2a, _, _ = sim.step(s1a, c, hf.heights)
    s2b, _, _ = sim.step(s1b, c, hf.heights)
    assert np.abs(s2a[:, L.qd] - s2b[:, L.qd]).max() > 1e-3


def test_action_shape_checked():
    sim, hf = RobotSim(builtin_design("legs-three")), make_terrain("flat", 0)
    with pytest.raises(ValueError, match="action shape"):
        sim.step(sim.reset(hf)[None], np.zeros((1, 5)), hf.heights)


def test_joint_limits_respected():
    sim, hf = RobotSim(builtin_design("wheels-mid")), make_terrain("flat", 0)
    s = sim.reset(hf)[None]
    for _ in range(40):
        s, _, _ = sim.step(s, np.full((1, sim.n_joints), 50.0), hf.heights)
    L = sim.layout
    q, qd = s[0, L.q], s[0, L.qd]
    assert np.abs(qd).max() <= C.VMAX
    hips, knees = sim.jkind == 0, sim.jkind == 1
    assert np.abs(q[hips]).max() <= C.HIP_LIMIT
    assert np.abs(q[knees]).max() <= C.KNEE_LIMIT
    assert (s[0, L.pending] == C.VMAX).all()


@pytest.mark.parametrize("kind", ["stairs", "curbs", "staggered"])
def test_non_penetration(kind):
    rng = np.random.default_rng(7)
    for name in ("wheels-front", "legs-three"):
        sim, hf = RobotSim(builtin_design(name)), make_terrain(kind, 5, 2)
        s = np.stack([sim.reset(hf, k, x0=0.4 * k) for k in range(6)])
        for t in range(150):
            a = tripod_baseline(sim, s, t, hf.feature_height) + rng.normal(0, 2.0, s[:, 6:6 + sim.n_joints].shape)
            s, _, _ = sim.step(s, a, hf.heights)
            off = sim.endpoint_offsets(s[:, sim.layout.q], s[:, 2])
            gap = s[:, None, 1] + off[..., 1] - ground_below(hf.heights, s[:, None, 0] + off[..., 0])
            touching = (gap <= C.CONTACT_TOL).any(axis=1)
            assert (gap[touching] >= -C.CONTACT_TOL).all()


def test_deterministic_replay():
    sim, hf = RobotSim(builtin_design("wheel-aft")), make_terrain("curbs", 4, 3)
    acts = np.random.default_rng(0).normal(0, 3, (60, 4, sim.n_joints))
    s0 = np.stack([sim.reset(hf, k) for k in range(4)])
    np.testing.assert_array_equal(_rollout(sim, hf, s0, acts), _rollout(sim, hf, s0, acts))


@pytest.mark.parametrize("name", ALL_NAMES)
def test_jit_matches_numpy(name):
    # one-step agreement from shared states, so contact thresholds cannot amplify rounding
    sim = RobotSim(builtin_design(name))
    rng = np.random.default_rng(11)
    hfs = [make_terrain(k, 4, 1) for k in ("flat", "stairs", "curbs", "staggered")]
    heights = np.stack([h.heights for h in hfs])
    env = np.repeat(np.arange(4), 3)
    s = np.stack([sim.reset(hfs[e], i, x0=0.35 * i) for i, e in enumerate(env)])
    worst = 0.0
    for t in range(120):
        a = tripod_baseline(sim, s, t, 0.08) + rng.normal(0, 1.0, (len(env), sim.n_joints))
        sj, tj, fj = sim.step(s, a, heights, env, use_jit=True)
        sn, tn, fn = sim.step(s, a, heights, env, use_jit=False)
        worst = max(worst, np.abs(sj - sn).max(), np.abs(tj - tn).max())
        np.testing.assert_array_equal(fj, fn)
        s = sj
    assert worst < 1e-12


def test_failure_flag_on_flip():
    sim, hf = RobotSim(builtin_design("legs-three")), make_terrain("flat", 0)
    s = sim.reset(hf, None)[None]
    s[0, 2] = 1.3
    s[0, 1] = 1.0
    _, _, fail = sim.step(s, np.zeros((1, sim.n_joints)), hf.heights)
    assert fail[0]


# -- observation and reward ---------------------------------------------

def test_observe_noise_free_matches_state():
    sim, hf = RobotSim(builtin_design("wheels-front")), make_terrain("flat", 0)
    s = sim.reset(hf, 5)[None]
    obs = sim.observe(s, hf.heights, rng=np.random.default_rng(0), noise_scale=0.0)
    L = sim.layout
    np.testing.assert_array_equal(obs.body, s[:, [2, 5]])
    np.testing.assert_array_equal(obs.q, s[:, L.q])
    np.testing.assert_array_equal(obs.qd, s[:, L.qd])


def test_observe_flat_window():
    sim, hf = RobotSim(builtin_design("legs-three")), make_terrain("flat", 0)
    s = sim.reset(hf, None)[None]
    obs = sim.observe(s, hf.heights)
    np.testing.assert_allclose(obs.terrain, -0.25, atol=1e-12)
    assert obs.terrain.shape == (1, 21)


def test_observe_seeded():
    sim, hf = RobotSim(builtin_design("wheel-fore")), make_terrain("stairs", 2, 0)
    s = sim.reset(hf, 1)[None]
    a = sim.observe(s, hf.heights, rng=np.random.default_rng(9))
    b = sim.observe(s, hf.heights, rng=np.random.default_rng(9))
    for f in ("body", "q", "qd", "terrain"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    clean = sim.observe(s, hf.heights)
    assert not np.array_equal(a.terrain, clean.terrain)


def test_observe_noise_scale():
    sim, hf = RobotSim(builtin_design("wheels-mid")), make_terrain("flat", 0)
    s = np.repeat(sim.reset(hf, None)[None], 20000, axis=0)
    obs = sim.observe(s, hf.heights, rng=np.random.default_rng(0))
    assert obs.body[:, 0].std() == pytest.approx(C.SIGMA_ANGLE, rel=0.03)
    assert obs.qd.std() == pytest.approx(C.SIGMA_RATE, rel=0.03)
    assert (obs.terrain + 0.25).std() == pytest.approx(C.SIGMA_HEIGHT, rel=0.03)


def test_reward_examples():
    sim, hf = RobotSim(builtin_design("wheels-rear")), make_terrain("flat", 0)
    s = sim.reset(hf, None)[None]
    zero = np.zeros((1, sim.n_joints))
    assert sim.reward(s, s, zero, torque=zero, failed=[False])[0] == 0.0
    moved = s.copy()
    moved[0, 0] += 0.1
    assert sim.reward(s, moved, zero, torque=zero)[0] == pytest.approx(0.1, abs=1e-15)
    assert sim.reward(s, s, zero, torque=zero, failed=[True])[0] == -2.0


def test_reward_penalty_terms():
    sim, hf = RobotSim(builtin_design("legs-three")), make_terrain("flat", 0)
    s = sim.reset(hf, None)[None]
    nxt = s.copy()
    nxt[0, 2] = 0.2
    nxt[0, 6] += 0.3
    tau = np.full((1, sim.n_joints), 2.0)
    expect = -0.05 * 0.04 - 0.001 * 4.0 * sim.n_joints - 0.01 * 0.09
    assert sim.reward(s, nxt, torque=tau)[0] == pytest.approx(expect, abs=1e-15)


# -- baseline ------------------------------------------------------------

def test_phase_offsets_alternate():
    d = build_design("biped", [("leg", -0.3), ("leg", 0.3)])
    np.testing.assert_allclose(sorted(leg_phase_offsets(d)), [0.0, np.pi])
    three = leg_phase_offsets(builtin_design("legs-three"))
    np.testing.assert_allclose(three, [0.0, np.pi, 0.0])


def test_wheel_command_value():
    assert wheel_speed() == pytest.approx((0.2 / (20 / 12)) / 0.08, abs=1e-12)
    sim, hf = RobotSim(builtin_design("wheels-mid")), make_terrain("flat", 0)
    a = tripod_baseline(sim, sim.reset(hf)[None], 0)
    assert a[0, sim.jkind == 2][0] == pytest.approx(1.5)


def test_baseline_commands_bounded():
    sim, hf = RobotSim(builtin_design("legs-three")), make_terrain("stairs", 5, 0)
    s = sim.reset(hf)[None]
    for t in range(80):
        a = tripod_baseline(sim, s, t, hf.feature_height)
        assert np.abs(a).max() <= C.VMAX
        s, _, _ = sim.step(s, a, hf.heights)


@pytest.mark.parametrize("name", ALL_NAMES)
def test_baseline_walks_on_flat(name):
    assert _baseline_distance(builtin_design(name), "flat", 0, seed=0) > 1.0


def test_baseline_slower_on_high_stairs():
    for d in builtin_sets().train:
        flat = np.mean([_baseline_distance(d, "flat", 0, k) for k in range(3)])
        hard = np.mean([_baseline_distance(d, "stairs", 5, k) for k in range(3)])
        assert hard < flat
