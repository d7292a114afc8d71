"""Robot-level simulator API on top of the batched step kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..design import (STANCE_DEPTH, THIGH, SHANK, WHEEL_RADIUS, DesignGraph,
                      ModuleKind, geometry_arrays, nominal_stance)
from . import kernels
from .constants import (DT_CONTROL, SIGMA_ANGLE, SIGMA_HEIGHT, SIGMA_RATE, TORQUE_GAIN, TRACK_AVG,
                        VMAX, W_EFFORT, W_FAIL, W_PITCH, W_STANCE, HF_DX, HF_N, HF_X0, WHEEL_STRUT)
from .terrain import Heightfield, terrain_window

BODY = slice(0, 6)
X, Z, PITCH, VX, VZ, WRATE = range(6)


@dataclass(frozen=True)
class Layout:
    """Index helper for state rows ``[body(6), q(J), qd(J), pending(J)]``."""

    n_joints: int

    @property
    def dim(self) -> int:
        return 6 + 3 * self.n_joints

    @property
    def q(self) -> slice:
        return slice(6, 6 + self.n_joints)

    @property
    def qd(self) -> slice:
        return slice(6 + self.n_joints, 6 + 2 * self.n_joints)

    @property
    def pending(self) -> slice:
        return slice(6 + 2 * self.n_joints, 6 + 3 * self.n_joints)


@dataclass
class Observation:
    """Noisy policy input. Body: (pitch, pitch_rate); x, z, vx, vz are withheld."""

    body: np.ndarray      # (B, 2)
    q: np.ndarray         # (B, J)
    qd: np.ndarray        # (B, J)
    terrain: np.ndarray   # (B, 21)


class RobotSim:
    """Compiled geometry of one design plus reset/step/observe."""

    def __init__(self, design: DesignGraph):
        self.design = design
        self.kinds, self.attach, self.jstart = geometry_arrays(design)
        self.jkind = design.joint_kinds()
        self.layout = Layout(design.n_joints)
        self.q_nominal, self.stance_mask = nominal_stance(design)

    @property
    def n_joints(self) -> int:
        return self.layout.n_joints

    # -- reset -----------------------------------------------------------
    def endpoint_offsets(self, q, pitch):
        """World-frame endpoint offsets from the body centre, (B, n_limbs, 2)."""
        q = np.atleast_2d(q)
        pitch = np.atleast_1d(pitch)
        out = np.empty((q.shape[0], len(self.kinds), 2))
        cp, sp = np.cos(pitch), np.sin(pitch)
        for i, k in enumerate(self.kinds):
            if k == 0:
                j = self.jstart[i]
                length = (THIGH + SHANK) * np.cos(0.5 * q[:, j + 1])
                rx = self.attach[i] + length * np.sin(q[:, j])
                rz = -length * np.cos(q[:, j])
            else:
                rx = np.full(q.shape[0], self.attach[i])
                rz = np.full(q.shape[0], -WHEEL_STRUT)
            out[:, i, 0] = cp * rx - sp * rz
            out[:, i, 1] = sp * rx + cp * rz - (WHEEL_RADIUS if k == 1 else 0.0)
        return out

    def reset(self, hf: Heightfield, perturb_seed: int | None = 0, x0: float = 0.0) -> np.ndarray:
        """Stance at ``x0`` resting on the terrain; seeded joint/pitch perturbations."""
        J = self.n_joints
        q = self.q_nominal.copy()
        pitch = 0.0
        if perturb_seed is not None:
            rng = np.random.default_rng(perturb_seed)
            q = q + rng.uniform(-0.02, 0.02, J)
            pitch = rng.uniform(-0.05, 0.05)
        off = self.endpoint_offsets(q, pitch)[0]
        ground = hf.height_at(x0 + off[:, 0])
        z = float(np.max(ground - off[:, 1]))
        s = np.zeros(self.layout.dim)
        s[X], s[Z], s[PITCH] = x0, z, pitch
        s[self.layout.q] = q
        return s

    # -- dynamics --------------------------------------------------------
    def step(self, states, actions, heights, env_idx=None, use_jit=None):
        """One control step for a batch. ``heights`` is (n,) or (E, n)."""
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        if actions.shape != (states.shape[0], self.n_joints):
            raise ValueError(f"action shape {actions.shape} does not match design "
                             f"{self.design.name} with {self.n_joints} joints")
        heights = np.atleast_2d(heights)
        if env_idx is None:
            env_idx = np.zeros(states.shape[0], dtype=np.int64)
        return kernels.step_batch(states, actions, self.kinds, self.attach, self.jstart,
                                  self.jkind, heights, env_idx, use_jit=use_jit)

    # -- sensing ---------------------------------------------------------
    def observe(self, states, heights, rng=None, noise_scale: float = 1.0, env_idx=None) -> Observation:
        states = np.atleast_2d(states)
        heights = np.atleast_2d(heights)
        if env_idx is None:
            env_idx = np.zeros(states.shape[0], dtype=np.int64)
        L = self.layout
        body = states[:, [PITCH, WRATE]].copy()
        q = states[:, L.q].copy()
        qd = states[:, L.qd].copy()
        win = terrain_window(heights[env_idx], states[:, X], states[:, Z])
        if rng is not None and noise_scale > 0:
            b, J = states.shape[0], self.n_joints
            body[:, 0] += noise_scale * SIGMA_ANGLE * rng.standard_normal(b)
            body[:, 1] += noise_scale * SIGMA_RATE * rng.standard_normal(b)
            q += noise_scale * SIGMA_ANGLE * rng.standard_normal((b, J))
            qd += noise_scale * SIGMA_RATE * rng.standard_normal((b, J))
            win += noise_scale * SIGMA_HEIGHT * rng.standard_normal(win.shape)
        return Observation(body, q, qd, win)

    # -- reward ----------------------------------------------------------
    def torque_estimate(self, states):
        """Effort proxy from the pre-step state; exact while nothing saturates."""
        L = self.layout
        return TORQUE_GAIN * TRACK_AVG * (states[..., L.pending] - states[..., L.qd])

    def reward(self, states, next_states, actions=None, torque=None, failed=None):
        """Forward progress minus pitch, effort, stance and failure penalties."""
        states = np.atleast_2d(states)
        next_states = np.atleast_2d(next_states)
        if torque is None:
            torque = self.torque_estimate(states)
        L = self.layout
        dev = (next_states[:, L.q] - self.q_nominal) * self.stance_mask
        r = (next_states[:, X] - states[:, X]
             - W_PITCH * next_states[:, PITCH] ** 2
             - W_EFFORT * (np.atleast_2d(torque) ** 2).sum(axis=1)
             - W_STANCE * (dev * dev).sum(axis=1))
        if failed is not None:
            r = r - W_FAIL * np.asarray(failed, dtype=np.float64)
        return r


def ground_below(heights, x):
    k = np.clip(np.floor((np.asarray(x) - HF_X0) / HF_DX).astype(np.int64), 0, HF_N - 1)
    return np.asarray(heights)[..., k]


# ---------------------------------------------------------------------------
# hand-crafted alternating gait

GAIT_PERIOD = 40
STRIDE = 0.2
SWING_MIN = 0.03
SWING_MAX = 0.14
LIFT_STEPS = 4
STRIDE_SPEED = STRIDE / (GAIT_PERIOD / 2 * DT_CONTROL)


def leg_phase_offsets(d: DesignGraph) -> np.ndarray:
    """Alternate legs front-to-back by half a period (radians)."""
    n = len(d.nodes_of(ModuleKind.LEG))
    order = np.arange(n)[::-1]  # front leg (largest x) starts at phase 0
    return (order % 2) * np.pi


def wheel_speed() -> float:
    return STRIDE_SPEED / WHEEL_RADIUS


def _foot_target(c: np.ndarray, swing: float):
    """Rectangular cycle in hip frame: (forward offset, depth below hip)."""
    half = GAIT_PERIOD // 2
    fx = np.empty_like(c, dtype=np.float64)
    depth = np.full_like(c, STANCE_DEPTH, dtype=np.float64)
    st = c < half
    fx[st] = STRIDE / 2 - STRIDE * c[st] / half
    sw = ~st
    cs = c[sw] - half
    lift = cs < LIFT_STEPS
    lower = cs >= half - LIFT_STEPS
    fwd = ~lift & ~lower
    f = np.empty_like(cs, dtype=np.float64)
    d = np.empty_like(cs, dtype=np.float64)
    f[lift] = -STRIDE / 2
    d[lift] = STANCE_DEPTH - swing * cs[lift] / LIFT_STEPS
    f[fwd] = -STRIDE / 2 + STRIDE * (cs[fwd] - LIFT_STEPS) / (half - 2 * LIFT_STEPS)
    d[fwd] = STANCE_DEPTH - swing
    f[lower] = STRIDE / 2
    d[lower] = STANCE_DEPTH - swing * (1 - (cs[lower] - (half - LIFT_STEPS)) / LIFT_STEPS)
    fx[sw] = f
    depth[sw] = d
    return fx, depth


def tripod_baseline(sim: RobotSim, states, t: int, feature_height: float = 0.0) -> np.ndarray:
    """Joint-velocity commands of the alternating gait at control step ``t``."""
    states = np.atleast_2d(states)
    d = sim.design
    L = sim.layout
    swing = min(max(SWING_MIN, 1.1 * feature_height), SWING_MAX)
    offs = np.round(leg_phase_offsets(d) / (2 * np.pi) * GAIT_PERIOD).astype(int)
    # the command issued now is applied during the next step (latency)
    q_next = states[:, L.q] + states[:, L.pending] * DT_CONTROL
    act = np.zeros((states.shape[0], sim.n_joints))
    li = 0
    for node in d.limbs:
        j = d.joint_slices()[node.node_id].start
        if node.kind is ModuleKind.LEG:
            c = np.array([(t + 2 + offs[li]) % GAIT_PERIOD])
            fx, depth = _foot_target(c, swing)
            reach = np.minimum(np.hypot(fx, depth), THIGH + SHANK)
            hip = np.arctan2(fx, depth)[0]
            knee = 2.0 * np.arccos(reach / (THIGH + SHANK))[0]
            act[:, j] = (hip - q_next[:, j]) / DT_CONTROL
            act[:, j + 1] = (knee - q_next[:, j + 1]) / DT_CONTROL
            li += 1
        else:
            act[:, j] = wheel_speed()
    return np.clip(act, -VMAX, VMAX)

