"""Transition storage, smooth random actions and bootstrap collection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from ..design import DesignGraph
from ..simworld import RobotSim, make_terrain
from ..simworld.constants import VMAX
from ..simworld.terrain import Heightfield, TerrainKind, terrain_window

N_KNOTS = 10
KNOT_STD = 2.0


@dataclass
class Trajectory:
    design: str
    env: TerrainKind
    level: int
    s: np.ndarray        # (n, D)
    a: np.ndarray        # (n, J)
    s_next: np.ndarray   # (n, D)
    window: np.ndarray   # (n, 21), noise-free, at s
    torque: np.ndarray   # (n, J)

    def __len__(self):
        return self.s.shape[0]


class TrajectoryDataset:
    """Append-only transitions grouped by (design, env, level)."""

    def __init__(self):
        self._chunks: dict[tuple, list] = {}
        self._traj: dict[tuple, list] = {}
        self._n = 0
        self._next_id = 0
        self._cache: dict[tuple, dict] = {}
        self.designs: dict[str, DesignGraph] = {}

    def __len__(self):
        return self._n

    def add(self, d: DesignGraph, tr: Trajectory) -> int:
        J, D = d.n_joints, d.state_dim
        if tr.s.shape[1:] != (D,) or tr.s_next.shape[1:] != (D,) or tr.a.shape[1:] != (J,):
            raise ValueError(f"trajectory dims do not match design {d.name}")
        if tr.design != d.name:
            raise ValueError("trajectory design name mismatch")
        key = (tr.design, tr.env, int(tr.level))
        self.designs[d.name] = d
        self._chunks.setdefault(key, []).append(tr)
        self._traj.setdefault(key, []).append(np.full(len(tr), self._next_id, dtype=np.int64))
        self._next_id += 1
        self._n += len(tr)
        self._cache.pop(key, None)
        return self._next_id - 1

    def extend(self, d: DesignGraph, trajs):
        for tr in trajs:
            self.add(d, tr)

    def keys(self) -> list[tuple]:
        return sorted(self._chunks, key=lambda k: (k[0], k[1].value, k[2]))

    def group(self, key) -> dict:
        if key not in self._cache:
            ch = self._chunks[key]
            self._cache[key] = {
                "s": np.concatenate([c.s for c in ch]),
                "a": np.concatenate([c.a for c in ch]),
                "s_next": np.concatenate([c.s_next for c in ch]),
                "window": np.concatenate([c.window for c in ch]),
                "torque": np.concatenate([c.torque for c in ch]),
                "traj": np.concatenate(self._traj[key]),
            }
        return self._cache[key]

    def levels(self) -> set[int]:
        return {k[2] for k in self._chunks}

    def count(self, design: str | None = None) -> int:
        return sum(len(c) for k, ch in self._chunks.items() for c in ch
                   if design is None or k[0] == design)


def spline_actions(rng: np.random.Generator, n_traj: int, steps: int, n_joints: int,
                   scale: float = 1.0, knots: np.ndarray | None = None) -> np.ndarray:
    """Smooth joint-velocity sequences (n_traj, steps, J) clipped to the limit.

    ``N_KNOTS`` knot vectors ~ N(0, (scale * 2 rad/s)^2) are interpolated by
    a cubic spline placed evenly over the sequence.
    """
    if knots is None:
        knots = scale * KNOT_STD * rng.standard_normal((n_traj, N_KNOTS, n_joints))
    tk = knot_times(steps)
    t = np.arange(steps, dtype=np.float64)
    vals = CubicSpline(tk, knots, axis=1)(t)
    return np.clip(vals, -VMAX, VMAX)


def knot_times(steps: int) -> np.ndarray:
    return np.linspace(0.0, steps - 1, N_KNOTS)


def rollout_open_loop(sim: RobotSim, hf: Heightfield, s0: np.ndarray, actions: np.ndarray,
                      level: int | None = None) -> list[Trajectory]:
    """Apply (B, steps, J) action sequences from (B, D) start states.

    Records every step; a failure flag does not truncate collection.
    """
    B, steps, _ = actions.shape
    s = s0.copy()
    S, A, S1, W, TQ = [], [], [], [], []
    for t in range(steps):
        a = actions[:, t]
        W.append(terrain_window(hf.heights, s[:, 0], s[:, 1]))
        nxt, tau, _ = sim.step(s, a, hf.heights)
        S.append(s)
        A.append(a)
        S1.append(nxt)
        TQ.append(tau)
        s = nxt
    st = lambda xs: np.stack(xs, axis=1)
    S, A, S1, W, TQ = map(st, (S, A, S1, W, TQ))
    lvl = hf.level if level is None else level
    return [Trajectory(sim.design.name, hf.kind, lvl, S[i], A[i], S1[i], W[i], TQ[i])
            for i in range(B)]


def collect_random(d: DesignGraph, hf: Heightfield | None, n_traj: int, seed: int,
                   steps: int = 100) -> list[Trajectory]:
    """Bootstrap trajectories from smooth random joint commands."""
    hf = hf if hf is not None else make_terrain("flat", 0)
    rng = np.random.default_rng([seed, 17])
    sim = RobotSim(d)
    acts = spline_actions(rng, n_traj, steps, d.n_joints)
    seeds = rng.integers(0, 2**31, n_traj)
    s0 = np.stack([sim.reset(hf, int(k)) for k in seeds])
    return rollout_open_loop(sim, hf, s0, acts)


def split_by_trajectory(traj_ids: np.ndarray, rng: np.random.Generator, val_frac: float = 0.1):
    """Boolean validation mask; whole trajectories go to one side."""
    ids = np.unique(traj_ids)
    n_val = int(round(val_frac * len(ids)))
    if len(ids) >= 2:
        n_val = max(n_val, 1)
    val_ids = rng.permutation(ids)[:n_val]
    return np.isin(traj_ids, val_ids)


def stratified_batches(sizes: dict, batch: int, rng: np.random.Generator):
    """Yield per-group index arrays so every minibatch touches every group.

    ``sizes`` maps group key -> number of rows. One epoch covers roughly
    ``sum(sizes) / batch`` minibatches; each group's share is proportional
    to its size with at least one row.
    """
    keys = [k for k in sizes if sizes[k] > 0]
    total = sum(sizes[k] for k in keys)
    if total == 0:
        return
    n_batches = max(1, int(np.ceil(total / batch)))
    perms = {k: rng.permutation(sizes[k]) for k in keys}
    cursor = {k: 0 for k in keys}
    for _ in range(n_batches):
        out = {}
        for k in keys:
            m = max(1, int(round(batch * sizes[k] / total)))
            idx = []
            while m > 0:
                take = min(m, sizes[k] - cursor[k])
                idx.append(perms[k][cursor[k]:cursor[k] + take])
                cursor[k] += take
                m -= take
                if cursor[k] >= sizes[k]:
                    perms[k] = rng.permutation(sizes[k])
                    cursor[k] = 0
            out[k] = np.concatenate(idx)
        yield out
