"""On-policy data aggregation."""

from __future__ import annotations

import numpy as np

from .. import diffcore as dc
from ..gnn import Networks, model_forward, policy_forward, zero_hidden
from ..simworld import RobotSim, make_terrain
from ..simworld.constants import VMAX
from ..simworld.terrain import terrain_window
from .dataset import Trajectory, rollout_open_loop, spline_actions
from .episodes import PolicyController

TERRAIN_SEED_RANGE = 1000


def imagined_actions(nets: Networks, d, s0, heights, steps: int) -> np.ndarray:
    """Mean policy actions along a model rollout from ``s0``; (B, steps, J)."""
    n = s0.shape[0]
    J = d.n_joints
    s = s0.copy()
    h = zero_hidden(d, n, nets.cfg)
    out = np.empty((n, steps, J))
    with dc.no_tape():
        for t in range(steps):
            win = terrain_window(heights, s[:, 0], s[:, 1])
            body = s[:, [2, 5]]
            mu, _, h = policy_forward(nets.policy, d, body, s[:, 6:6 + J], s[:, 6 + J:6 + 2 * J],
                                      win, h)
            out[:, t] = mu.data
            s = model_forward(nets.model, d, s, mu.data, win).data
    return out


def _closed_loop(nets, d, sim, hfs, s0, seeds, steps):
    heights = np.stack([h.heights for h in hfs])
    env_idx = np.arange(len(hfs))
    ctrl = PolicyController(nets, d, seeds)
    s = s0.copy()
    S, A, S1, W, TQ = [], [], [], [], []
    for t in range(steps):
        a = ctrl(sim, s, heights, env_idx, t)
        W.append(terrain_window(heights, s[:, 0], s[:, 1]))
        nxt, tau, _ = sim.step(s, a, heights, env_idx)
        S.append(s)
        A.append(a)
        S1.append(nxt)
        TQ.append(tau)
        s = nxt
    return [np.stack(x, axis=1) for x in (S, A, S1, W, TQ)]


def collect_onpolicy(nets: Networks, designs, envs, curriculum, start_level: int, hp,
                     seed: int) -> dict[str, list[Trajectory]]:
    """Two trajectories per (design, env, level <= current).

    One follows the mean policy in the simulator. The other replays, open
    loop, the action sequence the policy produces on the learned model,
    perturbed by smooth spline noise. Nothing is truncated, so each design
    contributes exactly ``2 * rollout_steps`` transitions per cell.
    """
    out = {}
    for di, d in enumerate(designs):
        rng = np.random.default_rng([seed, di, 31])
        sim = RobotSim(d)
        cells = [(e, lvl) for e in envs for lvl in curriculum.level_range(d.name, start_level)]
        tseeds = rng.integers(0, TERRAIN_SEED_RANGE, len(cells))
        rseeds = rng.integers(0, 2**31, len(cells))
        hfs = [make_terrain(e, lvl, int(ts)) for (e, lvl), ts in zip(cells, tseeds)]
        s0 = np.stack([sim.reset(h, int(r)) for h, r in zip(hfs, rseeds)])
        S, A, S1, W, TQ = _closed_loop(nets, d, sim, hfs, s0, rseeds, hp.rollout_steps)
        trajs = [Trajectory(d.name, h.kind, h.level, S[i], A[i], S1[i], W[i], TQ[i])
                 for i, h in enumerate(hfs)]
        heights = np.stack([h.heights for h in hfs])
        plan = imagined_actions(nets, d, s0, heights, hp.rollout_steps)
        noise = spline_actions(rng, len(cells), hp.rollout_steps, d.n_joints,
                               scale=hp.onpolicy_noise)
        acts = np.clip(plan + noise, -VMAX, VMAX)
        for i, h in enumerate(hfs):
            trajs += rollout_open_loop(sim, h, s0[i:i + 1], acts[i:i + 1])
        out[d.name] = trajs
    return out

