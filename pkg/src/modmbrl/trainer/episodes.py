"""Simulator episodes driven by the learned policy or the tripod baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..design import DesignGraph
from ..gnn import Networks, policy_forward, zero_hidden
from ..simworld import RobotSim, make_terrain, tripod_baseline
from ..simworld.constants import EPISODE_STEPS, SIGMA_ANGLE, SIGMA_HEIGHT, SIGMA_RATE, WIN_N
from ..simworld.sim import X, Z
from ..simworld.terrain import flat_window


@dataclass
class EpisodeBatch:
    distance: np.ndarray   # (E,) final x - initial x, frozen at failure
    failed: np.ndarray     # (E,) bool
    states: np.ndarray     # (E, steps + 1, D) with rows held after failure
    actions: np.ndarray    # (E, steps, J)
    n_steps: np.ndarray    # (E,) control steps taken, including the failing one


def blind_window(heights, x, z) -> np.ndarray:
    """Spoofed window: flat ground at the height below the body."""
    return flat_window(heights, x, z)


class NoiseStreams:
    """One generator per episode so results do not depend on batch composition."""

    def __init__(self, seeds, tag: int = 7):
        self.rngs = [np.random.default_rng([int(s), tag]) for s in seeds]

    def draw(self, J: int):
        out = [np.concatenate([r.standard_normal(2) * [SIGMA_ANGLE, SIGMA_RATE],
                               SIGMA_ANGLE * r.standard_normal(J),
                               SIGMA_RATE * r.standard_normal(J),
                               SIGMA_HEIGHT * r.standard_normal(WIN_N)]) for r in self.rngs]
        out = np.stack(out)
        return out[:, :2], out[:, 2:2 + J], out[:, 2 + J:2 + 2 * J], out[:, 2 + 2 * J:]


class PolicyController:
    """Recurrent policy acting on (optionally blindfolded) noisy observations."""

    def __init__(self, nets: Networks, d: DesignGraph, seeds, blind: bool = False,
                 noise: bool = True):
        self.nets, self.d, self.blind = nets, d, blind
        self.noise = NoiseStreams(seeds) if noise else None
        self.h = zero_hidden(d, len(seeds), nets.cfg).data

    def __call__(self, sim: RobotSim, s, heights, env_idx, t):
        obs = sim.observe(s, heights, env_idx=env_idx)
        win = blind_window(heights[env_idx], s[:, X], s[:, Z]) if self.blind else obs.terrain
        body, q, qd = obs.body, obs.q, obs.qd
        if self.noise is not None:
            nb, nq, nqd, nw = self.noise.draw(self.d.n_joints)
            body, q, qd, win = body + nb, q + nq, qd + nqd, win + nw
        with dc.no_tape():
            mu, _, h = policy_forward(self.nets.policy, self.d, body, q, qd, win,
                                      dc.Tensor(self.h))
        self.h = h.data
        return mu.data


class BaselineController:
    def __init__(self, feature_height: float):
        self.feature_height = feature_height

    def __call__(self, sim, s, heights, env_idx, t):
        return tripod_baseline(sim, s, t, self.feature_height)


def run_episodes(d: DesignGraph, kind, level: int, seeds, controller_factory,
                 steps: int = EPISODE_STEPS, x0: float = 0.0) -> EpisodeBatch:
    """Batched episodes; episode ``i`` uses terrain and reset seed ``seeds[i]``.

    A row stops moving at its first failure flag; its distance is the
    progress made up to that point.
    """
    seeds = [int(s) for s in seeds]
    sim = RobotSim(d)
    hfs = [make_terrain(kind, level, s) for s in seeds]
    heights = np.stack([h.heights for h in hfs])
    env_idx = np.arange(len(seeds))
    s = np.stack([sim.reset(h, sd, x0=x0) for h, sd in zip(hfs, seeds)])
    ctrl = controller_factory(seeds, hfs[0].feature_height)
    alive = np.ones(len(seeds), dtype=bool)
    n_steps = np.full(len(seeds), steps)
    S, A = [s], []
    for t in range(steps):
        a = ctrl(sim, s, heights, env_idx, t)
        nxt, _, fail = sim.step(s, a, heights, env_idx)
        nxt[~alive] = s[~alive]
        newly = alive & fail.astype(bool)
        n_steps[newly] = t + 1
        alive &= ~newly
        s = nxt
        S.append(s)
        A.append(a)
    S = np.stack(S, axis=1)
    return EpisodeBatch(S[:, -1, X] - S[:, 0, X], ~alive, S, np.stack(A, axis=1), n_steps)


def policy_episodes(nets, d, kind, level, seeds, blind=False, steps=EPISODE_STEPS):
    return run_episodes(d, kind, level, seeds,
                        lambda sd, fh: PolicyController(nets, d, sd, blind=blind), steps)


def baseline_episodes(d, kind, level, seeds, steps=EPISODE_STEPS):
    return run_episodes(d, kind, level, seeds, lambda sd, fh: BaselineController(fh), steps)
