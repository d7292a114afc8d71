"""Policy optimisation through differentiable imagined rollouts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import diffcore as dc
from ..design import DesignGraph, nominal_stance
from ..gnn import Networks, model_forward, policy_forward
from ..simworld import RobotSim
from ..simworld.constants import (SIGMA_ANGLE, SIGMA_HEIGHT, SIGMA_RATE, TORQUE_GAIN, TRACK_AVG,
                                  VMAX, W_EFFORT, W_PITCH, W_STANCE, WIN_N)
from ..simworld.terrain import TerrainKind, ground_height, make_terrain, terrain_window

TERRAIN_SEEDS = 8


class PolicyPhaseAbort(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# start states


@dataclass
class Entry:
    design: DesignGraph
    env: TerrainKind
    level: int
    heights: np.ndarray
    state: np.ndarray
    hidden: np.ndarray


class TerrainCache:
    def __init__(self):
        self._hf = {}

    def get(self, kind, level, seed):
        key = (kind, int(level), int(seed))
        if key not in self._hf:
            self._hf[key] = make_terrain(kind, level, seed)
        return self._hf[key]


def sample_entries(designs, envs, levels: dict, start_level: int, n: int, hidden: int,
                   rng: np.random.Generator, x0_spread: float, cache: TerrainCache | None = None):
    """``n`` reset states spread over (design, env, level <= current)."""
    cache = cache or TerrainCache()
    combos = [(d, e, lvl) for d in designs for e in envs
              for lvl in range(min(start_level, levels[d.name]), levels[d.name] + 1)]
    order = [combos[i % len(combos)] for i in range(n)]
    perm = rng.permutation(len(order))
    out = []
    for i in perm:
        d, e, lvl = order[i]
        hf = cache.get(e, lvl, rng.integers(TERRAIN_SEEDS))
        x0 = float(rng.uniform(0.0, x0_spread))
        s = RobotSim(d).reset(hf, int(rng.integers(2**31)), x0=x0)
        out.append(Entry(d, e, lvl, hf.heights, s, np.zeros((d.n_nodes, hidden))))
    return out


class ImaginationBuffer:
    """Fixed-size set of rollout start points; the second half is rewritten each step."""

    def __init__(self, entries: list[Entry]):
        if len(entries) % 2:
            raise ValueError("buffer size must be even")
        self.entries = entries
        self.half = len(entries) // 2
        self.last_written: set[int] = set()

    def __len__(self):
        return len(self.entries)

    def groups(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, e in enumerate(self.entries):
            out.setdefault(e.design.name, []).append(i)
        return out

    def stack(self, idx):
        es = [self.entries[i] for i in idx]
        return (es[0].design, np.stack([e.state for e in es]), np.stack([e.hidden for e in es]),
                np.stack([e.heights for e in es]))

    def reseed_first_half(self, entries: list[Entry]):
        if len(entries) != self.half:
            raise ValueError("need exactly half a buffer of entries")
        self.entries[:self.half] = entries

    def overwrite(self, slots, states, hidden):
        """Replace second-half slots with detached midpoint states and hidden vectors."""
        for i, s, h in zip(slots, states, hidden):
            if i < self.half:
                raise IndexError("first half of the buffer is read-only within a phase")
            e = self.entries[i]
            self.entries[i] = Entry(e.design, e.env, e.level, e.heights,
                                    np.array(s, copy=True), np.array(h, copy=True))
            self.last_written.add(i)


def make_buffer(designs, envs, levels, start_level, n_batch, hidden, rng, x0_spread, cache=None):
    return ImaginationBuffer(sample_entries(designs, envs, levels, start_level, n_batch, hidden,
                                            rng, x0_spread, cache))


# ---------------------------------------------------------------------------
# imagined rollouts


@dataclass
class RolloutNoise:
    body: np.ndarray     # (T, n, 2)
    q: np.ndarray        # (T, n, J)
    qd: np.ndarray       # (T, n, J)
    window: np.ndarray   # (T, n, 21)
    action: np.ndarray   # (T, n, J)

    @classmethod
    def draw(cls, rng, T, n, J):
        return cls(rng.standard_normal((T, n, 2)) * np.array([SIGMA_ANGLE, SIGMA_RATE]),
                   SIGMA_ANGLE * rng.standard_normal((T, n, J)),
                   SIGMA_RATE * rng.standard_normal((T, n, J)),
                   SIGMA_HEIGHT * rng.standard_normal((T, n, WIN_N)),
                   rng.standard_normal((T, n, J)))


@dataclass
class Imagined:
    returns: dc.Tensor        # (n,) summed reward
    entropy: dc.Tensor        # scalar, summed over steps, rows and joints
    n_entropy: int
    mid_state: np.ndarray
    mid_hidden: np.ndarray
    actions: np.ndarray       # (n, T, J)
    log_var: float


def imagined_reward(d: DesignGraph, s: dc.Tensor, ns: dc.Tensor) -> dc.Tensor:
    """Reward on model states; effort uses the tracking-error torque proxy."""
    J = d.n_joints
    qn, mask = nominal_stance(d)
    tau = dc.mul(dc.sub(s[:, 6 + 2 * J:6 + 3 * J], s[:, 6 + J:6 + 2 * J]), TORQUE_GAIN * TRACK_AVG)
    dev = dc.mul(dc.sub(ns[:, 6:6 + J], qn), mask.astype(np.float64))
    r = dc.sub(ns[:, 0], s[:, 0])
    r = dc.sub(r, dc.mul(dc.square(ns[:, 2]), W_PITCH))
    r = dc.sub(r, dc.mul(dc.tsum(dc.square(tau), axis=1), W_EFFORT))
    return dc.sub(r, dc.mul(dc.tsum(dc.square(dev), axis=1), W_STANCE))


def imagine(nets: Networks, d: DesignGraph, s0, h0, heights, T: int,
            noise: RolloutNoise | None = None, train_stats: bool = False,
            reward_fn: Callable | None = None, blind: bool = False) -> Imagined:
    """Roll policy and model ``T`` steps; differentiable on the active tape.

    ``noise=None`` gives the deterministic variant (means, clean sensing).
    Terrain heights are looked up at the detached model x; the gradient
    still flows through body z in the relative window.
    """
    reward_fn = reward_fn or imagined_reward
    n, J = s0.shape[0], d.n_joints
    s = dc.as_tensor(s0)
    h = dc.as_tensor(h0)
    returns = ent = None
    mid = None
    acts = []
    lv_acc = 0.0
    for t in range(T):
        base = terrain_window(heights, s.data[:, 0], np.zeros(n))
        win = dc.sub(base, dc.reshape(s[:, 1], (n, 1)))
        body = dc.concat([s[:, 2:3], s[:, 5:6]], axis=1)
        q, qd = s[:, 6:6 + J], s[:, 6 + J:6 + 2 * J]
        obs_win = win
        if blind:
            flat = np.repeat(ground_height(heights, s.data[:, 0])[:, None], WIN_N, axis=1)
            obs_win = dc.sub(flat, dc.reshape(s[:, 1], (n, 1)))
        if noise is not None:
            body = dc.add(body, noise.body[t])
            q = dc.add(q, noise.q[t])
            qd = dc.add(qd, noise.qd[t])
            obs_win = dc.add(obs_win, noise.window[t])
        mu, lv, h = policy_forward(nets.policy, d, body, q, qd, obs_win, h, train=train_stats)
        if noise is None:
            a = mu
        else:
            a = dc.clamp(dc.gaussian_sample(mu, lv, noise.action[t]), -VMAX, VMAX)
        ns = model_forward(nets.model, d, s, a, win, train=False)
        r = reward_fn(d, s, ns)
        e = dc.tsum(dc.gaussian_entropy(lv))
        returns = r if returns is None else dc.add(returns, r)
        ent = e if ent is None else dc.add(ent, e)
        acts.append(a.data)
        lv_acc += float(lv.data.mean())
        if t == T // 2 - 1:
            mid = (ns.data.copy(), h.data.copy())
        s = ns
    return Imagined(returns, ent, n * J * T, mid[0], mid[1], np.stack(acts, axis=1), lv_acc / T)


# ---------------------------------------------------------------------------
# validation and learning-rate control


class ValidationSet:
    """Held-out start states scored by deterministic imagined rollouts."""

    def __init__(self, entries: list[Entry]):
        self.groups: dict[str, tuple] = {}
        by: dict[str, list[Entry]] = {}
        for e in entries:
            by.setdefault(e.design.name, []).append(e)
        for name, es in by.items():
            self.groups[name] = (es[0].design, np.stack([e.state for e in es]),
                                 np.stack([e.hidden for e in es]),
                                 np.stack([e.heights for e in es]))
        self.size = len(entries)

    def score(self, nets: Networks, T: int, reward_fn=None) -> float:
        total = 0.0
        with dc.no_tape():
            for d, s, h, hts in self.groups.values():
                im = imagine(nets, d, s, h, hts, T, noise=None, reward_fn=reward_fn)
                total += float(im.returns.data.sum())
        return total / self.size


@dataclass
class LRState:
    lr: float
    initial: float | None = None
    history: list = field(default_factory=list)
    reverts: int = 0


def adapt_lr(state: LRState, reward: float, store) -> str:
    """Revert to the last snapshot and halve the rate if reward fell below the phase start."""
    state.history.append(reward)
    if state.initial is None:
        state.initial = reward
        store.drop_snapshots()
        store.snapshot()
        return "init"
    if reward < state.initial:
        store.restore()
        state.lr *= 0.5
        state.reverts += 1
        return "revert"
    store.drop_snapshots()
    store.snapshot()
    return "accept"


# ---------------------------------------------------------------------------


@dataclass
class PolicyResult:
    losses: list
    val_rewards: list
    lr: float
    reverts: int
    aborted: str | None = None
    log_vars: list = field(default_factory=list)


def policy_loss_and_grads(nets, buffer: ImaginationBuffer, T: int, beta: float, rng,
                          train_stats=True, reward_fn=None, names=None):
    """Summed imagined-return loss over the buffer, with gradients per design group."""
    names = names or list(nets.store.trainable("policy/"))
    leaves = {k: nets.store[k] for k in names}
    groups = buffer.groups()
    n_total = len(buffer)
    sizes = {g: len(ix) * buffer.entries[ix[0]].design.n_joints for g, ix in groups.items()}
    n_ent = sum(sizes.values()) * T
    grads, loss_val, mids, lvs = None, 0.0, [], []
    for gname in sorted(groups):
        idx = groups[gname]
        d, s, h, hts = buffer.stack(idx)
        noise = RolloutNoise.draw(rng, T, len(idx), d.n_joints)
        with dc.Tape():
            im = imagine(nets, d, s, h, hts, T, noise, train_stats, reward_fn)
            loss = dc.sub(dc.mul(dc.tsum(im.returns), -1.0 / n_total),
                          dc.mul(im.entropy, beta / n_ent))
            g = dc.backward(loss, leaves)
        loss_val += loss.item()
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
        mids.append((idx, im.mid_state, im.mid_hidden))
        lvs.append(im.log_var)
    return loss_val, grads, mids, float(np.mean(lvs))


def optimize_policy(nets: Networks, buffer: ImaginationBuffer, val: ValidationSet, hp, rng,
                    lr_state: LRState | None = None, reward_fn=None, log=None) -> PolicyResult:
    """K Adam steps on policy parameters against the frozen model."""
    lr_state = lr_state or LRState(hp.policy_lr)
    store = nets.store
    names = list(store.trainable("policy/"))
    check_every = max(1, hp.K // 10)
    losses, val_rewards, lvs = [], [], []
    aborted = None
    with store.frozen("model/"), store.frozen("torque/"):
        v0 = val.score(nets, hp.T, reward_fn)
        adapt_lr(lr_state, v0, store)
        val_rewards.append(v0)
        if log:
            log(f"phase=policy step=0 val_reward={v0:.5f} decision=init lr={lr_state.lr:.3g}")
        for k in range(hp.K):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads, mids, lv = policy_loss_and_grads(
                        nets, buffer, hp.T, hp.entropy_coef, rng, True, reward_fn, names)
                finite = np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())
            except dc.NonFiniteError:
                finite = False
            if not finite:
                store.restore()
                lr_state.lr *= 0.5
                lr_state.reverts += 1
                if log:
                    log(f"phase=policy step={k} event=nonfinite lr={lr_state.lr:.3g}")
            else:
                dc.adam_step(store, grads, lr_state.lr, names=names, group="policy",
                             clip=hp.grad_clip)
                buffer.last_written = set()
                for idx, ms, mh in mids:
                    second = [j for j, i in enumerate(idx) if i >= buffer.half]
                    buffer.overwrite([idx[j] for j in second], ms[second], mh[second])
                losses.append(loss)
                lvs.append(lv)
            if (k + 1) % check_every == 0 or k == hp.K - 1:
                v = val.score(nets, hp.T, reward_fn)
                decision = adapt_lr(lr_state, v, store)
                val_rewards.append(v if decision != "revert" else lr_state.initial)
                if log:
                    log(f"phase=policy step={k + 1} val_reward={v:.5f} decision={decision} "
                        f"lr={lr_state.lr:.3g}")
            if lr_state.lr < hp.min_lr:
                store.restore()
                aborted = f"learning rate {lr_state.lr:.3g} below {hp.min_lr:g} at step {k + 1}"
                break
    return PolicyResult(losses, val_rewards, lr_state.lr, lr_state.reverts, aborted, lvs)
