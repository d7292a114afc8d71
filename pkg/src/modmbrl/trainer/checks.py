"""End-to-end gradient check of the imagined-rollout loss."""

from __future__ import annotations

import numpy as np

from .. import diffcore as dc
from ..design import ModuleKind, build_design
from ..gnn import NetConfig, Networks
from ..simworld import RobotSim, make_terrain
from .policy_opt import RolloutNoise, imagine

DELTA_SCALE = 0.02


def two_limb_design():
    return build_design("two-limb", [(ModuleKind.LEG, -0.4), (ModuleKind.WHEEL, 0.4)])


def randomized_networks(cfg: NetConfig, seed: int = 0, scale: float = 0.1) -> Networks:
    """Networks whose zero-initialised output layers are filled with small noise.

    At initialisation the decoders output constants, so most parameter
    gradients would be trivially zero; this makes the check informative.
    """
    nets = Networks(cfg, seed)
    rng = np.random.default_rng([seed, 99])
    for name, t in nets.store.items():
        if t.requires_grad and not np.any(t.data):
            t.data = scale * rng.standard_normal(t.data.shape)
        elif name.startswith("model/scale/"):
            t.data = np.full(t.data.shape, DELTA_SCALE)
    return nets


def rollout_loss_fn(nets, d, T: int, batch: int, seed: int, beta: float = 1e-3):
    """Closure returning the policy loss of one fixed batch of imagined rollouts."""
    rng = np.random.default_rng([seed, 5])
    sim = RobotSim(d)
    hf = make_terrain("stairs", 3, seed)
    s0 = np.stack([sim.reset(hf, int(k), x0=float(rng.uniform(0, 2))) for k in range(batch)])
    h0 = 0.1 * rng.standard_normal((batch, d.n_nodes, nets.cfg.hidden))
    heights = np.repeat(hf.heights[None], batch, axis=0)
    noise = RolloutNoise.draw(rng, T, batch, d.n_joints)
    n_ent = batch * d.n_joints * T

    def loss():
        im = imagine(nets, d, s0, h0, heights, T, noise, train_stats=False)
        return dc.sub(dc.mul(dc.tsum(im.returns), -1.0 / batch), dc.mul(im.entropy, beta / n_ent))
    return loss


def rollout_gradcheck(T: int = 16, batch: int = 3, cfg: NetConfig | None = None,
                      per_param: int = 2, eps: float = 1e-5, seed: int = 0, design=None) -> float:
    """Max relative error over sampled policy coordinates of the full recurrent loss."""
    cfg = cfg or NetConfig(hidden=16, mlp=16)
    d = design or two_limb_design()
    nets = randomized_networks(cfg, seed)
    loss = rollout_loss_fn(nets, d, T, batch, seed)
    names = list(nets.store.trainable("policy/"))
    return dc.grad_check_store(loss, nets.store, eps=eps, names=names, max_per_param=per_param,
                               rng=np.random.default_rng([seed, 6]))
