"""Synthetic linear dynamics for model-fitting checks."""

import numpy as np

from modmbrl.design import ModuleKind, build_design
from modmbrl.trainer.dataset import Trajectory, TrajectoryDataset
from modmbrl.simworld.constants import WIN_N
from modmbrl.simworld.terrain import TerrainKind


def linear_design():
    return build_design("linear-3l1w", [(ModuleKind.LEG, -0.45), (ModuleKind.LEG, -0.15),
                                         (ModuleKind.LEG, 0.15), (ModuleKind.WHEEL, 0.45)])


def linear_step(d, s, a):
    """s' = A s + B a on the 6 + 2J predicted coordinates; pending <- a."""
    J = d.n_joints
    q, qd = s[:, 6:6 + J], s[:, 6 + J:6 + 2 * J]
    out = s.copy()
    out[:, 0] += 0.05 * s[:, 3]
    out[:, 1] += 0.05 * s[:, 4]
    out[:, 2] += 0.05 * s[:, 5]
    out[:, 3] += -0.2 * s[:, 3] + 0.1 * a.mean(axis=1)
    out[:, 4] += -0.3 * s[:, 4] + 0.05 * s[:, 2]
    out[:, 5] += -0.1 * s[:, 5] - 0.1 * s[:, 2]
    out[:, 6:6 + J] = q + 0.05 * qd + 0.02 * a
    out[:, 6 + J:6 + 2 * J] = 0.5 * qd + 0.5 * a
    out[:, 6 + 2 * J:] = a
    return out


def make_dataset(n_traj=20, steps=100, noise=0.0, seed=0):
    """``noise`` is the target noise std as a fraction of each clean delta's std."""
    d = linear_design()
    rng = np.random.default_rng(seed)
    J, D = d.n_joints, d.state_dim
    ds = TrajectoryDataset()
    for _ in range(n_traj):
        s = rng.normal(0, 0.5, (steps, D))
        a = rng.normal(0, 2.0, (steps, J))
        s[:, 6 + 2 * J:] = rng.normal(0, 2.0, (steps, J))
        s1 = linear_step(d, s, a)
        sd = (s1 - s)[:, :6 + 2 * J].std(axis=0)
        s1[:, :6 + 2 * J] += noise * sd * rng.standard_normal((steps, 6 + 2 * J))
        win = np.full((steps, WIN_N), -0.25)
        ds.add(d, Trajectory(d.name, TerrainKind.FLAT, 0, s, a, s1, win, np.zeros((steps, J))))
    return d, ds


def least_squares_oracle(ds, train_rows, val_rows):
    """Unrestricted affine fit of the 6 + 2J coordinates; returns per-dim val residuals."""
    key = ds.keys()[0]
    g = ds.group(key)
    d = ds.designs[key[0]]
    n = 6 + 2 * d.n_joints

    def feats(idx):
        return np.column_stack([g["s"][idx], g["a"][idx], np.ones(len(idx))])
    tr, va = train_rows[key], val_rows[key]
    coef, *_ = np.linalg.lstsq(feats(tr), g["s_next"][tr, :n] - g["s"][tr, :n], rcond=None)
    pred = feats(va) @ coef
    return (g["s_next"][va, :n] - g["s"][va, :n]) - pred
