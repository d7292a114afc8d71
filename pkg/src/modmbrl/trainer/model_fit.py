"""Supervised fitting of the dynamics model and the torque estimator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import diffcore as dc
from ..design import DesignGraph
from ..gnn import Networks, model_forward, torque_forward
from .dataset import TrajectoryDataset, split_by_trajectory, stratified_batches

STD_FLOOR = 1e-4


class EmptyDatasetError(ValueError):
    pass


@dataclass
class FitResult:
    val_mse: float
    initial_val_mse: float
    train_curve: list = field(default_factory=list)
    diverged: bool = False
    n_train: int = 0
    n_val: int = 0


# -- normalisation statistics -------------------------------------------------

def _kind_columns(d: DesignGraph):
    """Joint indices of hips, knees and wheels in canonical order."""
    jk = d.joint_kinds()
    return np.flatnonzero(jk == 0), np.flatnonzero(jk == 1), np.flatnonzero(jk == 2)


def _raw_features(d, s, a):
    """Model input features before normalisation, pooled per kind."""
    J = d.n_joints
    q, qd, pend = s[:, 6:6 + J], s[:, 6 + J:6 + 2 * J], s[:, 6 + 2 * J:]
    hip, knee, wheel = _kind_columns(d)
    body = np.column_stack([s[:, 2:6], (a * a).mean(axis=1)])
    leg = np.stack([q[:, hip], q[:, knee], qd[:, hip], qd[:, knee],
                    pend[:, hip], pend[:, knee], a[:, hip], a[:, knee]], axis=-1).reshape(-1, 8)
    wh = np.stack([qd[:, wheel], pend[:, wheel], a[:, wheel]], axis=-1).reshape(-1, 3)
    return body, leg, wh


def _deltas(d, s, s1):
    J = d.n_joints
    dlt = s1 - s
    hip, knee, wheel = _kind_columns(d)
    dq, dqd = dlt[:, 6:6 + J], dlt[:, 6 + J:6 + 2 * J]
    leg = np.stack([dq[:, hip], dq[:, knee], dqd[:, hip], dqd[:, knee]], axis=-1).reshape(-1, 4)
    wh = np.stack([dq[:, wheel], dqd[:, wheel]], axis=-1).reshape(-1, 2)
    return dlt[:, :6], leg, wh


def _stats(chunks, width):
    rows = [c for c in chunks if c.size]
    if not rows:
        return np.zeros(width), np.ones(width)
    x = np.concatenate(rows)
    return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)


def fit_normalisers(nets: Networks, dataset: TrajectoryDataset, role: str, rows=None):
    """Set input mean/std and output scale buffers of ``role`` from data."""
    feats = {"body": [], "leg": [], "wheel": []}
    outs = {"body": [], "leg": [], "wheel": []}
    for key in dataset.keys():
        d = dataset.designs[key[0]]
        g = dataset.group(key)
        sel = slice(None) if rows is None else rows[key]
        s, a = g["s"][sel], g["a"][sel]
        for k, v in zip(("body", "leg", "wheel"), _raw_features(d, s, a)):
            feats[k].append(v)
        if role == "model":
            for k, v in zip(("body", "leg", "wheel"), _deltas(d, s, g["s_next"][sel])):
                outs[k].append(v)
        else:
            hip, knee, wheel = _kind_columns(d)
            tq = g["torque"][sel]
            outs["leg"].append(np.stack([tq[:, hip], tq[:, knee]], axis=-1).reshape(-1, 2))
            outs["wheel"].append(tq[:, wheel].reshape(-1, 1))
    st = nets.store
    for k, w in (("body", 5), ("leg", 8), ("wheel", 3)):
        mu, sd = _stats(feats[k], w)
        st[f"{role}/norm/{k}/mean"].data = mu
        st[f"{role}/norm/{k}/std"].data = sd
    widths = {"body": 6, "leg": 4, "wheel": 2} if role == "model" else {"leg": 2, "wheel": 1}
    for k, w in widths.items():
        _, sd = _stats(outs[k], w)
        st[f"{role}/scale/{k}"].data = sd


def _target_scale(nets, role, d):
    """Per-column scale of the regression target for design ``d``."""
    st = nets.store
    jk = d.joint_kinds()
    if role == "model":
        leg, wh = st["model/scale/leg"].data, st["model/scale/wheel"].data
        q = np.array([leg[0] if k == 0 else leg[1] if k == 1 else wh[0] for k in jk])
        qd = np.array([leg[2] if k == 0 else leg[3] if k == 1 else wh[1] for k in jk])
        return np.concatenate([st["model/scale/body"].data, q, qd])
    leg, wh = st["torque/scale/leg"].data, st["torque/scale/wheel"].data
    return np.array([leg[0] if k == 0 else leg[1] if k == 1 else wh[0] for k in jk])


# -- losses -------------------------------------------------------------------

def _sse(nets, role, d, s, a, target, window, train):
    """Sum of squared normalised errors for one design's rows."""
    scale = _target_scale(nets, role, d)
    if role == "model":
        pred = model_forward(nets.model, d, s, a, window, train=train)
        n = 6 + 2 * d.n_joints
        err = dc.div(dc.sub(pred[:, :n], target[:, :n]), scale)
    else:
        pred = torque_forward(nets.torque, d, s, a)
        err = dc.div(dc.sub(pred, target), scale)
    return dc.tsum(dc.square(err)), err.data.size


def _gather(dataset, key, idx, role):
    g = dataset.group(key)
    tgt = g["s_next"] if role == "model" else g["torque"]
    return g["s"][idx], g["a"][idx], tgt[idx], g["window"][idx]


def _by_design(parts):
    """Concatenate per-group row blocks that share a design."""
    out = {}
    for key, block in parts:
        out.setdefault(key[0], []).append(block)
    return {k: tuple(np.concatenate(x) for x in zip(*v)) for k, v in out.items()}


def evaluate_mse(nets, dataset, role, rows) -> float:
    """Normalised MSE over ``rows`` (group key -> index array); no tape."""
    parts = [(k, _gather(dataset, k, idx, role)) for k, idx in rows.items() if len(idx)]
    if not parts:
        return float("nan")
    total, count = 0.0, 0
    with dc.no_tape():
        for name, (s, a, tgt, w) in _by_design(parts).items():
            d = dataset.designs[name]
            for lo in range(0, len(s), 2048):
                sl = slice(lo, lo + 2048)
                v, n = _sse(nets, role, d, s[sl], a[sl], tgt[sl], w[sl], train=False)
                total += v.item()
                count += n
    return total / count


def _fit(nets: Networks, dataset: TrajectoryDataset, role: str, epochs: int, batch: int,
         lr: float, rng: np.random.Generator) -> FitResult:
    if len(dataset) == 0:
        raise EmptyDatasetError(f"cannot fit {role}: dataset is empty")
    train_rows, val_rows = {}, {}
    for key in dataset.keys():
        g = dataset.group(key)
        val = split_by_trajectory(g["traj"], rng)
        train_rows[key] = np.flatnonzero(~val)
        val_rows[key] = np.flatnonzero(val)
    fit_normalisers(nets, dataset, role, rows=train_rows)
    init = evaluate_mse(nets, dataset, role, val_rows)
    names = list(nets.store.trainable(role + "/"))
    leaves = {n: nets.store[n] for n in names}
    curve = []
    for _ in range(epochs):
        acc, cnt = 0.0, 0
        sizes = {k: len(v) for k, v in train_rows.items()}
        for sel in stratified_batches(sizes, batch, rng):
            parts = [(k, _gather(dataset, k, train_rows[k][i], role)) for k, i in sel.items()]
            blocks = _by_design(parts)
            n_total = sum(len(b[0]) for b in blocks.values()) * 1.0
            grads = None
            for name, (s, a, tgt, w) in blocks.items():
                d = dataset.designs[name]
                with dc.Tape():
                    sse, n = _sse(nets, role, d, s, a, tgt, w, train=True)
                    width = n / len(s)
                    loss = dc.div(sse, n_total * width)
                    g = dc.backward(loss, leaves)
                acc += sse.item()
                cnt += n
                grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
            dc.adam_step(nets.store, grads, lr, names=names, group=role)
        curve.append(acc / max(cnt, 1))
    final = evaluate_mse(nets, dataset, role, val_rows)
    return FitResult(final, init, curve, diverged=bool(final > 10 * init),
                     n_train=sum(len(v) for v in train_rows.values()),
                     n_val=sum(len(v) for v in val_rows.values()))


def train_model(nets: Networks, dataset: TrajectoryDataset, hp, rng) -> FitResult:
    """Fit ``model/`` on normalised state deltas; returns validation MSE."""
    return _fit(nets, dataset, "model", hp.model_epochs, hp.model_batch, hp.model_lr, rng)


def train_torque_estimator(nets: Networks, dataset: TrajectoryDataset, hp, rng) -> FitResult:
    """Fit ``torque/`` on the simulator torque proxy."""
    return _fit(nets, dataset, "torque", hp.torque_epochs, hp.model_batch, hp.torque_lr, rng)
