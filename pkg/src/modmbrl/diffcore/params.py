"""Parameter storage, SGD/Adam updates and snapshot/restore."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered name -> leaf tensor map with optimiser state and a snapshot stack.

    Entries added with ``trainable=False`` are buffers (e.g. running
    statistics): saved, checksummed and snapshotted like parameters but
    never updated by an optimiser step.
    """

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.momentum: dict[str, np.ndarray] = {}
        self.adam: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.adam_t: dict[str, int] = {}
        self._snapshots: list[tuple] = []

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def trainable(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: t for k, t in self._params.items() if t.requires_grad and k.startswith(prefix)}

    @contextmanager
    def frozen(self, prefix: str = ""):
        """Temporarily stop tracking gradients for trainable entries under ``prefix``."""
        hit = [t for k, t in self._params.items() if t.requires_grad and k.startswith(prefix)]
        for t in hit:
            t.requires_grad = False
        try:
            yield
        finally:
            for t in hit:
                t.requires_grad = True

    def count_trainable(self, prefix: str = "") -> int:
        return int(sum(t.data.size for t in self.trainable(prefix).values()))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, values: dict[str, np.ndarray], strict: bool = True):
        for k, t in self._params.items():
            if k not in values:
                if strict:
                    raise KeyError(f"missing parameter {k!r}")
                continue
            v = np.asarray(values[k], dtype=np.float64)
            if v.shape != t.data.shape:
                raise ValueError(f"{k}: expected shape {t.data.shape}, found {v.shape}")
            t.data = v.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self._params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- reversion -----------------------------------------------------
    def snapshot(self):
        """Push a copy of all values and optimiser state."""
        self._snapshots.append((self.state(), _copy_opt(self.momentum, self.adam), dict(self.adam_t)))

    def restore(self, pop: bool = False):
        """Reset values and optimiser state to the most recent snapshot."""
        if not self._snapshots:
            raise RuntimeError("restore without snapshot")
        vals, (mom, adam), t_adam = self._snapshots.pop() if pop else self._snapshots[-1]
        for k, t in self._params.items():
            t.data = vals[k].copy()
        self.momentum, self.adam = _copy_opt(mom, adam)
        self.adam_t = dict(t_adam)

    def drop_snapshots(self):
        self._snapshots.clear()


def _copy_opt(mom, adam):
    return ({k: v.copy() for k, v in mom.items()},
            {k: (m.copy(), v.copy()) for k, (m, v) in adam.items()})


def _checked(store, grads, name, t):
    if name not in grads:
        raise KeyError(f"missing gradient for {name!r}")
    g = np.asarray(grads[name], dtype=np.float64)
    if g.shape != t.data.shape:
        raise ValueError(f"{name}: gradient shape {g.shape} != {t.data.shape}")
    return g


def sgd_step(store: ParamStore, grads: dict, lr: float, momentum: float = 0.0):
    """``v <- momentum * v + g``; ``w <- w - lr * v``.

    With ``momentum == 0`` this is plain descent.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, t in store.trainable().items():
        g = _checked(store, grads, name, t)
        if momentum:
            v = store.momentum.get(name)
            v = g.copy() if v is None else momentum * v + g
            store.momentum[name] = v
        else:
            v = g
        if lr:
            t.data = t.data - lr * v


def adam_step(store: ParamStore, grads: dict, lr: float, names=None, group: str = "",
              betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = None) -> float:
    """Bias-corrected Adam on the trainable entries listed in ``names``.

    ``group`` keys the step counter so independent optimisers can share a
    store. ``clip`` rescales the joint gradient to at most that global
    norm. Returns the gradient norm before clipping.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    names = list(store.trainable()) if names is None else list(names)
    gs = [_checked(store, grads, n, store[n]) for n in names]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in gs)))
    if clip is not None and norm > clip:
        gs = [g * (clip / norm) for g in gs]
    b1, b2 = betas
    step = store.adam_t.get(group, 0) + 1
    store.adam_t[group] = step
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for n, g in zip(names, gs):
        m, v = store.adam.get(n, (np.zeros_like(g), np.zeros_like(g)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        store.adam[n] = (m, v)
        if lr:
            t = store[n]
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return norm
