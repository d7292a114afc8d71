"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor, backward


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, indices=None) -> float:
    """Max over components of ``|analytic - fd| / max(1, |fd|)``.

    ``f`` maps a leaf tensor to a scalar tensor. ``indices`` optionally
    restricts the check to a subset of flat positions of ``x``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape():
        y = f(leaf)
        analytic = backward(y, {"x": leaf})["x"].reshape(-1)
    flat = x0.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        fd = _central(lambda v: f(Tensor(v)).item(), flat, i, eps, x0.shape)
        err = abs(analytic[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


def grad_check_store(loss_fn: Callable[[], Tensor], store, eps: float = 1e-5,
                     names=None, max_per_param: int | None = None, rng=None) -> float:
    """Same measure over parameters of a :class:`ParamStore`.

    ``loss_fn`` reads the store's current values; each coordinate is
    perturbed in place and restored afterwards.
    """
    with Tape():
        loss = loss_fn()
        grads = backward(loss, store)
    worst = 0.0
    for name in names or store.names():
        t = store[name]
        base = t.data
        n = base.size
        if max_per_param is not None and n > max_per_param:
            rng = rng or np.random.default_rng(0)
            sel = np.sort(rng.choice(n, max_per_param, replace=False))
        else:
            sel = range(n)
        g = grads[name].reshape(-1)
        for i in sel:
            def ev(v, t=t):
                t.data = v
                try:
                    return loss_fn().item()
                finally:
                    t.data = base
            fd = _central(ev, base.reshape(-1), i, eps, base.shape)
            worst = max(worst, abs(g[i] - fd) / max(1.0, abs(fd)))
    return worst


def _central(ev, flat, i, eps, shape) -> float:
    xp = flat.copy()
    xp[i] += eps
    xm = flat.copy()
    xm[i] -= eps
    fp = ev(xp.reshape(shape))
    fm = ev(xm.reshape(shape))
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NonFiniteError(f"non-finite value at perturbed point {i}")
    return (fp - fm) / (2.0 * eps)
