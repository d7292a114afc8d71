"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` is opened with ``with Tape() as tape:``; every op whose
inputs include a tracked tensor (a parameter leaf or an earlier tape
result) appends one node to the active tape. Outside a tape all ops are
plain numpy evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .. import _env


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Node:
    op: str
    out: "Tensor"
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only op record. Backward walks it in reverse creation order."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def __len__(self):
        return len(self.nodes)


class no_tape:
    """Suspend recording (e.g. for validation rollouts inside a tape)."""

    def __enter__(self):
        self._saved = Tape._stack[:]
        Tape._stack.clear()

    def __exit__(self, *exc):
        Tape._stack[:] = self._saved
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def tracked_on(self, tape: Tape | None) -> bool:
        if tape is None:
            return False
        return self.requires_grad or (self.tape is tape and self.node_id is not None)

    def __repr__(self):
        tag = " grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, value: np.ndarray, parents: tuple, backward) -> Tensor:
    """Wrap an op result and record it if any parent is tracked."""
    if _env.DEBUG and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = False
    out.node_id = None
    out.tape = None
    out.name = None
    tape = Tape.current()
    if tape is not None and any(p.tracked_on(tape) for p in parents):
        out.tape = tape
        out.node_id = len(tape.nodes)
        tape.nodes.append(Node(op, out, parents, backward))
    return out


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.node_id is not None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def matmul(a, b) -> Tensor:
    """``(..., n) @ (n, m)``; the right operand is always a 2-D matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def back(g):
        # frozen operands (e.g. a fixed model during policy steps) need no gradient
        ga = g @ bd.T if _needs_grad(a) else None
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if _needs_grad(b) else None
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), back)


# ---------------------------------------------------------------------------
# elementwise unary


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    m = x.data > 0
    return _make("relu", np.where(m, x.data, 0.0), (x,), lambda g: (g * m,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    y = np.logaddexp(0.0, xd)
    return _make("softplus", y, (x,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * xd)),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if np.any(xd <= 0):
        raise NonFiniteError("log: non-positive input")
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input is interior."""
    x = as_tensor(x)
    m = (x.data >= lo) & (x.data <= hi)
    return _make("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * m,))


def detach(x) -> Tensor:
    """Same values, no tape history: the truncation boundary."""
    x = as_tensor(x)
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([shape[a] for a in axes])) if axes else 1

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make("reshape", y, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", old, shape) from None
    return _make("broadcast_to", y, (x,), lambda g: (_unbroadcast(g, old),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat", detail="no inputs")
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", *[t.shape for t in xs], detail=f"axis={axis}")
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make("concat", np.concatenate([x.data for x in xs], axis=ax), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=ax)))


def getitem(x, idx) -> Tensor:
    """Basic slicing (``x[:, 2:5]``) and integer-array indexing."""
    x = as_tensor(x)
    shape = x.shape
    try:
        y = x.data[idx]
    except IndexError:
        raise ShapeError("slice", shape, detail=f"index {idx!r}") from None

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        gx = np.zeros(shape)
        if basic:
            gx[idx] += g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make("slice", np.array(y, copy=True), (x,), back)


def take(x, idx, axis: int) -> Tensor:
    """Gather along one axis with an integer index array of any shape."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape
    ax = axis % x.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= shape[ax]):
        raise ShapeError("take", shape, idx.shape, detail="index out of range")
    y = np.take(x.data, idx, axis=ax)
    unique = np.unique(idx).size == idx.size

    def back(g):
        gx = np.zeros(shape)
        gm = np.moveaxis(gx, ax, 0)
        gi = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        if unique:
            gm[idx] = gi
        else:
            np.add.at(gm, idx, gi)
        return (gx,)

    return _make("take", y, (x,), back)


# ---------------------------------------------------------------------------
# convolution


def conv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """Valid 1-D cross-correlation.

    x: (N, C_in, L), w: (C_out, C_in, K), b: (C_out,) -> (N, C_out, L_out)
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1] or x.shape[2] < w.shape[2]:
        raise ShapeError("conv1d", x.shape, w.shape)
    n, cin, length = x.shape
    cout, _, k = w.shape
    lout = (length - k) // stride + 1
    xd, wd = x.data, w.data
    # (N, C_in, L_out, K) windows
    starts = np.arange(lout) * stride
    cols = xd[:, :, starts[:, None] + np.arange(k)[None, :]]
    y = np.einsum("nclk,ock->nol", cols, wd, optimize=True)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv1d", x.shape, w.shape, b.shape, detail="bias")
        y = y + b.data[None, :, None]
        parents = (x, w, b)

    def back(g):
        gw = np.einsum("nol,nclk->ock", g, cols, optimize=True)
        gcols = np.einsum("nol,ock->nclk", g, wd, optimize=True)
        gx = np.zeros_like(xd)
        for j in range(k):
            gx[:, :, starts + j] += gcols[:, :, :, j]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _make("conv1d", y, parents, back)


# ---------------------------------------------------------------------------
# composites


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def gru_cell(x, h, wx, wh, bx, bh) -> Tensor:
    """Gated recurrent update.

    wx: (in, 3H), wh: (H, 3H); gate order (reset, update, candidate).
    h' = (1 - z) * n + z * h
    """
    hdim = h.shape[-1]
    gx = linear(x, wx, bx)
    gh = linear(h, wh, bh)
    r = sigmoid(add(gx[..., :hdim], gh[..., :hdim]))
    z = sigmoid(add(gx[..., hdim:2 * hdim], gh[..., hdim:2 * hdim]))
    n = tanh(add(gx[..., 2 * hdim:], mul(r, gh[..., 2 * hdim:])))
    return add(mul(sub(1.0, z), n), mul(z, h))


_LOG2PI = float(np.log(2.0 * np.pi))


def gaussian_logpdf(x, mu, logvar) -> Tensor:
    """Elementwise log N(x; mu, exp(logvar))."""
    d = sub(x, mu)
    return mul(-0.5, add(add(mul(square(d), exp(mul(logvar, -1.0))), logvar), _LOG2PI))


def gaussian_sample(mu, logvar, noise) -> Tensor:
    """Reparameterised draw ``mu + exp(logvar / 2) * noise``."""
    return add(mu, mul(exp(mul(logvar, 0.5)), noise))


def gaussian_entropy(logvar) -> Tensor:
    return mul(0.5, add(logvar, 1.0 + _LOG2PI))


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor, leaves: dict | None = None) -> dict:
    """Reverse sweep from a scalar ``loss``.

    ``leaves`` maps names to leaf tensors (a :class:`ParamStore` works);
    the result maps each name to a gradient of the leaf's shape, zero for
    leaves the loss does not depend on.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    tape = loss.tape
    if tape is None or loss.node_id is None:
        raise ValueError("backward: loss is not connected to a tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    nodes = tape.nodes
    for i in range(loss.node_id, -1, -1):
        node = nodes[i]
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgs = node.backward(g)
        for p, pg in zip(node.parents, pgs):
            if pg is None or not p.tracked_on(tape):
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    if leaves is None:
        return grads
    items = leaves.items() if hasattr(leaves, "items") else leaves
    return {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in items}
