"""Op-level central-difference suite shared by the tests and the CLI."""

from __future__ import annotations

import zlib

import numpy as np

from .. import diffcore as dc

POINTS = 10
TOLERANCE = 1e-5


def op_cases() -> dict:
    """Scalar test functions of a 4-vector, one per differentiable op.

    Ops are looked up on the package at call time so a patched op is what
    gets checked.
    """
    rng = np.random.default_rng(5)
    W = rng.normal(size=(4, 3))
    K = rng.normal(size=(2, 1, 3))
    other = rng.normal(size=(4,))
    return {
        "add": lambda x: dc.tsum(dc.square(dc.add(x, other))),
        "sub": lambda x: dc.tsum(dc.square(dc.sub(other, x))),
        "mul": lambda x: dc.tsum(dc.mul(x, dc.tanh(x))),
        "div": lambda x: dc.tsum(dc.div(x, dc.add(dc.square(x), 1.0))),
        "matmul": lambda x: dc.tsum(dc.tanh(dc.matmul(dc.reshape(x, (1, 4)), W))),
        "tanh": lambda x: dc.tsum(dc.tanh(x)),
        "sigmoid": lambda x: dc.tsum(dc.sigmoid(x)),
        "relu": lambda x: dc.tsum(dc.mul(dc.relu(x), x)),
        "softplus": lambda x: dc.tsum(dc.softplus(x)),
        "exp": lambda x: dc.tsum(dc.exp(x)),
        "log": lambda x: dc.tsum(dc.log(dc.add(dc.square(x), 0.5))),
        "mean": lambda x: dc.mean(dc.square(x)),
        "concat": lambda x: dc.tsum(dc.square(dc.concat([x, dc.tanh(x)], axis=0))),
        "slice": lambda x: dc.tsum(dc.square(x[1:3])),
        "take": lambda x: dc.tsum(dc.square(dc.take(x, [[0, 3], [3, 1]], axis=0))),
        "conv1d": lambda x: dc.tsum(dc.square(dc.conv1d(dc.reshape(x, (1, 1, 4)), K, stride=1))),
        "gru": lambda x: dc.tsum(dc.gru_cell(dc.reshape(x, (1, 4)), dc.Tensor(np.tanh(other[None, :2])),
                                             dc.Tensor(np.resize(W, (4, 6))), dc.Tensor(np.resize(W, (2, 6))),
                                             dc.Tensor(np.zeros(6)), dc.Tensor(np.zeros(6)))),
        "gauss_logpdf_mean": lambda x: dc.tsum(dc.gaussian_logpdf(dc.Tensor(other), x,
                                                                  dc.Tensor(np.full(4, -0.3)))),
        "gauss_logpdf_logvar": lambda x: dc.tsum(dc.gaussian_logpdf(dc.Tensor(other),
                                                                    dc.Tensor(np.zeros(4)), x)),
        "gauss_entropy": lambda x: dc.tsum(dc.mul(dc.gaussian_entropy(x), x)),
        "gauss_sample": lambda x: dc.tsum(dc.square(dc.gaussian_sample(x, dc.tanh(x), dc.Tensor(other)))),
        "clamp": lambda x: dc.tsum(dc.square(dc.clamp(x, -5.0, 5.0))),
        "broadcast": lambda x: dc.tsum(dc.square(dc.broadcast_to(x, (3, 4)))),
        "transpose": lambda x: dc.tsum(dc.mul(dc.transpose(dc.reshape(x, (2, 2)), (1, 0)),
                                              dc.Tensor(W[:2, :2]))),
    }


def check_op(name: str, points: int = POINTS, eps: float = 1e-5) -> float:
    """Worst relative error of one op over ``points`` seeded random inputs."""
    f = op_cases()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(points):
        x = rng.normal(size=4)
        if name == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
        worst = max(worst, dc.grad_check(f, x, eps=eps))
    return worst


def run_op_suite(points: int = POINTS, eps: float = 1e-5) -> dict[str, float]:
    return {name: check_op(name, points, eps) for name in sorted(op_cases())}
