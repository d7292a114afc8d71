"""Reverse-mode autodiff on dense float64 tensors."""

from .gradcheck import grad_check, grad_check_store
from .params import ParamStore, adam_step, sgd_step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clamp,
    concat,
    conv1d,
    detach,
    div,
    exp,
    gaussian_entropy,
    gaussian_logpdf,
    gaussian_sample,
    getitem,
    gru_cell,
    linear,
    log,
    matmul,
    mean,
    mul,
    no_tape,
    relu,
    reshape,
    sigmoid,
    softplus,
    square,
    sub,
    take,
    tanh,
    transpose,
    tsum,
)

__all__ = [n for n in dir() if not n.startswith("_")]
