"""Deterministic numeric substrate: layers, gradients, Adam, keyed RNG."""

import numpy as np

from .adam import AdamState, adam_step, adam_update_
from .layers import (
    Conv3x3,
    Dense,
    LeakyReLU,
    Network,
    NonFiniteError,
    ReLU,
    Reshape,
    Sigmoid,
    Tanh,
)
from .losses import P_MIN, clamped_probability, softmax, softmax_cross_entropy
from .params import ParamVector, make_layout
from .rng import seeded_rng

LOSS_KINDS = ("cross_entropy", "mse")


def forward_backward(net: Network, params: ParamVector, batch, targets, loss: str = "cross_entropy"):
    """Loss value and parameter gradient for one batch.

    ``cross_entropy`` expects integer class targets; ``mse`` expects targets of
    the network's output shape.
    """
    batch = np.asarray(batch)
    targets = np.asarray(targets)
    if batch.shape[0] == 0 or batch.shape[0] != targets.shape[0]:
        raise ValueError(f"batch size {batch.shape[0]} does not match targets {targets.shape[0]}")
    out, caches = net.forward(params, batch)
    if loss == "cross_entropy":
        value, g = softmax_cross_entropy(out, targets)
    elif loss == "mse":
        diff = out - targets.astype(out.dtype)
        value = float(np.mean(diff * diff, dtype=np.float64))
        g = 2 * diff / diff.size
    else:
        raise ValueError(f"unknown loss kind {loss!r}")
    if not np.isfinite(value):
        raise NonFiniteError("non-finite loss")
    grad, _ = net.backward(params, caches, g)
    return value, params.with_values(grad)


__all__ = [
    "AdamState",
    "Conv3x3",
    "Dense",
    "LOSS_KINDS",
    "LeakyReLU",
    "Network",
    "NonFiniteError",
    "P_MIN",
    "ParamVector",
    "ReLU",
    "Reshape",
    "Sigmoid",
    "Tanh",
    "adam_step",
    "adam_update_",
    "clamped_probability",
    "forward_backward",
    "make_layout",
    "seeded_rng",
    "softmax",
    "softmax_cross_entropy",
]
