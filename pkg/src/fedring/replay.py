"""Experience-replay fine-tuning on local data plus a received buffer."""

from __future__ import annotations

import numpy as np

from .models import ModelSpec
from .numerics import AdamState, ParamVector, adam_update_, forward_backward, seeded_rng
from .pp_gan import Buffer


class ProtocolError(ValueError):
    """A received model does not match the local model spec."""


def replay_grads(spec: ModelSpec, params: ParamVector, local_x, local_y, buf_x=None, buf_y=None,
                 task_loss: str = "cross_entropy") -> tuple[float, np.ndarray]:
    if spec.kind != "classifier":
        raise ValueError("replay training needs a classifier")
    if len(local_x) == 0:
        raise ValueError("empty local batch")
    net = spec.network
    loss, grad = forward_backward(net, params, local_x, local_y, task_loss)
    g = grad.values
    if buf_x is not None and len(buf_x):
        loss_b, grad_b = forward_backward(net, params, buf_x, buf_y, task_loss)
        loss += loss_b
        g = g + grad_b.values
    return loss, g


def replay_loss(spec: ModelSpec, params: ParamVector, local_x, local_y, buf_x=None, buf_y=None,
                task_loss: str = "cross_entropy") -> float:
    """Mean task loss on the local batch plus mean task loss on the buffer batch."""
    return replay_grads(spec, params, local_x, local_y, buf_x, buf_y, task_loss)[0]


def _flip(x: np.ndarray, rng) -> np.ndarray:
    mask = rng.random(len(x)) < 0.5
    if not mask.any():
        return x
    x = x.copy()
    x[mask] = x[mask][..., ::-1]
    return x


def local_round_update(spec: ModelSpec, model_in: ParamVector, x: np.ndarray, y: np.ndarray,
                       buffer: Buffer | None, epochs: int, batch_size: int = 32, lr: float = 1e-4,
                       seed: int = 0, keys: tuple[int, ...] = (), augment: bool = False) -> ParamVector:
    """Fine-tune a received model for ``epochs`` passes over the local data.

    Each step pairs a local minibatch with a buffer minibatch of size
    min(local batch, |buffer|) drawn uniformly with replacement. Local order,
    buffer draws and flips use separate streams, so the local schedule does
    not depend on the buffer. Adam starts fresh every call.
    """
    if model_in.layout != spec.layout:
        raise ProtocolError("received model is not exchange-compatible with the local spec")
    params = model_in.copy()
    if epochs <= 0:
        return params
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("empty local dataset")
    order_rng = seeded_rng(seed, "local", *keys)
    buf_rng = seeded_rng(seed, "replay-buffer", *keys)
    aug_rng = seeded_rng(seed, "augment", *keys)
    flip = augment and x.ndim == 4
    state = AdamState.for_params(params, lr=lr)
    has_buffer = buffer is not None and buffer.size > 0
    for _ in range(epochs):
        order = order_rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            bx, by = x[idx], y[idx]
            if flip:
                bx = _flip(bx, aug_rng)
            rx = ry = None
            if has_buffer:
                k = min(len(idx), buffer.size)
                bidx = buf_rng.integers(buffer.size, size=k)
                rx, ry = buffer.x[bidx], buffer.y[bidx]
            _, grad = replay_grads(spec, params, bx, by, rx, ry)
            adam_update_(params.values, grad, state)
    return params
