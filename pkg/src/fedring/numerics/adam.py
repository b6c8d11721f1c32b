from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .params import ParamVector


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamVector, **hyper) -> AdamState:
        return cls(np.zeros_like(params.values), np.zeros_like(params.values), **hyper)

    def copy(self) -> AdamState:
        return replace(self, m=self.m.copy(), v=self.v.copy())


def adam_update_(values: np.ndarray, grad: np.ndarray, state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``values`` and ``state``."""
    if values.shape != grad.shape or state.m.shape != values.shape:
        raise ValueError(f"length mismatch: params {values.size}, grad {grad.size}, state {state.m.size}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * (grad * grad)
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    m_hat = state.m / c1
    v_hat = state.v / c2
    values -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(values.dtype)


def adam_step(params: ParamVector, grad: ParamVector, state: AdamState) -> tuple[ParamVector, AdamState]:
    """Pure Adam step: returns updated copies, inputs untouched."""
    if params.layout != grad.layout:
        raise ValueError("parameter and gradient layouts differ")
    new_params = params.copy()
    new_state = state.copy()
    adam_update_(new_params.values, grad.values, new_state)
    return new_params, new_state
