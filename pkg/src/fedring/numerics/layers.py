"""Hand-derived reverse-mode layers and a sequential network.

Every layer implements ``forward(p, x) -> (y, cache)`` and
``backward(p, cache, gy) -> (gx, grads)`` where ``p`` and ``grads`` map the
layer's local parameter names to arrays. Computation runs in the dtype of
the parameters, so a float64 copy of a ParamVector gives a float64 pass.
"""

from __future__ import annotations

from math import prod, sqrt

import numpy as np

from .. import kernels
from .params import ParamVector, make_layout


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class Layer:
    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return []

    def fan_in(self) -> int:
        return 1

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, p, x):
        raise NotImplementedError

    def backward(self, p, cache, gy):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out

    def param_shapes(self):
        return [("weight", (self.n_in, self.n_out)), ("bias", (self.n_out,))]

    def fan_in(self):
        return self.n_in

    def output_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise ValueError(f"Dense expects ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def forward(self, p, x):
        return x @ p["weight"] + p["bias"], x

    def backward(self, p, x, gy):
        return gy @ p["weight"].T, {"weight": x.T @ gy, "bias": gy.sum(axis=0)}


class Conv3x3(Layer):
    """3x3 convolution, padding 1."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        self.c_in, self.c_out, self.stride = c_in, c_out, stride

    def param_shapes(self):
        return [("weight", (self.c_out, self.c_in, 3, 3)), ("bias", (self.c_out,))]

    def fan_in(self):
        return self.c_in * 9

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.c_in:
            raise ValueError(f"Conv3x3 expects {self.c_in} channels, got {c}")
        return (self.c_out, kernels.conv_out_size(h, self.stride), kernels.conv_out_size(w, self.stride))

    def forward(self, p, x):
        return kernels.conv3x3_forward(x, p["weight"], p["bias"], self.stride), x

    def backward(self, p, x, gy):
        gx, gw, gb = kernels.conv3x3_backward(x, p["weight"], gy, self.stride)
        return gx, {"weight": gw, "bias": gb}


class ReLU(Layer):
    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, gy):
        return gy * mask, {}


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.2):
        self.slope = slope

    def forward(self, p, x):
        scale = np.where(x > 0, 1.0, self.slope).astype(x.dtype)
        return x * scale, scale

    def backward(self, p, scale, gy):
        return gy * scale, {}


class Tanh(Layer):
    def forward(self, p, x):
        y = np.tanh(x)
        return y, y

    def backward(self, p, y, gy):
        return gy * (1 - y * y), {}


class Sigmoid(Layer):
    def forward(self, p, x):
        y = sigmoid(x)
        return y, y

    def backward(self, p, y, gy):
        return gy * y * (1 - y), {}


class Reshape(Layer):
    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)

    def output_shape(self, in_shape):
        if prod(in_shape) != prod(self.shape):
            raise ValueError(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def forward(self, p, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, p, in_shape, gy):
        return gy.reshape(in_shape), {}


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Network:
    """A sequential stack of layers over a flat ParamVector."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...]):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        shapes = []
        self._slots = []
        shape = self.input_shape
        for i, layer in enumerate(layers):
            names = []
            for name, pshape in layer.param_shapes():
                shapes.append((f"{i}.{name}", pshape))
                names.append(name)
            self._slots.append(names)
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self.layout = make_layout(shapes)
        self._offsets = {n: (off, pshape) for n, pshape, off in self.layout}

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> ParamVector:
        """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), for weights and biases."""
        params = ParamVector.zeros(self.layout, dtype)
        for i, layer in enumerate(self.layers):
            bound = 1.0 / sqrt(layer.fan_in())
            for name in self._slots[i]:
                view = params.view(f"{i}.{name}")
                view[...] = rng.uniform(-bound, bound, size=view.shape)
        return params

    def _local(self, params: ParamVector, i: int) -> dict[str, np.ndarray]:
        local = {}
        for name in self._slots[i]:
            off, shape = self._offsets[f"{i}.{name}"]
            local[name] = params.values[off:off + prod(shape)].reshape(shape)
        return local

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim < 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match {self.input_shape}")
        if x.shape[0] == 0:
            raise ValueError("empty batch")

    def forward(self, params: ParamVector, x: np.ndarray, keep: bool = True):
        if params.layout != self.layout:
            raise ValueError("parameter layout does not match network")
        self.check_input(x)
        x = np.asarray(x, dtype=params.values.dtype)
        caches = []
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(self._local(params, i), x)
            if keep:
                caches.append(cache)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("non-finite activations in forward pass")
        return x, caches

    def predict(self, params: ParamVector, x: np.ndarray) -> np.ndarray:
        return self.forward(params, x, keep=False)[0]

    def backward(self, params: ParamVector, caches, grad_out: np.ndarray, need_input_grad: bool = False):
        """Returns (flat gradient array, gradient w.r.t. the input or None)."""
        grad = np.zeros_like(params.values)
        g = np.asarray(grad_out, dtype=params.values.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g, local = layer.backward(self._local(params, i), caches[i], g)
            for name, value in local.items():
                off, _ = self._offsets[f"{i}.{name}"]
                grad[off:off + value.size] = value.reshape(-1)
            if i == 0 and not need_input_grad:
                g = None
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("non-finite gradient")
        return grad, g

