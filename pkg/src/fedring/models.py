"""Model zoo: classifier, conditional generator, conditional discriminator.

Label conditioning is one-hot concatenation at the input: along the feature
axis for vector data, as constant channel planes for images.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from math import prod

import numpy as np

from .numerics import (
    Conv3x3,
    Dense,
    LeakyReLU,
    Network,
    ParamVector,
    ReLU,
    Reshape,
    Tanh,
    clamped_probability,
    seeded_rng,
)
from .numerics.layers import sigmoid

KINDS = ("classifier", "generator", "discriminator")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple[int, ...]
    num_classes: int = 2
    latent_dim: int = 16
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def is_image(self) -> bool:
        return len(self.input_shape) == 3

    @property
    def network(self) -> Network:
        return build_network(self)

    @property
    def layout(self):
        return self.network.layout

    def init_params(self, seed: int, *keys: int) -> ParamVector:
        return self.network.init_params(seeded_rng(seed, f"init/{self.kind}", *keys))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> ModelSpec:
        d = json.loads(text)
        return cls(d["kind"], tuple(d["input_shape"]), d["num_classes"], d["latent_dim"], tuple(d["hidden"]))


def classifier_spec(sample_shape, num_classes: int = 2) -> ModelSpec:
    hidden = (8, 16) if len(sample_shape) == 3 else (64, 64)
    return ModelSpec("classifier", tuple(sample_shape), num_classes, hidden=hidden)


def generator_spec(sample_shape, num_classes: int = 2, latent_dim: int = 16) -> ModelSpec:
    hidden = (128, 256) if len(sample_shape) == 3 else (64, 64)
    return ModelSpec("generator", tuple(sample_shape), num_classes, latent_dim, hidden)


def discriminator_spec(sample_shape, num_classes: int = 2) -> ModelSpec:
    hidden = (8, 16) if len(sample_shape) == 3 else (64, 64)
    return ModelSpec("discriminator", tuple(sample_shape), num_classes, hidden=hidden)


@lru_cache(maxsize=None)
def build_network(spec: ModelSpec) -> Network:
    c = spec.num_classes
    h = spec.hidden
    if spec.kind == "generator":
        out = prod(spec.input_shape)
        layers = [Dense(spec.latent_dim + c, h[0]), LeakyReLU()]
        for a, b in zip(h, h[1:]):
            layers += [Dense(a, b), LeakyReLU()]
        layers.append(Dense(h[-1], out))
        if spec.is_image:
            layers += [Tanh(), Reshape(spec.input_shape)]
        return Network(layers, (spec.latent_dim + c,))

    n_out = c if spec.kind == "classifier" else 1
    act = ReLU if spec.kind == "classifier" else LeakyReLU
    if spec.is_image:
        ch, hh, ww = spec.input_shape
        ch_in = ch if spec.kind == "classifier" else ch + c
        layers = [Conv3x3(ch_in, h[0], 2), act(), Conv3x3(h[0], h[1], 2), act()]
        flat = h[1] * ((hh + 3) // 4) * ((ww + 3) // 4)
        layers += [Reshape((flat,)), Dense(flat, n_out)]
        return Network(layers, (ch_in, hh, ww))
    (d,) = spec.input_shape
    d_in = d if spec.kind == "classifier" else d + c
    layers = [Dense(d_in, h[0]), act()]
    for a, b in zip(h, h[1:]):
        layers += [Dense(a, b), act()]
    layers.append(Dense(h[-1], n_out))
    return Network(layers, (d_in,))


def one_hot(y, num_classes: int, dtype=np.float32) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError("label out of range")
    out = np.zeros((y.size, num_classes), dtype=dtype)
    out[np.arange(y.size), y] = 1
    return out


def condition(spec: ModelSpec, x: np.ndarray, y, dtype=np.float32) -> np.ndarray:
    """Concatenate one-hot labels to generator latents or discriminator inputs."""
    x = np.asarray(x, dtype=dtype)
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
    oh = one_hot(y, spec.num_classes, dtype)
    if x.ndim == 4:
        planes = np.broadcast_to(oh[:, :, None, None], (x.shape[0], spec.num_classes) + x.shape[2:])
        return np.concatenate([x, planes], axis=1)
    return np.concatenate([x, oh], axis=1)


def strip_condition(spec: ModelSpec, grad_in: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the unconditioned input (drops the label slots)."""
    return grad_in[:, :-spec.num_classes]


def _expect(spec: ModelSpec, kind: str) -> None:
    if spec.kind != kind:
        raise ValueError(f"expected a {kind} spec, got {spec.kind}")


def classifier_forward(spec: ModelSpec, params: ParamVector, batch) -> np.ndarray:
    _expect(spec, "classifier")
    return spec.network.predict(params, np.asarray(batch))


def generator_forward(spec: ModelSpec, params: ParamVector, z, y) -> np.ndarray:
    _expect(spec, "generator")
    z = np.atleast_2d(np.asarray(z))
    if z.shape[1] != spec.latent_dim:
        raise ValueError(f"latent length {z.shape[1]} != {spec.latent_dim}")
    y = np.atleast_1d(y)
    return spec.network.predict(params, condition(spec, z, y, params.values.dtype))


def discriminator_logits(spec: ModelSpec, params: ParamVector, x, y) -> np.ndarray:
    _expect(spec, "discriminator")
    x = np.asarray(x)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"sample shape {x.shape[1:]} != {spec.input_shape}")
    return spec.network.predict(params, condition(spec, x, y, params.values.dtype))[:, 0]


def discriminator_forward(spec: ModelSpec, params: ParamVector, x, y) -> np.ndarray:
    """P(real | x, y), clamped into [1e-7, 1 - 1e-7]."""
    return clamped_probability(sigmoid(discriminator_logits(spec, params, x, y)))[0]


def predict_labels(spec: ModelSpec, params: ParamVector, x, batch_size: int = 1024) -> np.ndarray:
    out = [classifier_forward(spec, params, x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
