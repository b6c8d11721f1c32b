"""LPIPS-style perceptual distance over a fixed, seeded feature extractor.

The extractor is an untrained three-stage network (3x3 convs for images,
dense layers for vectors). At each stage the channel vector at every
spatial position is unit-normalized; the distance is the spatial mean of
the squared difference summed over channels, averaged over stages with
equal weights. Its range is therefore [0, 4].
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .numerics import Conv3x3, Dense, LeakyReLU, seeded_rng

KINDS = ("feature_lpips_like", "pixel_l2")
NORM_EPS = 1e-10


@dataclass(frozen=True)
class PerceptualDistance:
    input_shape: tuple[int, ...]
    kind: str = "feature_lpips_like"
    seed: int = 0
    layer_weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perceptual distance kind {self.kind!r}")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    @cached_property
    def _stages(self):
        rng = seeded_rng(self.seed, "perceptual")
        if len(self.input_shape) == 3:
            c = self.input_shape[0]
            dims = [(c, 8, 1), (8, 16, 2), (16, 32, 2)]
            layers = [Conv3x3(a, b, s) for a, b, s in dims]
            fans = [a * 9 for a, _, _ in dims]
        else:
            (d,) = self.input_shape
            dims = [(d, 16), (16, 32), (32, 32)]
            layers = [Dense(a, b) for a, b in dims]
            fans = [a for a, _ in dims]
        stages = []
        for layer, fan in zip(layers, fans):
            params = {}
            for name, shape in layer.param_shapes():
                if name == "weight":
                    params[name] = rng.normal(0.0, np.sqrt(2.0 / fan), size=shape)
                else:
                    params[name] = rng.normal(0.0, 0.5 if len(self.input_shape) == 1 else 0.1, size=shape)
            stages.append((layer, params))
        return stages

    def _params(self, i: int, dtype):
        layer, params = self._stages[i]
        return layer, {k: v.astype(dtype, copy=False) for k, v in params.items()}

    # features ------------------------------------------------------------

    def _forward(self, x: np.ndarray):
        """Normalized per-stage features shaped (N, C, S) and backward caches."""
        x = np.asarray(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"sample shape {x.shape[1:]} != {self.input_shape}")
        act = LeakyReLU(0.2)
        feats, caches = [], []
        h = x
        for i in range(len(self._stages)):
            layer, p = self._params(i, x.dtype)
            pre, lcache = layer.forward(p, h)
            h, acache = act.forward(None, pre)
            f = h.reshape(h.shape[0], h.shape[1], -1)
            norm = np.sqrt((f * f).sum(axis=1, keepdims=True) + NORM_EPS)
            fn = f / norm
            feats.append(fn)
            caches.append((layer, p, lcache, acache, fn, norm, h.shape))
        return feats, caches

    def _backward(self, caches, grads):
        """Input gradient given dL/d(normalized features) per stage."""
        act = LeakyReLU(0.2)
        g_h = None
        for i in range(len(caches) - 1, -1, -1):
            layer, p, lcache, acache, fn, norm, hshape = caches[i]
            g = grads[i]
            g_f = (g - fn * (fn * g).sum(axis=1, keepdims=True)) / norm
            g_f = g_f.reshape(hshape)
            g_h = g_f if g_h is None else g_h + g_f
            g_pre, _ = act.backward(None, acache, g_h)
            g_h, _ = layer.backward(p, lcache, g_pre)
        return g_h

    def features(self, x: np.ndarray) -> list[np.ndarray]:
        return self._forward(x)[0]

    # distances -----------------------------------------------------------

    def _weights(self):
        total = float(sum(self.layer_weights))
        return [float(w) / total for w in self.layer_weights]

    def paired(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """d(a_i, b_i) for aligned batches."""
        a, b = np.asarray(a), np.asarray(b)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
        if self.kind == "pixel_l2":
            diff = (a - b).reshape(len(a), -1).astype(np.float64)
            return (diff * diff).mean(axis=1)
        fa, fb = self.features(a), self.features(b)
        out = np.zeros(len(a))
        for w, u, v in zip(self._weights(), fa, fb):
            diff = (u - v).astype(np.float64)
            out += w * (diff * diff).sum(axis=1).mean(axis=1)
        return out

    def distance(self, x1: np.ndarray, x2: np.ndarray) -> float:
        x1, x2 = np.asarray(x1), np.asarray(x2)
        if x1.shape != x2.shape:
            raise ValueError(f"shape mismatch {x1.shape} vs {x2.shape}")
        d = self.paired(x1[None], x2[None])[0]
        return float(max(d, 0.0))

    def pairwise(self, xr: np.ndarray, xs: np.ndarray) -> np.ndarray:
        """Matrix of d(xr_i, xs_j)."""
        xr, xs = np.asarray(xr), np.asarray(xs)
        if self.kind == "pixel_l2":
            a = xr.reshape(len(xr), -1).astype(np.float64)
            b = xs.reshape(len(xs), -1).astype(np.float64)
            diff = b[None, :, :] - a[:, None, :]
            return (diff * diff).mean(axis=2)
        out = np.zeros((len(xr), len(xs)))
        for w, u, v in zip(self._weights(), self.features(xr), self.features(xs)):
            v64 = v.astype(np.float64)
            for i in range(len(u)):
                diff = v64 - u[i].astype(np.float64)
                out[i] += w * (diff * diff).sum(axis=1).mean(axis=1)
        return out

    def paired_and_grad(self, target: np.ndarray, x: np.ndarray, target_features=None) -> tuple[np.ndarray, np.ndarray]:
        """Per-pair distances d(target_i, x_i) and d(sum)/dx.

        ``target_features`` may carry precomputed ``features(target)`` when the
        same target is reused across many calls.
        """
        if self.kind == "pixel_l2":
            diff = x - target
            n = diff[0].size
            return (diff * diff).reshape(len(x), -1).mean(axis=1), 2 * diff / n
        ft = target_features if target_features is not None else self.features(target.astype(x.dtype))
        fx, caches = self._forward(x)
        d = np.zeros(len(x))
        grads = []
        for w, u, v in zip(self._weights(), ft, fx):
            s = u.shape[2]
            diff = v - u
            d += w * (diff * diff).sum(axis=1).mean(axis=1)
            grads.append((2 * w / s) * diff)
        return d, self._backward(caches, grads)

    def pairwise_sum_and_grad(self, xr: np.ndarray, xs: np.ndarray) -> tuple[float, np.ndarray]:
        """sum_{r,s} d(xr_r, xs_s) and its gradient w.r.t. xs (xr held fixed)."""
        nr = len(xr)
        if self.kind == "pixel_l2":
            a = xr.reshape(nr, -1)
            b = xs.reshape(len(xs), -1)
            total = float(_sqdist(a.astype(np.float64), b.astype(np.float64)).sum()) / a.shape[1]
            grad = 2 * (nr * b - a.sum(axis=0, keepdims=True)) / a.shape[1]
            return total, grad.reshape(xs.shape).astype(xs.dtype)
        fr = self.features(xr.astype(xs.dtype))
        fs, caches = self._forward(xs)
        total = 0.0
        grads = []
        for w, u, v in zip(self._weights(), fr, fs):
            s = u.shape[2]
            u2 = u.reshape(nr, -1).astype(np.float64)
            v2 = v.reshape(len(v), -1).astype(np.float64)
            total += w * float(_sqdist(u2, v2).sum()) / s
            grads.append((2 * w / s) * (nr * v - u.sum(axis=0, keepdims=True)))
        return total, self._backward(caches, grads)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2 * a @ b.T, 0.0)
