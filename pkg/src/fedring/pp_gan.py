"""Conditional GAN training with a privacy-preserving penalty, and buffers.

Phase 1 trains the generator and discriminator with the usual adversarial
objectives. Phase 2 keeps training but additionally rewards the generator
for keeping its samples perceptually far from real training samples: the
generator minimizes ``loss_generator - lambda_pp * loss_privacy``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .models import (
    ModelSpec,
    condition,
    discriminator_spec,
    generator_forward,
    generator_spec,
    strip_condition,
)
from .numerics import AdamState, NonFiniteError, ParamVector, adam_update_, clamped_probability, seeded_rng
from .numerics.layers import sigmoid
from .perceptual import PerceptualDistance

log = logging.getLogger(__name__)

GENERATOR_LOSSES = ("as_written", "nonsaturating_log")


class ModeCollapseError(RuntimeError):
    pass


@dataclass
class GanTrainConfig:
    phase1_iters: int = 20_000
    phase2_iters: int = 5_000
    batch_size: int = 32
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_pp: float = 0.1
    generator_loss: str = "as_written"
    latent_dim: int = 16
    log_every: int = 100
    collapse_window: int = 500
    collapse_check_every: int = 50
    collapse_var: float = 1e-6

    def __post_init__(self):
        if self.lambda_pp < 0:
            raise ValueError("lambda_pp must be >= 0")
        if self.generator_loss not in GENERATOR_LOSSES:
            raise ValueError(f"generator_loss must be one of {GENERATOR_LOSSES}")
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ValueError("iteration counts must be >= 0")

    @property
    def total_iters(self) -> int:
        return self.phase1_iters + self.phase2_iters


@dataclass(eq=False)
class Buffer:
    x: np.ndarray
    y: np.ndarray
    origin_node: int = 0

    @property
    def size(self) -> int:
        return int(len(self.y))

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Buffer):
            return NotImplemented
        return (
            self.origin_node == other.origin_node
            and self.x.shape == other.x.shape
            and self.x.astype(np.float32).tobytes() == other.x.astype(np.float32).tobytes()
            and np.array_equal(self.y, other.y)
        )

    @classmethod
    def empty(cls, sample_shape, origin_node: int = 0) -> Buffer:
        return cls(np.zeros((0,) + tuple(sample_shape), np.float32), np.zeros(0, np.int64), origin_node)


# losses -------------------------------------------------------------------


def discriminator_loss_from_probs(p_real, p_fake) -> float:
    """-mean log D(x, y) - mean log(1 - D(G(z, y), y)) on clamped probabilities."""
    pr = clamped_probability(np.asarray(p_real, dtype=np.float64))[0]
    pf = clamped_probability(np.asarray(p_fake, dtype=np.float64))[0]
    value = -np.mean(np.log(pr)) - np.mean(np.log1p(-pf))
    if not np.isfinite(value):
        raise NonFiniteError("non-finite discriminator loss")
    return float(value)


def generator_loss_from_probs(p_fake, kind: str = "as_written") -> float:
    """-mean D(G(z, y), y); the nonsaturating option uses -mean log D instead."""
    pf = clamped_probability(np.asarray(p_fake, dtype=np.float64))[0]
    value = -np.mean(pf) if kind == "as_written" else -np.mean(np.log(pf))
    if not np.isfinite(value):
        raise NonFiniteError("non-finite generator loss")
    return float(value)


def _d_probs(d_spec, d_params, x, y):
    logits, caches = d_spec.network.forward(d_params, condition(d_spec, x, y, d_params.values.dtype))
    p, active = clamped_probability(sigmoid(logits[:, 0]))
    return p, active, caches


def _generate(g_spec, g_params, z, y):
    return g_spec.network.forward(g_params, condition(g_spec, z, y, g_params.values.dtype))


def loss_discriminator(d_spec: ModelSpec, d_params: ParamVector, g_spec: ModelSpec, g_params: ParamVector,
                       real_batch, labels, z_batch, fake_labels=None) -> float:
    real_batch, z_batch = np.asarray(real_batch), np.asarray(z_batch)
    if len(real_batch) != len(z_batch):
        raise ValueError("real and latent batches must have equal size")
    fake_labels = labels if fake_labels is None else fake_labels
    fake = _generate(g_spec, g_params, z_batch, fake_labels)[0]
    pr = _d_probs(d_spec, d_params, real_batch, labels)[0]
    pf = _d_probs(d_spec, d_params, fake, fake_labels)[0]
    return discriminator_loss_from_probs(pr, pf)


def loss_generator(d_spec: ModelSpec, d_params: ParamVector, g_spec: ModelSpec, g_params: ParamVector,
                   z_batch, labels, kind: str = "as_written") -> float:
    fake = _generate(g_spec, g_params, np.asarray(z_batch), labels)[0]
    return generator_loss_from_probs(_d_probs(d_spec, d_params, fake, labels)[0], kind)


def loss_privacy(real_batch, synth_batch, dist: PerceptualDistance) -> float:
    """(1/b) * sum over all real/synthetic pairs of d(x_r, x_s); labels play no part."""
    real_batch, synth_batch = np.asarray(real_batch), np.asarray(synth_batch)
    if len(real_batch) != len(synth_batch):
        raise ValueError(f"batch sizes differ: {len(real_batch)} vs {len(synth_batch)}")
    b = len(real_batch)
    return float(dist.pairwise(real_batch, synth_batch).sum() / b)


def privacy_term_and_grad(real_batch, synth_batch, dist: PerceptualDistance) -> tuple[float, np.ndarray]:
    """loss_privacy and its gradient w.r.t. the synthetic batch."""
    b = len(real_batch)
    if len(synth_batch) != b:
        raise ValueError(f"batch sizes differ: {b} vs {len(synth_batch)}")
    total, grad = dist.pairwise_sum_and_grad(real_batch, synth_batch)
    return total / b, grad / b


# gradients ------------------------------------------------------------------


def discriminator_grads(d_spec, d_params, real, real_y, fake, fake_y) -> tuple[float, np.ndarray]:
    """Eq.-1 loss and gradient w.r.t. discriminator parameters."""
    x = np.concatenate([real, fake])
    y = np.concatenate([real_y, fake_y])
    p, active, caches = _d_probs(d_spec, d_params, x, y)
    n_r, n_f = len(real), len(fake)
    pr, pf = p[:n_r], p[n_r:]
    loss = discriminator_loss_from_probs(pr, pf)
    g = np.empty_like(p)
    g[:n_r] = -(1 - pr) / n_r
    g[n_r:] = pf / n_f
    g *= active
    grad, _ = d_spec.network.backward(d_params, caches, g[:, None])
    return loss, grad


def generator_grads(g_spec, g_params, d_spec, d_params, z, y, kind="as_written", pp=None):
    """Generator loss, its parameter gradient, and the privacy term if requested.

    ``pp`` is (real_batch, dist, lambda_pp); the returned objective gradient
    is that of ``L_G - lambda_pp * L_PP``.
    """
    fake, g_caches = _generate(g_spec, g_params, z, y)
    p, active, d_caches = _d_probs(d_spec, d_params, fake, y)
    b = len(z)
    loss_g = generator_loss_from_probs(p, kind)
    if kind == "as_written":
        g_logit = -p * (1 - p) / b
    else:
        g_logit = -(1 - p) / b
    g_logit = (g_logit * active)[:, None].astype(d_params.values.dtype)
    _, g_in = d_spec.network.backward(d_params, d_caches, g_logit, need_input_grad=True)
    g_fake = strip_condition(d_spec, g_in)
    loss_pp = None
    if pp is not None:
        real, dist, lam = pp
        loss_pp, g_pp = privacy_term_and_grad(real, fake, dist)
        g_fake = g_fake - lam * g_pp.astype(g_fake.dtype)
    grad, _ = g_spec.network.backward(g_params, g_caches, g_fake)
    return loss_g, loss_pp, grad


# training ---------------------------------------------------------------------


@dataclass
class GanState:
    """Everything needed to resume training at ``iteration``."""

    g_spec: ModelSpec
    d_spec: ModelSpec
    g_params: ParamVector
    d_params: ParamVector
    g_opt: AdamState
    d_opt: AdamState
    iteration: int = 0
    seed: int = 0

    def copy(self) -> GanState:
        return GanState(self.g_spec, self.d_spec, self.g_params.copy(), self.d_params.copy(),
                        self.g_opt.copy(), self.d_opt.copy(), self.iteration, self.seed)


@dataclass
class GanResult:
    state: GanState
    log: list[dict] = field(default_factory=list)
    pp_calls: int = 0
    phase1: GanState | None = None

    @property
    def g_params(self) -> ParamVector:
        return self.state.g_params

    @property
    def d_params(self) -> ParamVector:
        return self.state.d_params

    @property
    def g_spec(self) -> ModelSpec:
        return self.state.g_spec


def init_gan_state(sample_shape, num_classes: int, config: GanTrainConfig, seed: int) -> GanState:
    g_spec = generator_spec(sample_shape, num_classes, config.latent_dim)
    d_spec = discriminator_spec(sample_shape, num_classes)
    g = g_spec.init_params(seed)
    d = d_spec.init_params(seed)
    hyper = dict(beta1=config.beta1, beta2=config.beta2)
    return GanState(g_spec, d_spec, g, d, AdamState.for_params(g, lr=config.lr_g, **hyper),
                    AdamState.for_params(d, lr=config.lr_d, **hyper), 0, seed)


def train_gan(x: np.ndarray, y: np.ndarray, config: GanTrainConfig, seed: int, num_classes: int = 2,
              dist: PerceptualDistance | None = None, resume: GanState | None = None,
              stop_at: int | None = None) -> GanResult:
    """Two-phase conditional GAN training on one node's data.

    Every iteration draws from its own keyed stream, so resuming from a saved
    state reproduces an uninterrupted run exactly. ``stop_at`` ends training
    early at a global iteration (used to produce phase checkpoints).
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if len(np.unique(y)) < num_classes:
        raise ValueError("every class must be present in the GAN training data")
    state = resume.copy() if resume is not None else init_gan_state(x.shape[1:], num_classes, config, seed)
    seed = state.seed
    dist = dist or PerceptualDistance(x.shape[1:])
    total = config.total_iters if stop_at is None else min(stop_at, config.total_iters)
    b = config.batch_size
    latent = state.g_spec.latent_dim
    probe_rng = seeded_rng(seed, "gan-probe")
    probe_z = probe_rng.standard_normal((64, latent)).astype(np.float32)
    probe_y = np.arange(64) % num_classes
    result = GanResult(state)
    low_var = 0
    acc = {"loss_d": 0.0, "loss_g": 0.0, "loss_pp": 0.0, "n": 0, "n_pp": 0}
    while state.iteration < total:
        it = state.iteration
        rng = seeded_rng(seed, "gan", it)
        idx = rng.integers(len(x), size=b)
        z = rng.standard_normal((b, latent)).astype(np.float32)
        y_fake = rng.integers(num_classes, size=b)
        fake = _generate(state.g_spec, state.g_params, z, y_fake)[0]
        loss_d, grad_d = discriminator_grads(state.d_spec, state.d_params, x[idx], y[idx], fake, y_fake)
        adam_update_(state.d_params.values, grad_d, state.d_opt)

        z2 = rng.standard_normal((b, latent)).astype(np.float32)
        y2 = rng.integers(num_classes, size=b)
        pp = None
        if it >= config.phase1_iters and config.lambda_pp > 0:
            pp_idx = rng.integers(len(x), size=b)
            pp = (x[pp_idx], dist, config.lambda_pp)
            result.pp_calls += 1
        loss_g, loss_pp, grad_g = generator_grads(state.g_spec, state.g_params, state.d_spec, state.d_params,
                                                  z2, y2, config.generator_loss, pp)
        adam_update_(state.g_params.values, grad_g, state.g_opt)
        state.iteration += 1

        acc["loss_d"] += loss_d
        acc["loss_g"] += loss_g
        acc["n"] += 1
        if loss_pp is not None:
            acc["loss_pp"] += loss_pp
            acc["n_pp"] += 1
        if state.iteration % config.log_every == 0 or state.iteration == total:
            result.log.append({
                "iter": state.iteration,
                "loss_d": acc["loss_d"] / acc["n"],
                "loss_g": acc["loss_g"] / acc["n"],
                "loss_pp": acc["loss_pp"] / acc["n_pp"] if acc["n_pp"] else None,
            })
            acc = {"loss_d": 0.0, "loss_g": 0.0, "loss_pp": 0.0, "n": 0, "n_pp": 0}

        if state.iteration % config.collapse_check_every == 0:
            out = state.g_spec.network.predict(state.g_params, condition(state.g_spec, probe_z, probe_y))
            var = float(out.reshape(len(out), -1).var(axis=0).mean())
            low_var = low_var + config.collapse_check_every if var < config.collapse_var else 0
            if low_var >= config.collapse_window:
                raise ModeCollapseError(
                    f"generator output variance {var:.3g} below {config.collapse_var} for "
                    f"{low_var} iterations (at iteration {state.iteration})"
                )
        if state.iteration == config.phase1_iters and config.phase2_iters > 0:
            result.phase1 = state.copy()
    return result


def sample_buffer(g_spec: ModelSpec, g_params: ParamVector, size: int, class_balance: bool = True,
                  seed: int = 0, origin_node: int = 0, *keys: int) -> Buffer:
    """Draw ``size`` labeled synthetic samples from a generator.

    Labels come first (an even split when ``class_balance``), then z ~ N(0, I).
    """
    if size < 0:
        raise ValueError("buffer size must be >= 0")
    sample_shape = g_spec.input_shape
    if size == 0:
        return Buffer.empty(sample_shape, origin_node)
    rng = seeded_rng(seed, "buffer", origin_node, *keys)
    c = g_spec.num_classes
    if class_balance:
        y = rng.permutation(np.arange(size) % c)
    else:
        y = rng.integers(c, size=size)
    z = rng.standard_normal((size, g_spec.latent_dim)).astype(np.float32)
    chunks = [generator_forward(g_spec, g_params, z[i:i + 1024], y[i:i + 1024]) for i in range(0, size, 1024)]
    return Buffer(np.concatenate(chunks).astype(np.float32), y.astype(np.int64), origin_node)


# checkpoints and logs -------------------------------------------------------

CKPT_MAGIC = b"FDGC"
CKPT_VERSION = 1


def dumps_gan_state(state: GanState, extra: dict | None = None) -> bytes:
    from .transport.wire import encode_params

    meta = {
        "g_spec": json.loads(state.g_spec.to_json()),
        "d_spec": json.loads(state.d_spec.to_json()),
        "iteration": state.iteration,
        "seed": state.seed,
        "g_opt": {k: v for k, v in asdict(state.g_opt).items() if k not in ("m", "v")},
        "d_opt": {k: v for k, v in asdict(state.d_opt).items() if k not in ("m", "v")},
        "extra": extra or {},
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    blobs = [state.g_params, state.d_params,
             state.g_params.with_values(state.g_opt.m), state.g_params.with_values(state.g_opt.v),
             state.d_params.with_values(state.d_opt.m), state.d_params.with_values(state.d_opt.v)]
    body = CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(meta_raw)) + meta_raw
    body += b"".join(encode_params(p) for p in blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def loads_gan_state(data: bytes) -> tuple[GanState, dict]:
    from .transport.wire import Reader, WireError, decode_params

    if len(data) < 13 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise WireError("checkpoint checksum mismatch")
    r = Reader(data[:-4])
    if r.take(4) != CKPT_MAGIC:
        raise WireError("not a GAN checkpoint")
    version, meta_len = r.unpack("<BI")
    if version != CKPT_VERSION:
        raise WireError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(meta_len))
    g, d, gm, gv, dm, dv = (decode_params(r) for _ in range(6))
    g_spec = ModelSpec.from_json(json.dumps(meta["g_spec"]))
    d_spec = ModelSpec.from_json(json.dumps(meta["d_spec"]))
    state = GanState(g_spec, d_spec, ParamVector(g.values, g_spec.layout), ParamVector(d.values, d_spec.layout),
                     AdamState(gm.values, gv.values, **meta["g_opt"]), AdamState(dm.values, dv.values, **meta["d_opt"]),
                     meta["iteration"], meta["seed"])
    return state, meta["extra"]


def save_gan_state(state: GanState, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps_gan_state(state, extra))


def load_gan_state(path) -> tuple[GanState, dict]:
    return loads_gan_state(Path(path).read_bytes())


def write_log_csv(rows: list[dict], path) -> None:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["iter", "loss_d", "loss_g", "loss_pp"])
    for row in rows:
        pp = "" if row["loss_pp"] is None else f"{row['loss_pp']:.6f}"
        w.writerow([row["iter"], f"{row['loss_d']:.6f}", f"{row['loss_g']:.6f}", pp])
    Path(path).write_text(out.getvalue())
