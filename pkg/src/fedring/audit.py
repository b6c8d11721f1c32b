"""Latent-space projection attack and privacy reports.

For a real sample x with label y, projection searches the generator's
latent input for the z whose output G(z, y) is perceptually closest to x.
A generator that memorized its training data lets the attacker get close
to zero; a privacy-preserving one should not.

The generator has no intermediate style space, so projection runs in z.
The result field is still called ``w``.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .models import ModelSpec, condition, generator_forward, strip_condition
from .numerics import AdamState, NonFiniteError, ParamVector, adam_update_, seeded_rng
from .perceptual import PerceptualDistance

log = logging.getLogger(__name__)

N_BINS = 64


@dataclass(frozen=True)
class ProjectionConfig:
    steps: int = 500
    restarts: int = 8
    lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.restarts < 1 or self.lr <= 0:
            raise ValueError("projection needs steps >= 0, restarts >= 1 and lr > 0")


@dataclass
class ProjectionResult:
    sample_id: int
    w: np.ndarray
    reconstruction: np.ndarray
    distance: float
    steps: int
    final_loss: float
    restart_best: int
    restart_distances: list[float] = field(default_factory=list)
    discarded: int = 0


class ProjectionError(RuntimeError):
    """Every restart of a projection diverged."""


def initial_latents(cfg: ProjectionConfig, latent_dim: int, sample_id: int) -> np.ndarray:
    """Restart inits keyed by (seed, sample, restart); independent of the generator.

    Two generators audited with the same cfg therefore start from the same w.
    """
    return np.stack([
        seeded_rng(cfg.seed, "projection", sample_id, r).standard_normal(latent_dim)
        for r in range(cfg.restarts)
    ]).astype(np.float32)


def _descend(g_spec, g_params, target, y, w0, cfg, dist, target_feats):
    net = g_spec.network
    yb = np.array([y])
    w = w0[None].astype(np.float32).copy()
    opt = AdamState(np.zeros_like(w.ravel()), np.zeros_like(w.ravel()), lr=cfg.lr)
    best_d, best_w = np.inf, w[0].copy()
    d = np.inf
    for step in range(cfg.steps + 1):
        out, caches = net.forward(g_params, condition(g_spec, w, yb, w.dtype))
        dvec, gx = dist.paired_and_grad(target, out, target_feats)
        d = float(dvec[0])
        if not np.isfinite(d):
            raise NonFiniteError(f"non-finite projection loss at step {step}")
        if d < best_d:
            best_d, best_w = d, w[0].copy()
        if step == cfg.steps:
            break
        _, g_in = net.backward(g_params, caches, gx, need_input_grad=True)
        gw = strip_condition(g_spec, g_in).ravel()
        if not np.all(np.isfinite(gw)):
            raise NonFiniteError(f"non-finite projection gradient at step {step}")
        adam_update_(w.reshape(-1), gw, opt)
    return best_w, best_d, d


def project(g_spec: ModelSpec, g_params: ParamVector, x: np.ndarray, y: int, cfg: ProjectionConfig = ProjectionConfig(),
            dist: PerceptualDistance | None = None, sample_id: int = 0, init_w: np.ndarray | None = None) -> ProjectionResult:
    """Best-of-restarts Adam descent on w minimizing d(x, G(w, y)).

    Restarts run one after another on a batch of one, so adding restarts
    leaves earlier ones untouched and can only lower the best distance.
    Each restart keeps its best iterate. ``init_w`` (shape (latent,) or
    (restarts, latent)) replaces the random inits.
    """
    if g_spec.kind != "generator":
        raise ValueError("projection needs a generator spec")
    x = np.asarray(x, dtype=np.float32)
    if x.shape != g_spec.input_shape:
        raise ValueError(f"sample shape {x.shape} is not the generator output shape {g_spec.input_shape}")
    dist = dist or PerceptualDistance(g_spec.input_shape)
    if init_w is not None:
        inits = np.atleast_2d(np.asarray(init_w, dtype=np.float32))
    else:
        inits = initial_latents(cfg, g_spec.latent_dim, sample_id)
    target = x[None]
    target_feats = None if dist.kind == "pixel_l2" else dist.features(target)
    per_restart, best = [], None
    discarded = 0
    for r, w0 in enumerate(inits):
        try:
            w, d_best, d_final = _descend(g_spec, g_params, target, int(y), w0, cfg, dist, target_feats)
        except NonFiniteError as err:
            discarded += 1
            log.warning("sample %d restart %d discarded: %s", sample_id, r, err)
            per_restart.append(float("nan"))
            continue
        per_restart.append(d_best)
        if best is None or d_best < best[1]:
            best = (w, d_best, d_final, r)
    if best is None:
        raise ProjectionError(f"all {len(inits)} restarts diverged for sample {sample_id}")
    w, _, d_final, r = best
    recon = generator_forward(g_spec, g_params, w[None], [int(y)])[0]
    return ProjectionResult(sample_id, w, recon, dist.distance(x, recon), cfg.steps, d_final, r,
                            per_restart, discarded)


def project_all(g_spec, g_params, x, y, cfg: ProjectionConfig = ProjectionConfig(), dist=None,
                workers: int = 1) -> tuple[list[ProjectionResult], list[tuple[int, str]]]:
    """Project every sample; results in sample-id order plus (id, error) pairs."""
    dist = dist or PerceptualDistance(g_spec.input_shape)

    def one(i):
        try:
            return project(g_spec, g_params, x[i], int(y[i]), cfg, dist, sample_id=i)
        except (ProjectionError, NonFiniteError) as err:
            return (i, str(err))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(one, range(len(x))))
    else:
        outs = [one(i) for i in range(len(x))]
    results = [o for o in outs if isinstance(o, ProjectionResult)]
    errors = [o for o in outs if not isinstance(o, ProjectionResult)]
    return results, errors


# reports ---------------------------------------------------------------


@dataclass
class PrivacyReport:
    counts: list[int]
    edges: list[float]
    mean: float
    median: float
    min: float
    n_samples: int
    errors: list[tuple[int, str]]
    config: dict
    results: list[ProjectionResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "results"}
        d["errors"] = [list(e) for e in self.errors]
        d["latent_space"] = "z"
        return d


def histogram(distances, lo: float, hi: float, bins: int = N_BINS) -> tuple[np.ndarray, np.ndarray]:
    if hi <= lo:
        hi = lo + 1e-12
    return np.histogram(np.asarray(distances, dtype=np.float64), bins=bins, range=(lo, hi))


def _report(results, errors, cfg, lo, hi) -> PrivacyReport:
    d = np.array([r.distance for r in results])
    counts, edges = histogram(d, lo, hi)
    return PrivacyReport(counts.tolist(), edges.tolist(),
                         float(d.mean()) if len(d) else float("nan"),
                         float(np.median(d)) if len(d) else float("nan"),
                         float(d.min()) if len(d) else float("nan"),
                         len(d), errors, asdict(cfg), results)


def privacy_histogram(g_spec: ModelSpec, g_params: ParamVector, x, y, cfg: ProjectionConfig = ProjectionConfig(),
                      dist: PerceptualDistance | None = None, workers: int = 1,
                      value_range: tuple[float, float] | None = None) -> PrivacyReport:
    """Project every training sample and bin the distances (64 uniform bins)."""
    results, errors = project_all(g_spec, g_params, x, y, cfg, dist, workers)
    d = [r.distance for r in results]
    if value_range is None:
        value_range = (min(d), max(d)) if d else (0.0, 1.0)
    return _report(results, errors, cfg, *value_range)


def compare_reports(vanilla: tuple[ModelSpec, ParamVector], private: tuple[ModelSpec, ParamVector], x, y,
                    cfg: ProjectionConfig = ProjectionConfig(), dist=None, workers: int = 1) -> dict:
    """Audit two generators with the same cfg and restart seeds; bins share one range."""
    rv, ev = project_all(*vanilla, x, y, cfg, dist, workers)
    rp, ep = project_all(*private, x, y, cfg, dist, workers)
    d = [r.distance for r in rv + rp] or [0.0, 1.0]
    lo, hi = min(d), max(d)
    a, b = _report(rv, ev, cfg, lo, hi), _report(rp, ep, cfg, lo, hi)
    return {"vanilla": a, "private": b, "ratio": b.mean / a.mean if a.mean > 0 else float("inf")}


def feature_scale(x, dist: PerceptualDistance | None = None, pairs: int = 256, seed: int = 0) -> float:
    """Typical distance between two distinct real samples (mean over random pairs)."""
    x = np.asarray(x, dtype=np.float32)
    if len(x) < 2:
        raise ValueError("need at least two samples")
    dist = dist or PerceptualDistance(x.shape[1:])
    rng = seeded_rng(seed, "feature-scale")
    i = rng.integers(len(x), size=pairs)
    j = (i + 1 + rng.integers(len(x) - 1, size=pairs)) % len(x)
    return float(dist.paired(x[i], x[j]).mean())


def write_projection_csv(results: list[ProjectionResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "distance", "restart_best"])
        for r in sorted(results, key=lambda r: r.sample_id):
            w.writerow([r.sample_id, f"{r.distance:.8f}", r.restart_best])


def write_report_json(report: PrivacyReport | dict, path, extra: dict | None = None) -> None:
    if isinstance(report, PrivacyReport):
        obj = report.to_dict()
    else:
        obj = {k: (v.to_dict() if isinstance(v, PrivacyReport) else v) for k, v in report.items()}
    obj.update(extra or {})
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# mosaic ------------------------------------------------------------------


def quantize(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to uint8 [0, 255]."""
    v = (np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.rint(v).astype(np.uint8)


def write_pgm(img: np.ndarray, path, comment: str = "") -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    header = b"P5\n"
    for line in comment.splitlines():
        header += b"# " + line.encode() + b"\n"
    Path(path).write_bytes(header + b"%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM")
    pos, fields = 2, []
    while len(fields) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


def mosaic(rows: list[np.ndarray]) -> np.ndarray:
    """Tile rows of (k, 1, H, W) images into one (rows*H, k*W) uint8 image."""
    out = []
    for row in rows:
        row = np.asarray(row)
        if row.ndim != 4 or row.shape[1] != 1:
            raise ValueError("mosaic needs single-channel image batches")
        out.append(np.concatenate([quantize(img[0]) for img in row], axis=1))
    return np.concatenate(out, axis=0)


def nearest_match_report(vanilla: tuple[ModelSpec, ParamVector], private: tuple[ModelSpec, ParamVector], x, y,
                         cfg: ProjectionConfig = ProjectionConfig(), out_path="mosaic.pgm", dist=None,
                         comment: str = "") -> dict:
    """Write a real / vanilla projection / private projection mosaic."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError("nearest-match mosaics need image data")
    rv, _ = project_all(*vanilla, x, y, cfg, dist)
    rp, _ = project_all(*private, x, y, cfg, dist)
    if len(rv) != len(x) or len(rp) != len(x):
        raise ProjectionError("some projections failed; mosaic would be misaligned")
    grid = mosaic([x, np.stack([r.reconstruction for r in rv]), np.stack([r.reconstruction for r in rp])])
    write_pgm(grid, out_path, comment)
    return {"path": str(out_path), "shape": list(grid.shape),
            "vanilla": [r.distance for r in rv], "private": [r.distance for r in rp]}
