"""Synthetic federations: Gaussian 2-D points and 16x16 blob images.

Each node's data can be generated under its own ``Style`` (rotation and
translation for points; background level, slope, texture and noise for
images) to emulate acquisition shift between institutions.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from math import prod
from pathlib import Path

import numpy as np

from .numerics import seeded_rng

FAMILIES = ("gauss2d", "blobimg")
REGIMES = ("iid", "non_iid")
MAGIC = b"FDRD"
FORMAT_VERSION = 1
IMAGE_SIZE = 16


class DatasetFormatError(ValueError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class Style:
    rotation_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    bg_offset: float = 0.0
    bg_slope: float = 0.0
    texture_amp: float = 0.1
    texture_freq: float = 1.0
    noise_std: float = 0.05

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> Style:
        return cls(**json.loads(text))


@dataclass
class Pool:
    x: np.ndarray
    y: np.ndarray
    style: Style = field(default_factory=Style)


@dataclass(eq=False)
class NodeDataset:
    node_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    style: Style = field(default_factory=Style)
    augment: bool = False

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.train_x.shape[1:])

    def __eq__(self, other) -> bool:
        if not isinstance(other, NodeDataset):
            return NotImplemented
        return (
            self.node_id == other.node_id
            and self.style == other.style
            and self.augment == other.augment
            and all(
                a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in (
                    (self.train_x, other.train_x),
                    (self.train_y, other.train_y),
                    (self.test_x, other.test_x),
                    (self.test_y, other.test_y),
                )
            )
        )


@dataclass(eq=False)
class FederationData:
    nodes: list[NodeDataset]
    regime: str
    num_classes: int
    family: str

    def __eq__(self, other) -> bool:
        if not isinstance(other, FederationData):
            return NotImplemented
        return (
            self.regime == other.regime
            and self.num_classes == other.num_classes
            and self.family == other.family
            and len(self.nodes) == len(other.nodes)
            and all(a == b for a, b in zip(self.nodes, other.nodes))
        )

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.nodes[0].sample_shape

    def union_train(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.concatenate([n.train_x for n in self.nodes]),
            np.concatenate([n.train_y for n in self.nodes]),
        )

    def summary(self) -> dict:
        rows = []
        for n in self.nodes:
            rows.append({
                "node": n.node_id,
                "train": int(len(n.train_y)),
                "test": int(len(n.test_y)),
                "train_per_class": np.bincount(n.train_y, minlength=self.num_classes).tolist(),
                "test_per_class": np.bincount(n.test_y, minlength=self.num_classes).tolist(),
                "style": asdict(n.style),
            })
        return {"family": self.family, "regime": self.regime, "num_classes": self.num_classes,
                "sample_shape": list(self.sample_shape), "nodes": rows}


# generators ----------------------------------------------------------------


def class_means(num_classes: int, radius: float = 2.0) -> np.ndarray:
    angles = np.pi * (1.0 + 2.0 * np.arange(num_classes) / num_classes)
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def apply_shift(points: np.ndarray, style: Style) -> np.ndarray:
    t = np.deg2rad(style.rotation_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return points @ rot.T + np.array([style.tx, style.ty])


def make_gauss2d(seed: int, num_classes: int, n_per_class: int, shift: Style | None = None,
                 sigma: float = 0.5, radius: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian classes with means evenly spaced on a circle.

    For two classes the unshifted means are (-radius, 0) and (radius, 0).
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if n_per_class < 4:
        raise ValueError("n_per_class must be >= 4")
    if not sigma > 0:
        raise ValueError(f"degenerate covariance: sigma={sigma}")
    shift = shift or Style()
    rng = seeded_rng(seed, "gauss2d")
    means = class_means(num_classes, radius)
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = means[y] + sigma * rng.standard_normal((y.size, 2))
    x = apply_shift(x, shift)
    order = rng.permutation(y.size)
    return x[order].astype(np.float32), y[order].astype(np.int64)


def _blob_background(rng, style: Style, size: int) -> np.ndarray:
    coords = (np.arange(size) - (size - 1) / 2) / ((size - 1) / 2)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    theta = rng.uniform(0, 2 * np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    texture = style.texture_amp * np.sin(np.pi * style.texture_freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    noise = style.noise_std * rng.standard_normal((size, size))
    return -0.5 + style.bg_offset + style.bg_slope * xx + texture + noise


def _blob(rng, size: int, amplitude: float = 1.2) -> tuple[np.ndarray, np.ndarray]:
    cy, cx = rng.uniform(4.0, size - 4.0, size=2)
    ay, ax = rng.uniform(1.5, 3.0, size=2)
    angle = rng.uniform(0, np.pi)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy, dx = yy - cy, xx - cx
    u = np.cos(angle) * dx + np.sin(angle) * dy
    v = -np.sin(angle) * dx + np.cos(angle) * dy
    r2 = (u / ax) ** 2 + (v / ay) ** 2
    return amplitude * np.exp(-0.5 * r2), r2 <= 1.0


def make_blobimg(seed: int, n_per_class: int, shift: Style | None = None, size: int = IMAGE_SIZE,
                 return_masks: bool = False):
    """Binary images: class 1 carries a bright elliptical blob, class 0 does not.

    Returns (x, y) with x of shape (n, 1, size, size) in [-1, 1]; with
    ``return_masks`` also the boolean blob masks (all False for class 0).
    """
    if n_per_class < 4:
        raise ValueError("n_per_class must be >= 4")
    shift = shift or Style()
    rng = seeded_rng(seed, "blobimg")
    y = np.repeat(np.arange(2), n_per_class)
    rng.shuffle(y)
    x = np.empty((y.size, 1, size, size), dtype=np.float32)
    masks = np.zeros((y.size, size, size), dtype=bool)
    for i, label in enumerate(y):
        img = _blob_background(rng, shift, size)
        if label == 1:
            blob, mask = _blob(rng, size)
            img = img + blob
            masks[i] = mask
        x[i, 0] = np.clip(img, -1.0, 1.0)
    if return_masks:
        return x, y.astype(np.int64), masks
    return x, y.astype(np.int64)


# splitting -----------------------------------------------------------------


def _test_quota(y: np.ndarray, num_classes: int, test_fraction: float) -> int:
    counts = np.bincount(y, minlength=num_classes)
    quota = int(test_fraction * y.size) // num_classes
    return max(0, min(quota, int(counts.min()) - 1))


def split_balanced(y: np.ndarray, num_classes: int, quota: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``quota`` test samples per class; everything else is training data."""
    test = []
    for c in range(num_classes):
        idx = np.flatnonzero(y == c)
        test.append(rng.permutation(idx)[:quota])
    test_idx = np.sort(np.concatenate(test)) if test else np.zeros(0, dtype=np.int64)
    train_mask = np.ones(y.size, dtype=bool)
    train_mask[test_idx] = False
    train_idx = np.flatnonzero(train_mask)
    return rng.permutation(train_idx), rng.permutation(test_idx)


def _node(node_id, x, y, train_idx, test_idx, style, augment) -> NodeDataset:
    return NodeDataset(node_id, x[train_idx], y[train_idx], x[test_idx], y[test_idx], style, augment)


def partition(pools: Pool | list[Pool], regime: str, n_nodes: int, seed: int, num_classes: int = 2,
              family: str = "gauss2d", test_fraction: float = 0.2, augment: bool = False) -> FederationData:
    """Split pools into a federation with balanced 80/20 train/test splits.

    ``iid`` takes one pool and splits it uniformly at random over the nodes;
    ``non_iid`` takes one pool per node, each generated with its own style.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if isinstance(pools, Pool):
        pools = [pools]
    rng = seeded_rng(seed, "partition")
    nodes = []
    if regime == "iid":
        if n_nodes < 2:
            raise ValueError("iid partition needs n_nodes >= 2")
        if len(pools) != 1:
            raise ValueError("iid partition takes exactly one pool")
        pool = pools[0]
        if n_nodes > len(pool.y):
            raise ValueError(f"{n_nodes} nodes exceed dataset size {len(pool.y)}")
        shards = np.array_split(rng.permutation(len(pool.y)), n_nodes)
        quota = min(_test_quota(pool.y[s], num_classes, test_fraction) for s in shards)
        for i, shard in enumerate(shards):
            tr, te = split_balanced(pool.y[shard], num_classes, quota, rng)
            nodes.append(_node(i, pool.x, pool.y, shard[tr], shard[te], pool.style, augment))
    else:
        if len(pools) != n_nodes:
            raise ValueError(f"non_iid partition needs one pool per node ({n_nodes}), got {len(pools)}")
        for i, pool in enumerate(pools):
            quota = _test_quota(pool.y, num_classes, test_fraction)
            tr, te = split_balanced(pool.y, num_classes, quota, rng)
            nodes.append(_node(i, pool.x, pool.y, tr, te, pool.style, augment))
    return FederationData(nodes, regime, num_classes, family)


def default_styles(family: str, n_nodes: int) -> list[Style]:
    if family == "gauss2d":
        span = max(n_nodes - 1, 1)
        return [Style(rotation_deg=90.0 * i / span) for i in range(n_nodes)]
    offsets = np.linspace(-0.2, 0.2, n_nodes) if n_nodes > 1 else [0.0]
    return [
        Style(bg_offset=float(o), bg_slope=0.1 * ((-1) ** i), texture_amp=0.05 + 0.05 * (i % 3),
              texture_freq=1.0 + i, noise_std=0.03 + 0.02 * (i % 2))
        for i, o in enumerate(offsets)
    ]


def make_federation(family: str, regime: str, n_nodes: int, n_per_class: int, seed: int,
                    styles: list[Style] | None = None, size_factors: list[float] | None = None,
                    num_classes: int = 2, augment: bool = False, sigma: float = 0.5) -> FederationData:
    """Generate and partition a federation in one call.

    In the iid regime ``n_per_class`` is the total per class across all
    nodes; in the non_iid regime it is per node, scaled by ``size_factors``.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown dataset family {family!r}")
    if family == "blobimg" and num_classes != 2:
        raise ValueError("blobimg is binary")

    def gen(key: int, n: int, style: Style):
        sub_seed = int(seeded_rng(seed, "data", key).integers(2**62))
        if family == "gauss2d":
            return make_gauss2d(sub_seed, num_classes, n, style, sigma=sigma)
        return make_blobimg(sub_seed, n, style)

    if regime == "iid":
        style = (styles or [Style()])[0]
        x, y = gen(0, n_per_class, style)
        return partition(Pool(x, y, style), "iid", n_nodes, seed, num_classes, family, augment=augment)
    styles = styles or default_styles(family, n_nodes)
    size_factors = size_factors or [1.0] * n_nodes
    if len(styles) != n_nodes or len(size_factors) != n_nodes:
        raise ValueError("need one style and one size factor per node")
    pools = []
    for i in range(n_nodes):
        n = max(4, int(round(n_per_class * size_factors[i])))
        x, y = gen(i, n, styles[i])
        pools.append(Pool(x, y, styles[i]))
    return partition(pools, "non_iid", n_nodes, seed, num_classes, family, augment=augment)


# persistence ---------------------------------------------------------------


def _write_samples(buf: io.BytesIO, x: np.ndarray, y: np.ndarray) -> None:
    buf.write(struct.pack("<I", len(y)))
    buf.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(y, dtype="<u2").tobytes())


def dumps_dataset(fd: FederationData) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", FORMAT_VERSION, len(fd.nodes)))
    family = fd.family.encode()
    buf.write(struct.pack("<BBH", REGIMES.index(fd.regime), fd.num_classes, len(family)))
    buf.write(family)
    for node in fd.nodes:
        style = node.style.to_json().encode()
        shape = node.sample_shape
        buf.write(struct.pack("<HBI", node.node_id, int(node.augment), len(style)))
        buf.write(style)
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}H", *shape))
        _write_samples(buf, node.train_x, node.train_y)
        _write_samples(buf, node.test_x, node.test_y)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError("unexpected end of data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_samples(r: _Reader, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    (count,) = r.unpack("<I")
    x = np.frombuffer(r.take(4 * count * prod(shape)), dtype="<f4").astype(np.float32).reshape((count,) + shape)
    y = np.frombuffer(r.take(2 * count), dtype="<u2").astype(np.int64)
    return x, y


def loads_dataset(data: bytes) -> FederationData:
    if len(data) < 4 + 5 + 4:
        raise ChecksumError("file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("dataset checksum mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise DatasetFormatError("not a dataset container")
    version, n_nodes = r.unpack("<BI")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    regime, num_classes, flen = r.unpack("<BBH")
    family = r.take(flen).decode()
    nodes = []
    for _ in range(n_nodes):
        node_id, augment, slen = r.unpack("<HBI")
        style = Style.from_json(r.take(slen).decode())
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}H")
        trx, try_ = _read_samples(r, shape)
        tex, tey = _read_samples(r, shape)
        nodes.append(NodeDataset(node_id, trx, try_, tex, tey, style, bool(augment)))
    if r.pos != len(body):
        raise DatasetFormatError("trailing bytes in dataset container")
    return FederationData(nodes, REGIMES[regime], num_classes, family)


def save_dataset(fd: FederationData, path) -> None:
    Path(path).write_bytes(dumps_dataset(fd))


def load_dataset(path) -> FederationData:
    return loads_dataset(Path(path).read_bytes())
