"""Synchronous ring federation and its baselines.

Each round a random single cycle over the nodes fixes every node's
successor. Nodes fine-tune the model in their inbox (replaying the buffer
that came with it) and pass the result, with a buffer drawn from their own
generator, to their successor. All round inputs are snapshotted before any
node starts, and every random draw is keyed by (seed, round, node), so the
outcome does not depend on how many workers run the node updates.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ..datagen import FederationData
from ..models import ModelSpec, classifier_spec, predict_labels
from ..numerics import ParamVector, seeded_rng
from ..pp_gan import Buffer, sample_buffer
from ..replay import local_round_update

log = logging.getLogger(__name__)

VARIANTS = (
    "standard",
    "model_only",
    "buffer_only_sharing",
    "synthetic_only_training",
    "centralized_synthetic",
    "union_baseline",
    "fedavg",
)
BUFFER_VARIANTS = ("standard", "buffer_only_sharing", "synthetic_only_training", "centralized_synthetic")
CENTRAL_HOLDER = -1


class ConservationError(RuntimeError):
    pass


@dataclass
class Envelope:
    model: ParamVector | None
    spec: ModelSpec | None
    buffer: Buffer
    sender: int
    round_index: int
    model_id: int = 0


@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    cycle: tuple[int, ...]

    def successor(self, node: int) -> int:
        i = self.cycle.index(node)
        return self.cycle[(i + 1) % len(self.cycle)]

    def predecessor(self, node: int) -> int:
        i = self.cycle.index(node)
        return self.cycle[i - 1]

    def successors(self) -> list[int]:
        out = [0] * len(self.cycle)
        for i, node in enumerate(self.cycle):
            out[node] = self.cycle[(i + 1) % len(self.cycle)]
        return out


def plan_round(seed: int, round_index: int, n_nodes: int) -> RoundPlan:
    """Uniform random single cycle: a random node ordering closed into a ring."""
    if n_nodes < 2:
        raise ValueError("a federation needs at least 2 nodes")
    order = seeded_rng(seed, "roundplan", round_index).permutation(n_nodes)
    # rotate so the cycle starts at node 0; every cycle then has one representation
    start = int(np.flatnonzero(order == 0)[0])
    return RoundPlan(round_index, tuple(int(v) for v in np.roll(order, -start)))


@dataclass
class FedConfig:
    rounds: int = 100
    epochs: int = 100
    buffer_size: int = 512
    variant: str = "standard"
    seed: int = 0
    batch_size: int = 32
    lr: float = 1e-4
    workers: int = 1
    forward_buffers: bool = False
    central_synthetic_per_node: int = 256
    class_balance: bool = True
    wire_roundtrip: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.rounds < 0 or self.epochs < 0 or self.buffer_size < 0:
            raise ValueError("rounds, epochs and buffer_size must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def effective_buffer(self) -> int:
        return 0 if self.variant == "model_only" else self.buffer_size


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    dataset_id: int
    holder_node: int
    accuracy: float


@dataclass
class FedResult:
    config: FedConfig
    records: list[MetricsRecord]
    final_models: dict[int, ParamVector]
    circulation: list[list[int]] = field(default_factory=list)
    captured_frames: list[bytes] = field(default_factory=list)
    wall_clock: float = 0.0

    def final_accuracy(self) -> dict[int, float]:
        """Accuracy per dataset of the model resident at that dataset's node after the last round."""
        if not self.records:
            return {}
        last = max(r.round for r in self.records)
        rows = [r for r in self.records if r.round == last]
        central = [r for r in rows if r.holder_node == CENTRAL_HOLDER]
        if central:
            return {r.dataset_id: r.accuracy for r in central}
        return {r.dataset_id: r.accuracy for r in rows if r.holder_node == r.dataset_id}

    def mean_final_accuracy(self) -> float:
        acc = self.final_accuracy()
        return float(np.mean(list(acc.values())))


def evaluate(spec: ModelSpec, params: ParamVector, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of argmax-correct predictions."""
    if len(y) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict_labels(spec, params, x) == np.asarray(y)))


def fedavg_round(models: list[ParamVector], weights) -> ParamVector:
    """Size-weighted elementwise average of parameter vectors."""
    if not models:
        raise ValueError("no models to average")
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(models) or np.any(weights <= 0):
        raise ValueError("need one positive weight per model")
    layout = models[0].layout
    if any(m.layout != layout for m in models):
        raise ValueError("layout mismatch between models")
    # fixed summation order over a canonical sort keeps the result permutation invariant
    order = sorted(range(len(models)), key=lambda i: (models[i].values.tobytes(), weights[i]))
    # start from the first term rather than +0.0 so signed zeros survive averaging identical inputs
    acc = weights[order[0]] * models[order[0]].values.astype(np.float64)
    for i in order[1:]:
        acc += weights[i] * models[i].values.astype(np.float64)
    total = float(sum(weights[i] for i in order))
    return ParamVector((acc / total).astype(models[0].values.dtype), layout)


def agreement(records: list[MetricsRecord], round_index: int, n_nodes: int | None = None) -> dict[int, tuple[float, float]]:
    """Per dataset, mean and population std of accuracy across circulating models."""
    rows = [r for r in records if r.round == round_index and r.holder_node != CENTRAL_HOLDER]
    if not rows:
        rows = [r for r in records if r.round == round_index]
    if not rows:
        raise ValueError(f"no records for round {round_index}")
    datasets = sorted({r.dataset_id for r in rows})
    holders = sorted({r.holder_node for r in rows})
    if n_nodes is not None and holders != [h for h in range(n_nodes)] and holders != [CENTRAL_HOLDER]:
        raise ValueError(f"incomplete record set for round {round_index}")
    out = {}
    for k in datasets:
        acc = np.array([r.accuracy for r in rows if r.dataset_id == k])
        if len(acc) != len(holders):
            raise ValueError(f"incomplete record set for dataset {k} at round {round_index}")
        out[k] = (float(acc.mean()), float(acc.std()))
    return out


# engine -----------------------------------------------------------------------


class _Context:
    def __init__(self, fd: FederationData, cfg: FedConfig, generators, spec: ModelSpec | None):
        self.fd = fd
        self.cfg = cfg
        self.n = len(fd.nodes)
        self.spec = spec or classifier_spec(fd.sample_shape, fd.num_classes)
        self.generators = generators or {}
        self.records: list[MetricsRecord] = []
        self.circulation: list[list[int]] = []
        self.frames: list[bytes] = []

    def init_model(self, node: int) -> ParamVector:
        return self.spec.init_params(self.cfg.seed, node)

    def train(self, params, x, y, buffer, t, node, augment=False) -> ParamVector:
        c = self.cfg
        return local_round_update(self.spec, params, x, y, buffer, c.epochs, c.batch_size, c.lr,
                                  c.seed, (t, node), augment)

    def own_buffer(self, node: int, t: int, size: int | None = None) -> Buffer:
        size = self.cfg.effective_buffer if size is None else size
        if size == 0:
            return Buffer.empty(self.fd.sample_shape, node)
        if node not in self.generators:
            raise MissingGeneratorError(f"variant {self.cfg.variant!r} needs a generator for node {node}")
        g_spec, g_params = self.generators[node]
        return sample_buffer(g_spec, g_params, size, self.cfg.class_balance, self.cfg.seed, node, t)

    def map_nodes(self, fn: Callable[[int], object]) -> list:
        if self.cfg.workers == 1:
            return [fn(i) for i in range(self.n)]
        with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
            return list(pool.map(fn, range(self.n)))

    def deliver(self, env: Envelope) -> Envelope:
        """Optionally push an envelope through the wire codec, as a network hop would."""
        if not self.cfg.wire_roundtrip:
            return env
        from ..transport.wire import decode_frame, envelope_frame, frame_to_envelope

        raw = envelope_frame(env)
        self.frames.append(raw)
        return frame_to_envelope(decode_frame(raw))

    def evaluate_round(self, t: int, holders: dict[int, ParamVector]) -> None:
        for k, node in enumerate(self.fd.nodes):
            for h in sorted(holders):
                acc = evaluate(self.spec, holders[h], node.test_x, node.test_y)
                self.records.append(MetricsRecord(t, k, h, acc))


class MissingGeneratorError(RuntimeError):
    pass


def _check_conservation(inbox: list[Envelope], n: int, t: int) -> list[int]:
    ids = sorted(env.model_id for env in inbox)
    if ids != list(range(n)):
        raise ConservationError(f"round {t}: circulating model ids {ids}")
    return [env.model_id for env in inbox]


def _run_ring(ctx: _Context, schedule: Callable[[int], RoundPlan] | None = None) -> dict[int, ParamVector]:
    cfg, n, fd = ctx.cfg, ctx.n, ctx.fd
    inbox = [Envelope(ctx.init_model(i), ctx.spec, Buffer.empty(fd.sample_shape, i), i, 0, i) for i in range(n)]
    schedule = schedule or (lambda t: plan_round(cfg.seed, t, n))
    for t in range(1, cfg.rounds + 1):
        plan = schedule(t)
        snapshot = list(inbox)

        def work(i: int) -> Envelope:
            env = snapshot[i]
            node = fd.nodes[i]
            params = ctx.train(env.model, node.train_x, node.train_y, env.buffer, t, i, node.augment)
            if cfg.forward_buffers and env.buffer.size:
                out_buf = env.buffer
            else:
                out_buf = ctx.own_buffer(i, t)
            return Envelope(params, ctx.spec, out_buf, i, t, env.model_id)

        outgoing = ctx.map_nodes(work)
        new_inbox: list[Envelope | None] = [None] * n
        for i, env in enumerate(outgoing):
            new_inbox[plan.successor(i)] = ctx.deliver(env)
        inbox = new_inbox
        ctx.circulation.append(_check_conservation(inbox, n, t))
        ctx.evaluate_round(t, {j: inbox[j].model for j in range(n)})
    return {j: inbox[j].model for j in range(n)}


def _run_local_models(ctx: _Context, synthetic_local: bool) -> dict[int, ParamVector]:
    """Models stay home; only buffers travel (optionally no real data at all)."""
    cfg, n, fd = ctx.cfg, ctx.n, ctx.fd
    models = [ctx.init_model(i) for i in range(n)]
    local_data = []
    for i, node in enumerate(fd.nodes):
        if synthetic_local:
            own = ctx.own_buffer(i, 0, size=len(node.train_y))
            local_data.append((own.x, own.y))
        else:
            local_data.append((node.train_x, node.train_y))
    inbox = [Buffer.empty(fd.sample_shape, i) for i in range(n)]
    for t in range(1, cfg.rounds + 1):
        plan = plan_round(cfg.seed, t, n)
        snapshot = list(inbox)

        def work(i: int):
            x, y = local_data[i]
            params = ctx.train(models[i], x, y, snapshot[i], t, i, fd.nodes[i].augment and not synthetic_local)
            env = Envelope(None, None, ctx.own_buffer(i, t), i, t, i)
            return params, env

        results = ctx.map_nodes(work)
        new_inbox: list[Buffer | None] = [None] * n
        for i, (params, env) in enumerate(results):
            models[i] = params
            new_inbox[plan.successor(i)] = ctx.deliver(env).buffer
        inbox = new_inbox
        ctx.evaluate_round(t, {j: models[j] for j in range(n)})
    return {j: models[j] for j in range(n)}


def _run_central(ctx: _Context, x: np.ndarray, y: np.ndarray) -> dict[int, ParamVector]:
    params = ctx.init_model(0)
    for t in range(1, ctx.cfg.rounds + 1):
        params = ctx.train(params, x, y, None, t, ctx.n)
        ctx.evaluate_round(t, {CENTRAL_HOLDER: params})
    return {CENTRAL_HOLDER: params}


def _run_fedavg(ctx: _Context) -> dict[int, ParamVector]:
    fd = ctx.fd
    global_params = ctx.init_model(0)
    weights = [len(node.train_y) for node in fd.nodes]
    for t in range(1, ctx.cfg.rounds + 1):
        snapshot = global_params

        def work(i: int) -> ParamVector:
            node = fd.nodes[i]
            return ctx.train(snapshot, node.train_x, node.train_y, None, t, i, node.augment)

        global_params = fedavg_round(ctx.map_nodes(work), weights)
        ctx.evaluate_round(t, {j: global_params for j in range(ctx.n)})
    return {j: global_params for j in range(ctx.n)}


def run_variant(fd: FederationData, cfg: FedConfig, generators: dict | None = None,
                spec: ModelSpec | None = None, schedule: Callable[[int], RoundPlan] | None = None) -> FedResult:
    """Run one federation variant and collect per-round N x N accuracy records.

    ``generators`` maps node id to (generator spec, generator params) and is
    required by every variant that draws synthetic samples.
    """
    start = time.perf_counter()
    ctx = _Context(fd, cfg, generators, spec)
    if cfg.variant in BUFFER_VARIANTS and cfg.effective_buffer > 0 or cfg.variant == "synthetic_only_training":
        missing = [i for i in range(ctx.n) if i not in ctx.generators]
        if missing:
            raise MissingGeneratorError(f"variant {cfg.variant!r} needs generators for nodes {missing}")
    if cfg.variant in ("standard", "model_only"):
        final = _run_ring(ctx, schedule)
    elif cfg.variant == "buffer_only_sharing":
        final = _run_local_models(ctx, synthetic_local=False)
    elif cfg.variant == "synthetic_only_training":
        final = _run_local_models(ctx, synthetic_local=True)
    elif cfg.variant == "union_baseline":
        x, y = fd.union_train()
        final = _run_central(ctx, x, y)
    elif cfg.variant == "centralized_synthetic":
        bufs = [ctx.own_buffer(i, 0, size=cfg.central_synthetic_per_node) for i in range(ctx.n)]
        final = _run_central(ctx, np.concatenate([b.x for b in bufs]), np.concatenate([b.y for b in bufs]))
    else:
        final = _run_fedavg(ctx)
    if cfg.rounds == 0:
        final = {i: ctx.init_model(i) for i in range(ctx.n)}
    return FedResult(cfg, ctx.records, final, ctx.circulation, ctx.frames, time.perf_counter() - start)


def run_decentralized(fd: FederationData, cfg: FedConfig, generators: dict | None = None,
                      spec: ModelSpec | None = None) -> FedResult:
    if cfg.variant not in ("standard", "model_only"):
        raise ValueError("run_decentralized runs the ring variants; use run_variant for the others")
    return run_variant(fd, cfg, generators, spec)


def config_dict(cfg: FedConfig) -> dict:
    return asdict(cfg)
