"""Queue-based asynchronous federation, simulated in discrete ticks.

Every node runs at the same speed: in each tick a node with a non-empty
inbox takes the oldest envelope, fine-tunes it and sends it on. Inboxes
are bounded FIFOs; when one overflows the oldest envelope is dropped.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from ..datagen import FederationData
from ..numerics import ParamVector, seeded_rng
from ..pp_gan import Buffer
from .engine import Envelope, FedConfig, _Context

log = logging.getLogger(__name__)

INBOX_CAPACITY = 4


@dataclass
class AsyncResult:
    models: dict[int, ParamVector]
    # per tick: the (model_id, holder) pairs sitting in inboxes after delivery
    ticks: list[list[tuple[int, int]]] = field(default_factory=list)
    choices: list[list[int]] = field(default_factory=list)
    dropped: int = 0


def uniform_successor(seed: int, n_nodes: int) -> Callable[[int, int], int]:
    def choose(node: int, step: int) -> int:
        k = int(seeded_rng(seed, "async-successor", node, step).integers(n_nodes - 1))
        return k if k < node else k + 1

    return choose


def run_async(fd: FederationData, cfg: FedConfig, generators: dict | None = None, ticks: int | None = None,
              successor: Callable[[int, int], int] | None = None, capacity: int = INBOX_CAPACITY) -> AsyncResult:
    """Run ``ticks`` ticks (default ``cfg.rounds``) of the asynchronous ring.

    ``successor(node, step)`` picks the receiver of a node's step-th send;
    the default draws a uniformly random other node.
    """
    ctx = _Context(fd, cfg, generators, None)
    n = ctx.n
    successor = successor or uniform_successor(cfg.seed, n)
    ticks = cfg.rounds if ticks is None else ticks
    inbox = [deque([Envelope(ctx.init_model(i), ctx.spec, Buffer.empty(fd.sample_shape, i), i, 0, i)]) for i in range(n)]
    steps = [0] * n
    result = AsyncResult({})
    for tick in range(1, ticks + 1):
        taken = {i: inbox[i].popleft() for i in range(n) if inbox[i]}
        sends = []
        choice_row = [-1] * n
        for i in sorted(taken):
            env = taken[i]
            steps[i] += 1
            node = fd.nodes[i]
            params = ctx.train(env.model, node.train_x, node.train_y, env.buffer, steps[i], i, node.augment)
            dest = successor(i, steps[i])
            choice_row[i] = dest
            sends.append((dest, Envelope(params, ctx.spec, ctx.own_buffer(i, steps[i]), i, steps[i], env.model_id)))
        for dest, env in sends:
            inbox[dest].append(env)
            if len(inbox[dest]) > capacity:
                lost = inbox[dest].popleft()
                result.dropped += 1
                log.warning("inbox of node %d overflowed; dropped model %d", dest, lost.model_id)
        result.choices.append(choice_row)
        result.ticks.append(sorted((env.model_id, j) for j in range(n) for env in inbox[j]))
    latest: dict[int, ParamVector] = {}
    for j in range(n):
        for env in inbox[j]:
            latest[env.model_id] = env.model
    result.models = latest
    return result
