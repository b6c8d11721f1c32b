"""Networked ring federation over TCP, one process per node.

Every frame travels on its own connection: the sender connects, writes the
frame and waits for an ACK echoing (round, crc). A listener thread accepts
connections and files incoming envelopes by round, so a fast peer may run
ahead without confusing a slow one. Round plans come from the shared
federation seed, so no coordinator is needed.

No TLS or authentication; deployments outside a trusted network must wrap
the sockets.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Protocol

from ..datagen import FederationData
from ..federation.engine import Envelope, FedConfig, MetricsRecord, _Context, plan_round
from ..pp_gan import Buffer
from .wire import (
    CRC,
    DEFAULT_MAX_PAYLOAD,
    FRAME_HEADER,
    Frame,
    MsgType,
    WireError,
    ack_payload,
    decode_frame,
    encode_frame,
    envelope_frame,
    frame_to_envelope,
    parse_ack,
    parse_frame_header,
)

log = logging.getLogger(__name__)

Address = tuple[str, int]


class PeerError(RuntimeError):
    pass


class PeerUnreachableError(PeerError):
    pass


class AckTimeoutError(PeerError):
    pass


def parse_address(text: str) -> Address:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


@dataclass
class PeerConfig:
    node_id: int
    listen: Address
    peers: dict[int, Address]
    retries: int = 5
    backoff: float = 0.2
    ack_timeout: float = 30.0
    recv_timeout: float = 600.0
    max_payload: int = DEFAULT_MAX_PAYLOAD


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise WireError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Frame:
    header = _recv_exact(sock, FRAME_HEADER.size)
    _, _, _, length = parse_frame_header(header, max_payload)
    rest = _recv_exact(sock, length + CRC.size)
    return decode_frame(header + rest, max_payload)


class Listener:
    """Accepts frames, answers each with an ACK and files it by round."""

    def __init__(self, node_id: int, address: Address, max_payload: int = DEFAULT_MAX_PAYLOAD,
                 ack_hook: Callable[[int, int], tuple[int, int]] | None = None):
        self.node_id = node_id
        self.max_payload = max_payload
        self.ack_hook = ack_hook  # test hook: rewrite the (round, crc) echo
        self._frames: dict[int, Frame] = {}
        self.byes: set[int] = set()
        self._cond = threading.Condition()
        self._sock = socket.create_server(address, reuse_port=False)
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()[:2]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, name=f"listener-{node_id}", daemon=True)

    def start(self) -> Listener:
        self._thread.start()
        return self

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)
        self._sock.close()

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn: socket.socket) -> None:
        with conn:
            try:
                conn.settimeout(30.0)
                frame = read_frame(conn, self.max_payload)
            except (WireError, OSError) as err:
                log.warning("node %d dropped a bad frame: %s", self.node_id, err)
                return
            echo = (frame.round_index, zlib.crc32(frame.payload))
            if self.ack_hook is not None:
                echo = self.ack_hook(*echo)
            with self._cond:
                if frame.msg_type == MsgType.MODEL_BUFFER:
                    # a resent duplicate simply overwrites the identical first copy
                    self._frames[frame.round_index] = frame
                elif frame.msg_type == MsgType.BYE:
                    self.byes.add(frame.sender_id)
                self._cond.notify_all()
            ack = encode_frame(Frame(MsgType.ACK, frame.round_index, self.node_id, ack_payload(*echo)))
            try:
                conn.sendall(ack)
            except OSError as err:
                log.warning("node %d could not ACK: %s", self.node_id, err)

    def wait_round(self, round_index: int, timeout: float) -> Frame:
        deadline = time.monotonic() + timeout
        with self._cond:
            while round_index not in self._frames:
                left = deadline - time.monotonic()
                if left <= 0:
                    raise PeerError(f"node {self.node_id}: no envelope for round {round_index} within {timeout}s")
                self._cond.wait(left)
            return self._frames.pop(round_index)

    def wait_byes(self, senders: set[int], timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        with self._cond:
            while not senders <= self.byes:
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._cond.wait(left)
            return True


def _connect(addr: Address, retries: int, backoff: float) -> socket.socket:
    last = None
    for attempt in range(retries):
        try:
            return socket.create_connection(addr, timeout=10.0)
        except OSError as err:
            last = err
            delay = backoff * 2 ** attempt
            log.info("connect to %s:%d failed (%s); retry %d/%d in %.2fs", *addr, err, attempt + 1, retries, delay)
            if attempt + 1 < retries:
                time.sleep(delay)
    raise PeerUnreachableError(f"peer {addr[0]}:{addr[1]} unreachable after {retries} attempts: {last}")


def send_frame(addr: Address, raw: bytes, cfg: PeerConfig) -> None:
    """Deliver one frame and check the ACK echo; one resend on timeout or mismatch."""
    frame = decode_frame(raw, cfg.max_payload)
    expect = (frame.round_index, zlib.crc32(frame.payload))
    problem = ""
    for attempt in range(2):
        sock = _connect(addr, cfg.retries, cfg.backoff)
        with sock:
            try:
                sock.sendall(raw)
                sock.settimeout(cfg.ack_timeout)
                ack = read_frame(sock, cfg.max_payload)
                if ack.msg_type != MsgType.ACK:
                    problem = f"expected ACK, got {ack.msg_type.name}"
                elif parse_ack(ack.payload) != expect:
                    problem = f"ACK echo {parse_ack(ack.payload)} != {expect}"
                else:
                    return
            except socket.timeout:
                problem = f"no ACK within {cfg.ack_timeout}s"
            except (WireError, OSError) as err:
                problem = str(err)
        log.warning("round %d frame to %s:%d: %s (attempt %d)", frame.round_index, *addr, problem, attempt + 1)
    raise AckTimeoutError(f"round {frame.round_index}: aborting after resend; {problem}")


class NodeHooks(Protocol):
    def initial(self) -> Envelope: ...

    def step(self, env: Envelope, t: int) -> Envelope: ...

    def received(self, env: Envelope, t: int) -> None: ...


class RingNode:
    """Engine hooks for one ring node, sharing the in-process update code."""

    def __init__(self, fd: FederationData, cfg: FedConfig, node_id: int, generators: dict | None = None):
        if cfg.variant not in ("standard", "model_only"):
            raise ValueError("networked mode runs the ring variants (standard, model_only)")
        self.ctx = _Context(fd, cfg, generators, None)
        self.node_id = node_id
        self.fd = fd

    @property
    def records(self) -> list[MetricsRecord]:
        return self.ctx.records

    def initial(self) -> Envelope:
        i = self.node_id
        return Envelope(self.ctx.init_model(i), self.ctx.spec, Buffer.empty(self.fd.sample_shape, i), i, 0, i)

    def step(self, env: Envelope, t: int) -> Envelope:
        ctx, i = self.ctx, self.node_id
        node = self.fd.nodes[i]
        params = ctx.train(env.model, node.train_x, node.train_y, env.buffer, t, i, node.augment)
        if ctx.cfg.forward_buffers and env.buffer.size:
            out_buf = env.buffer
        else:
            out_buf = ctx.own_buffer(i, t)
        return Envelope(params, ctx.spec, out_buf, i, t, env.model_id)

    def received(self, env: Envelope, t: int) -> None:
        self.ctx.evaluate_round(t, {self.node_id: env.model})


@dataclass
class SessionResult:
    node_id: int
    rounds: int
    wall_clock: float
    bye_from: list[int] = field(default_factory=list)


def peer_session(cfg: PeerConfig, hooks: NodeHooks, rounds: int, seed: int, n_nodes: int,
                 listener: Listener | None = None) -> SessionResult:
    """Run ``rounds`` rounds for one node, then say BYE to every peer."""
    start = time.perf_counter()
    own = listener or Listener(cfg.node_id, cfg.listen, cfg.max_payload).start()
    missing = set(range(n_nodes)) - {cfg.node_id} - set(cfg.peers)
    if missing:
        raise ValueError(f"no address for nodes {sorted(missing)}")
    try:
        env = hooks.initial()
        for t in range(1, rounds + 1):
            out = hooks.step(env, t)
            dest = plan_round(seed, t, n_nodes).successor(cfg.node_id)
            send_frame(cfg.peers[dest], envelope_frame(out, cfg.max_payload), cfg)
            env = frame_to_envelope(own.wait_round(t, cfg.recv_timeout))
            hooks.received(env, t)
        others = {j for j in range(n_nodes) if j != cfg.node_id}
        bye = encode_frame(Frame(MsgType.BYE, rounds, cfg.node_id, b""))
        for j in sorted(others):
            try:
                send_frame(cfg.peers[j], bye, cfg)
            except PeerError as err:
                log.warning("BYE to node %d failed: %s", j, err)
        # stay reachable until every peer is done sending
        if not own.wait_byes(others, cfg.recv_timeout):
            log.warning("node %d: missing BYE from %s", cfg.node_id, sorted(others - own.byes))
        return SessionResult(cfg.node_id, rounds, time.perf_counter() - start, sorted(own.byes))
    finally:
        if listener is None:
            own.close()
