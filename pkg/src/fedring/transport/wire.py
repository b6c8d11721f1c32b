"""Binary wire format: ParamVectors, envelopes and frames.

All integers and floats are little-endian. A frame is

    magic "FDR1" | u8 msg_type | u32 round | u16 sender | u64 payload_len
    | payload | u32 crc32(payload)

and the MODEL_BUFFER payload is

    u8 payload_version | u16 model_id | u16 buffer_origin
    | u16 spec_len | spec json | u64 param_count | f32 params
    | u32 buffer_count | u8 ndim | u16 dims... | (u16 label, f32 sample)...

A model-less envelope (buffer-only sharing) has spec_len = 0 and
param_count = 0.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from math import prod

import numpy as np

from ..numerics import ParamVector

FRAME_MAGIC = b"FDR1"
PAYLOAD_VERSION = 1
FRAME_HEADER = struct.Struct("<4sBIHQ")
CRC = struct.Struct("<I")
DEFAULT_MAX_PAYLOAD = 256 * 1024 * 1024


class MsgType(IntEnum):
    MODEL_BUFFER = 1
    ACK = 2
    BYE = 3


class WireError(ValueError):
    pass


class CrcError(WireError):
    pass


class TruncatedError(WireError):
    pass


class VersionError(WireError):
    pass


class OversizeError(WireError):
    pass


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    round_index: int
    sender_id: int
    payload: bytes

    @property
    def crc(self) -> int:
        return zlib.crc32(self.payload)


def encode_frame(frame: Frame, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    if len(frame.payload) > max_payload:
        raise OversizeError(f"payload of {len(frame.payload)} bytes exceeds {max_payload}")
    header = FRAME_HEADER.pack(FRAME_MAGIC, int(frame.msg_type), frame.round_index, frame.sender_id, len(frame.payload))
    return header + frame.payload + CRC.pack(zlib.crc32(frame.payload))


def parse_frame_header(header: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> tuple[MsgType, int, int, int]:
    if len(header) < FRAME_HEADER.size:
        raise TruncatedError("truncated frame header")
    magic, msg_type, round_index, sender, length = FRAME_HEADER.unpack(header[:FRAME_HEADER.size])
    if magic != FRAME_MAGIC:
        if magic[:3] == FRAME_MAGIC[:3]:
            raise VersionError(f"unsupported frame version {magic!r}")
        raise WireError(f"bad frame magic {magic!r}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise WireError(f"unknown msg_type {msg_type}") from None
    if length > max_payload:
        raise OversizeError(f"payload_len {length} exceeds {max_payload}")
    return msg_type, round_index, sender, length


def decode_frame(data: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Frame:
    msg_type, round_index, sender, length = parse_frame_header(data, max_payload)
    end = FRAME_HEADER.size + length
    if len(data) < end + CRC.size:
        raise TruncatedError(f"frame needs {end + CRC.size} bytes, got {len(data)}")
    if len(data) > end + CRC.size:
        raise WireError("trailing bytes after frame")
    payload = data[FRAME_HEADER.size:end]
    (crc,) = CRC.unpack(data[end:end + CRC.size])
    if zlib.crc32(payload) != crc:
        raise CrcError("frame crc mismatch")
    return Frame(msg_type, round_index, sender, payload)


# param vectors -----------------------------------------------------------


def encode_params(params: ParamVector) -> bytes:
    """u32 tensor count, per tensor (u16 name_len, name, u8 ndim, u32 dims), u64 count, f32 values."""
    out = [struct.pack("<I", len(params.layout))]
    for name, shape, _ in params.layout:
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
    out.append(struct.pack("<Q", len(params)))
    out.append(np.ascontiguousarray(params.values, dtype="<f4").tobytes())
    return b"".join(out)


class Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data, self.pos = data, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError("unexpected end of payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def decode_params(reader: Reader) -> ParamVector:
    from ..numerics.params import make_layout

    (n_tensors,) = reader.unpack("<I")
    shapes = []
    for _ in range(n_tensors):
        (nlen,) = reader.unpack("<H")
        name = reader.take(nlen).decode()
        (ndim,) = reader.unpack("<B")
        shapes.append((name, reader.unpack(f"<{ndim}I")))
    (count,) = reader.unpack("<Q")
    return ParamVector(reader.floats(count), make_layout(shapes))


# envelopes ---------------------------------------------------------------

ENVELOPE_FIXED = struct.Struct("<BHHH")


def encode_envelope(env) -> bytes:
    """Payload bytes for an Envelope (deterministic)."""
    spec = env.spec.to_json().encode() if env.model is not None else b""
    values = env.model.values if env.model is not None else np.zeros(0, np.float32)
    buf = env.buffer
    shape = tuple(buf.x.shape[1:])
    parts = [
        ENVELOPE_FIXED.pack(PAYLOAD_VERSION, env.model_id, buf.origin_node, len(spec)),
        spec,
        struct.pack("<Q", values.size),
        np.ascontiguousarray(values, dtype="<f4").tobytes(),
        struct.pack("<IB", buf.size, len(shape)),
        struct.pack(f"<{len(shape)}H", *shape),
    ]
    if buf.size:
        labels = np.ascontiguousarray(buf.y, dtype="<u2").reshape(-1, 1).view(np.uint8)
        samples = np.ascontiguousarray(buf.x, dtype="<f4").reshape(buf.size, -1).view(np.uint8)
        parts.append(np.concatenate([labels, samples], axis=1).tobytes())
    return b"".join(parts)


def envelope_overhead(spec, buffer_count: int = 0, sample_shape=(2,)) -> int:
    """Payload bytes excluding the f32 parameter block."""
    spec_len = len(spec.to_json().encode()) if spec is not None else 0
    per_entry = 2 + 4 * prod(sample_shape)
    return ENVELOPE_FIXED.size + spec_len + 8 + 5 + 2 * len(sample_shape) + buffer_count * per_entry


def decode_envelope(payload: bytes, sender: int = 0, round_index: int = 0):
    from ..models import ModelSpec
    from ..pp_gan import Buffer
    from ..federation.engine import Envelope

    r = Reader(payload)
    version, model_id, origin, spec_len = r.unpack(ENVELOPE_FIXED.format)
    if version != PAYLOAD_VERSION:
        raise VersionError(f"unsupported payload version {version}")
    spec = ModelSpec.from_json(r.take(spec_len).decode()) if spec_len else None
    (count,) = r.unpack("<Q")
    values = r.floats(count)
    if spec is None and count:
        raise WireError("parameters without a model spec")
    model = None
    if spec is not None:
        model = ParamVector(values, spec.layout)
    n_entries, ndim = r.unpack("<IB")
    shape = r.unpack(f"<{ndim}H")
    width = 2 + 4 * prod(shape)
    raw = np.frombuffer(r.take(n_entries * width), dtype=np.uint8).reshape(n_entries, width)
    y = raw[:, :2].copy().view("<u2").reshape(-1).astype(np.int64)
    x = raw[:, 2:].copy().view("<f4").astype(np.float32).reshape((n_entries,) + tuple(shape))
    if r.pos != len(payload):
        raise WireError("trailing bytes in envelope payload")
    return Envelope(model=model, spec=spec, buffer=Buffer(x, y, origin), sender=sender,
                    round_index=round_index, model_id=model_id)


def envelope_frame(env, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    return encode_frame(Frame(MsgType.MODEL_BUFFER, env.round_index, env.sender, encode_envelope(env)), max_payload)


def frame_to_envelope(frame: Frame):
    if frame.msg_type != MsgType.MODEL_BUFFER:
        raise WireError(f"expected MODEL_BUFFER, got {frame.msg_type.name}")
    return decode_envelope(frame.payload, frame.sender_id, frame.round_index)


def ack_payload(round_index: int, crc: int) -> bytes:
    return struct.pack("<II", round_index, crc)


def parse_ack(payload: bytes) -> tuple[int, int]:
    if len(payload) != 8:
        raise WireError("malformed ACK payload")
    return struct.unpack("<II", payload)
