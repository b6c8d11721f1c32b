from .wire import (
    CrcError,
    Frame,
    MsgType,
    OversizeError,
    TruncatedError,
    VersionError,
    WireError,
    decode_envelope,
    decode_frame,
    encode_envelope,
    encode_frame,
)

__all__ = [
    "CrcError",
    "Frame",
    "MsgType",
    "OversizeError",
    "TruncatedError",
    "VersionError",
    "WireError",
    "decode_envelope",
    "decode_frame",
    "encode_envelope",
    "encode_frame",
]
