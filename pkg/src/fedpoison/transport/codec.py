"""Frame and message codec for the server/client protocol.

Frame layout (little-endian)::

    magic  "FLPB"   4 bytes
    version         u16
    msg_type        u16
    payload_len     u32
    payload         payload_len bytes (<= 64 MiB)

Model payloads carry float64 parameters in canonical flat order so a model
survives the wire bit-for-bit.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from fedpoison.errors import ProtocolError

MAGIC = b"FLPB"
PROTOCOL_VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024
HEADER = struct.Struct("<4sHHI")


class MsgType(enum.IntEnum):
    JOIN = 1
    JOIN_ACK = 2
    GLOBAL_MODEL = 3
    CLIENT_UPDATE = 4
    ROUND_METRICS = 5
    SHUTDOWN = 6
    ERROR = 7


class UnknownMessage(ProtocolError):
    """A complete frame with an unrecognized type; the stream is still in sync."""

    def __init__(self, msg_type: int):
        super().__init__(f"unknown message type {msg_type}")
        self.msg_type = msg_type


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes = b""
    version: int = PROTOCOL_VERSION


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, frame.version, int(frame.msg_type), len(frame.payload)) + frame.payload


def decode_frame(buf) -> tuple[Frame | None, int]:
    """Decode the first frame in ``buf``.

    Returns ``(frame, bytes_consumed)``, or ``(None, 0)`` when ``buf`` does not
    yet hold a complete frame. Bad magic or an oversize length raise.
    """
    buf = memoryview(buf)
    if len(buf) < HEADER.size:
        if len(buf) >= 4 and bytes(buf[:4]) != MAGIC:
            raise ProtocolError(f"bad magic {bytes(buf[:4])!r}")
        return None, 0
    magic, version, msg_type, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds {MAX_PAYLOAD}")
    end = HEADER.size + length
    if len(buf) < end:
        return None, 0
    return Frame(msg_type, bytes(buf[HEADER.size : end]), version), end


# -- messages -------------------------------------------------------------


def _f64(params) -> np.ndarray:
    arr = np.ascontiguousarray(params, dtype="<f8").ravel()
    if not np.all(np.isfinite(arr)):
        raise ProtocolError("model parameters must be finite")
    return arr


@dataclass(frozen=True)
class Join:
    client_id: int


@dataclass(frozen=True)
class JoinAck:
    """Shard assignment. ``info`` is JSON; ``blob`` optionally carries shard data."""

    info: dict = field(default_factory=dict)
    blob: bytes = b""


@dataclass(frozen=True, eq=False)
class GlobalModel:
    round: int
    params: np.ndarray
    client_id: int = 0

    def __eq__(self, other):
        return (
            isinstance(other, GlobalModel)
            and (self.round, self.client_id) == (other.round, other.client_id)
            and _f64(self.params).tobytes() == _f64(other.params).tobytes()
        )


@dataclass(frozen=True, eq=False)
class ClientUpdateMsg:
    round: int
    params: np.ndarray
    n_samples: int
    client_id: int

    def __eq__(self, other):
        return (
            isinstance(other, ClientUpdateMsg)
            and (self.round, self.n_samples, self.client_id) == (other.round, other.n_samples, other.client_id)
            and _f64(self.params).tobytes() == _f64(other.params).tobytes()
        )


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    client_id: int
    loss: float
    accuracy: float
    f1: float
    epochs_run: int
    n_samples: int


@dataclass(frozen=True)
class Shutdown:
    pass


@dataclass(frozen=True)
class Error:
    code: int
    message: str = ""


class ErrorCode(enum.IntEnum):
    UNKNOWN_MESSAGE = 1
    DUPLICATE_CLIENT = 2
    BAD_CLIENT_ID = 3
    UNEXPECTED = 4
    ABORTED = 5


_U32 = struct.Struct("<I")
_MODEL_HEAD = struct.Struct("<IQ")
_METRICS = struct.Struct("<IIdddIQ")
_ERROR = struct.Struct("<H")


def _pack_model(round_: int, params, tail: bytes) -> bytes:
    arr = _f64(params)
    return _MODEL_HEAD.pack(round_, arr.size) + arr.tobytes() + tail


def _unpack_model(payload: bytes, tail_size: int) -> tuple[int, np.ndarray, bytes]:
    if len(payload) < _MODEL_HEAD.size:
        raise ProtocolError("truncated model payload")
    round_, count = _MODEL_HEAD.unpack_from(payload)
    end = _MODEL_HEAD.size + 8 * count
    if len(payload) != end + tail_size:
        raise ProtocolError(f"model payload length {len(payload)} does not match param_count {count}")
    params = np.frombuffer(payload, dtype="<f8", count=count, offset=_MODEL_HEAD.size).astype(np.float64)
    if not np.all(np.isfinite(params)):
        raise ProtocolError("non-finite parameters on the wire")
    return round_, params, payload[end:]


def to_frame(msg) -> Frame:
    if isinstance(msg, Join):
        return Frame(MsgType.JOIN, _U32.pack(msg.client_id))
    if isinstance(msg, JoinAck):
        head = json.dumps(msg.info, sort_keys=True).encode("utf-8")
        return Frame(MsgType.JOIN_ACK, _U32.pack(len(head)) + head + msg.blob)
    if isinstance(msg, GlobalModel):
        return Frame(MsgType.GLOBAL_MODEL, _pack_model(msg.round, msg.params, _U32.pack(msg.client_id)))
    if isinstance(msg, ClientUpdateMsg):
        tail = struct.pack("<QI", msg.n_samples, msg.client_id)
        return Frame(MsgType.CLIENT_UPDATE, _pack_model(msg.round, msg.params, tail))
    if isinstance(msg, RoundMetrics):
        return Frame(
            MsgType.ROUND_METRICS,
            _METRICS.pack(msg.round, msg.client_id, msg.loss, msg.accuracy, msg.f1, msg.epochs_run, msg.n_samples),
        )
    if isinstance(msg, Shutdown):
        return Frame(MsgType.SHUTDOWN)
    if isinstance(msg, Error):
        return Frame(MsgType.ERROR, _ERROR.pack(msg.code) + msg.message.encode("utf-8"))
    raise TypeError(f"not a protocol message: {msg!r}")


def from_frame(frame: Frame):
    p = frame.payload
    try:
        t = MsgType(frame.msg_type)
    except ValueError:
        raise UnknownMessage(frame.msg_type) from None
    try:
        if t is MsgType.JOIN:
            (cid,) = _U32.unpack(p)
            return Join(cid)
        if t is MsgType.JOIN_ACK:
            (n,) = _U32.unpack_from(p)
            info = json.loads(p[4 : 4 + n].decode("utf-8"))
            return JoinAck(info, p[4 + n :])
        if t is MsgType.GLOBAL_MODEL:
            r, params, tail = _unpack_model(p, 4)
            return GlobalModel(r, params, _U32.unpack(tail)[0])
        if t is MsgType.CLIENT_UPDATE:
            r, params, tail = _unpack_model(p, 12)
            n_samples, cid = struct.unpack("<QI", tail)
            return ClientUpdateMsg(r, params, n_samples, cid)
        if t is MsgType.ROUND_METRICS:
            return RoundMetrics(*_METRICS.unpack(p))
        if t is MsgType.SHUTDOWN:
            if p:
                raise ProtocolError("SHUTDOWN carries no payload")
            return Shutdown()
        (code,) = _ERROR.unpack_from(p)
        return Error(code, p[_ERROR.size :].decode("utf-8", errors="replace"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed {t.name} payload: {exc}") from exc


def encode_message(msg, version: int = PROTOCOL_VERSION) -> bytes:
    frame = to_frame(msg)
    return encode_frame(Frame(frame.msg_type, frame.payload, version))


def decode_message(buf):
    """``(message, version, consumed)`` or ``(None, None, 0)`` if incomplete."""
    frame, used = decode_frame(buf)
    if frame is None:
        return None, None, 0
    return from_frame(frame), frame.version, used


def pack_shard(X: np.ndarray, y: np.ndarray) -> bytes:
    X = np.ascontiguousarray(X, dtype="<f8")
    head = struct.pack("<QQ", X.shape[0], X.shape[1])
    return head + X.tobytes() + np.ascontiguousarray(y, dtype="<i4").tobytes()


def unpack_shard(blob: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) < 16:
        raise ProtocolError("shard blob is truncated")
    n, d = struct.unpack_from("<QQ", blob)
    off = 16
    if len(blob) != off + 8 * n * d + 4 * n:
        raise ProtocolError("shard blob has the wrong length")
    X = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    y = np.frombuffer(blob, dtype="<i4", count=n, offset=off + 8 * n * d).astype(np.int64)
    return X, y


# -- socket helpers ---------------------------------------------------------


def recv_exact(sock, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed by peer")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def recv_frame(sock) -> Frame:
    head = recv_exact(sock, HEADER.size)
    magic, version, msg_type, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds {MAX_PAYLOAD}")
    return Frame(msg_type, recv_exact(sock, length), version)


def send_message(sock, msg, version: int = PROTOCOL_VERSION) -> None:
    sock.sendall(encode_message(msg, version))
