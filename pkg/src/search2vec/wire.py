"""Binary wire protocol for column-partitioned distributed training.

Only ids and scalars ever cross the wire; vectors stay on their shards.

Framing (all little-endian)::

    u32 length | u8 type | payload          (length counts type + payload)

Message types and payload layouts:

``REQ = 1`` minibatch request, client -> every shard::

    u64 batch_id
    u32 n_pairs, then per pair: u32 center_id | u32 context_id | f64 weight | u8 label
    u32 negative_count
    u64 rng_seed

``PART = 2`` partial dot products, shard -> client::

    u64 batch_id | u32 shard_id | u32 n_pairs | f64 x n_pairs

    Pair order is canonical: request pairs in request order, then
    sampled negatives in sampling order (negative_count draws per
    positive-label pair, iterated in request order).

``COEF = 3`` coefficient broadcast, client -> every shard::

    u64 batch_id | u32 n_pairs | f64 x n_pairs

``CTRL = 4`` control plane; payload starts with a u8 opcode::

    ERROR = 0:         u64 batch_id | u32 byte_len | utf-8 message
    ALLOC = 1:         u64 count            (reserve global pair indices)
    ALLOC_RESULT = 2:  u64 start
    FETCH_SLICE = 3:   (empty)
    SLICE_DATA = 4:    u32 rows | u32 width | f64 input block | f64 output block
    ACK = 5:           u64 batch_id
    SHUTDOWN = 6:      (empty)

The rng_seed drives the SplitMix64 generator (see ``prng``); every shard
derives the identical negative-sample sequence from it, which is what
lets the request stay vector- and sample-free. Labels are 1 = positive,
0 = sampled negative, 2 = implicit negative.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np

from .trainer import PairBatch

MSG_REQUEST = 1
MSG_PARTIAL = 2
MSG_COEFFICIENTS = 3
MSG_CONTROL = 4

CTRL_ERROR = 0
CTRL_ALLOC = 1
CTRL_ALLOC_RESULT = 2
CTRL_FETCH_SLICE = 3
CTRL_SLICE_DATA = 4
CTRL_ACK = 5
CTRL_SHUTDOWN = 6

_PAIR_DTYPE = np.dtype(
    [("center", "<u4"), ("context", "<u4"), ("weight", "<f8"), ("label", "u1")]
)

_HEADER = struct.Struct("<IB")


class ProtocolError(RuntimeError):
    """Malformed frame or a CTRL error response."""


class TransportError(RuntimeError):
    """Message delivery failed (timeout, closed connection)."""


@dataclass
class MinibatchRequest:
    batch_id: int
    pairs: PairBatch
    negative_count: int
    rng_seed: int


@dataclass
class PartialDotsResponse:
    batch_id: int
    shard_id: int
    dots: np.ndarray


@dataclass
class CoefficientBroadcast:
    batch_id: int
    coefficients: np.ndarray


@dataclass
class ControlError:
    batch_id: int
    message: str


@dataclass
class AllocRequest:
    count: int


@dataclass
class AllocResult:
    start: int


@dataclass
class FetchSlice:
    pass


@dataclass
class SliceData:
    input_block: np.ndarray
    output_block: np.ndarray


@dataclass
class Ack:
    batch_id: int


@dataclass
class Shutdown:
    pass


Message = (
    MinibatchRequest
    | PartialDotsResponse
    | CoefficientBroadcast
    | ControlError
    | AllocRequest
    | AllocResult
    | FetchSlice
    | SliceData
    | Ack
    | Shutdown
)


def _encode_pairs(batch: PairBatch) -> bytes:
    records = np.empty(len(batch), dtype=_PAIR_DTYPE)
    records["center"] = batch.centers
    records["context"] = batch.contexts
    records["weight"] = batch.weights
    records["label"] = batch.labels
    return struct.pack("<I", len(batch)) + records.tobytes()


def _decode_pairs(payload: bytes, offset: int) -> tuple[PairBatch, int]:
    (count,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    records = np.frombuffer(payload, dtype=_PAIR_DTYPE, count=count, offset=offset)
    offset += count * _PAIR_DTYPE.itemsize
    batch = PairBatch(
        records["center"].astype(np.int64),
        records["context"].astype(np.int64),
        records["label"].copy(),
        records["weight"].astype(np.float64),
    )
    return batch, offset


def _f64_block(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def encode_message(message: Message) -> bytes:
    if isinstance(message, MinibatchRequest):
        payload = (
            struct.pack("<Q", message.batch_id)
            + _encode_pairs(message.pairs)
            + struct.pack("<IQ", message.negative_count, message.rng_seed)
        )
        kind = MSG_REQUEST
    elif isinstance(message, PartialDotsResponse):
        payload = (
            struct.pack("<QII", message.batch_id, message.shard_id, len(message.dots))
            + _f64_block(message.dots)
        )
        kind = MSG_PARTIAL
    elif isinstance(message, CoefficientBroadcast):
        payload = (
            struct.pack("<QI", message.batch_id, len(message.coefficients))
            + _f64_block(message.coefficients)
        )
        kind = MSG_COEFFICIENTS
    elif isinstance(message, ControlError):
        text = message.message.encode("utf-8")
        payload = struct.pack("<BQI", CTRL_ERROR, message.batch_id, len(text)) + text
        kind = MSG_CONTROL
    elif isinstance(message, AllocRequest):
        payload = struct.pack("<BQ", CTRL_ALLOC, message.count)
        kind = MSG_CONTROL
    elif isinstance(message, AllocResult):
        payload = struct.pack("<BQ", CTRL_ALLOC_RESULT, message.start)
        kind = MSG_CONTROL
    elif isinstance(message, FetchSlice):
        payload = struct.pack("<B", CTRL_FETCH_SLICE)
        kind = MSG_CONTROL
    elif isinstance(message, SliceData):
        rows, width = message.input_block.shape
        payload = (
            struct.pack("<BII", CTRL_SLICE_DATA, rows, width)
            + _f64_block(message.input_block)
            + _f64_block(message.output_block)
        )
        kind = MSG_CONTROL
    elif isinstance(message, Ack):
        payload = struct.pack("<BQ", CTRL_ACK, message.batch_id)
        kind = MSG_CONTROL
    elif isinstance(message, Shutdown):
        payload = struct.pack("<B", CTRL_SHUTDOWN)
        kind = MSG_CONTROL
    else:
        raise ProtocolError(f"cannot encode {type(message).__name__}")
    return _HEADER.pack(len(payload) + 1, kind) + payload


def decode_message(kind: int, payload: bytes) -> Message:
    if kind == MSG_REQUEST:
        (batch_id,) = struct.unpack_from("<Q", payload, 0)
        pairs, offset = _decode_pairs(payload, 8)
        negative_count, rng_seed = struct.unpack_from("<IQ", payload, offset)
        return MinibatchRequest(batch_id, pairs, negative_count, rng_seed)
    if kind == MSG_PARTIAL:
        batch_id, shard_id, count = struct.unpack_from("<QII", payload, 0)
        dots = np.frombuffer(payload, dtype="<f8", count=count, offset=16).copy()
        return PartialDotsResponse(batch_id, shard_id, dots)
    if kind == MSG_COEFFICIENTS:
        batch_id, count = struct.unpack_from("<QI", payload, 0)
        coefficients = np.frombuffer(payload, dtype="<f8", count=count, offset=12).copy()
        return CoefficientBroadcast(batch_id, coefficients)
    if kind == MSG_CONTROL:
        opcode = payload[0]
        if opcode == CTRL_ERROR:
            batch_id, length = struct.unpack_from("<QI", payload, 1)
            return ControlError(batch_id, payload[13 : 13 + length].decode("utf-8"))
        if opcode == CTRL_ALLOC:
            (count,) = struct.unpack_from("<Q", payload, 1)
            return AllocRequest(count)
        if opcode == CTRL_ALLOC_RESULT:
            (start,) = struct.unpack_from("<Q", payload, 1)
            return AllocResult(start)
        if opcode == CTRL_FETCH_SLICE:
            return FetchSlice()
        if opcode == CTRL_SLICE_DATA:
            rows, width = struct.unpack_from("<II", payload, 1)
            block = rows * width * 8
            inputs = np.frombuffer(payload, "<f8", rows * width, offset=9)
            outputs = np.frombuffer(payload, "<f8", rows * width, offset=9 + block)
            return SliceData(
                inputs.reshape(rows, width).copy(), outputs.reshape(rows, width).copy()
            )
        if opcode == CTRL_ACK:
            (batch_id,) = struct.unpack_from("<Q", payload, 1)
            return Ack(batch_id)
        if opcode == CTRL_SHUTDOWN:
            return Shutdown()
        raise ProtocolError(f"unknown control opcode {opcode}")
    raise ProtocolError(f"unknown message type {kind}")


def decode_frame(frame: bytes) -> Message:
    """Decode one full frame (header included)."""
    if len(frame) < _HEADER.size:
        raise ProtocolError("truncated frame")
    length, kind = _HEADER.unpack_from(frame, 0)
    if len(frame) != 4 + length:
        raise ProtocolError(f"frame length mismatch: header {length}, got {len(frame) - 4}")
    return decode_message(kind, frame[_HEADER.size:])


def frame_type(frame: bytes) -> int:
    return frame[4]


class ByteCounter:
    """Per-message-type byte accounting for the transport layer.

    Training traffic is REQ/PART/COEF; CTRL is the administrative plane
    (counter allocation, epoch-end slice fetch) and is tracked separately.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.messages: dict[int, int] = {}
        self.bytes: dict[int, int] = {}

    def record(self, frame: bytes) -> None:
        kind = frame_type(frame)
        with self._lock:
            self.messages[kind] = self.messages.get(kind, 0) + 1
            self.bytes[kind] = self.bytes.get(kind, 0) + len(frame)

    def training_traffic(self) -> dict[int, int]:
        """Bytes by type for the per-batch training messages."""
        with self._lock:
            return {
                kind: self.bytes.get(kind, 0)
                for kind in (MSG_REQUEST, MSG_PARTIAL, MSG_COEFFICIENTS)
            }

    def total_bytes(self) -> int:
        with self._lock:
            return sum(self.bytes.values())
