"""Framed master/worker messages.

Every message is one frame (big-endian u32 length + payload). The payload
starts with the protocol version byte and the message type byte, followed by
a little-endian body. Spatiotemporal objects inside bodies use the codec's
encodings, each prefixed by its i64 record index.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .. import codec
from ..codec import DecodeError
from ..estimator import DistanceGrid, EstimatorOptions
from ..geometry import StudyRegion, TemporalUnit

__all__ = [
    "PROTOCOL_VERSION",
    "MsgType",
    "Hello",
    "PartitionerMsg",
    "PointBatch",
    "CylinderBatch",
    "Compute",
    "Partial",
    "Done",
    "ErrorMsg",
    "encode_message",
    "decode_message",
    "job_config",
    "parse_job_config",
    "Channel",
]

PROTOCOL_VERSION = 0x01
MAX_FRAME = 1 << 31

_HEAD = struct.Struct("<BB")
_U32 = struct.Struct("<I")
_BATCH = struct.Struct("<II")
_COMPUTE = struct.Struct("<IIi")
_PARTIAL = struct.Struct("<IIHH")


class MsgType(IntEnum):
    HELLO = 1
    PARTITIONER = 2
    POINT_BATCH = 3
    CYLINDER_BATCH = 4
    COMPUTE = 5
    PARTIAL = 6
    DONE = 7
    ERROR = 8


@dataclass
class Hello:
    """Handshake; ``pid`` identifies the sending process."""

    pid: int = 0
    kind = MsgType.HELLO


@dataclass
class PartitionerMsg:
    """Encoded partition tree (empty for hash partitioning) plus job config."""

    tree: bytes
    config: dict
    kind = MsgType.PARTITIONER


@dataclass
class PointBatch:
    task_key: int
    xy: np.ndarray
    t: np.ndarray
    records: np.ndarray
    kind = MsgType.POINT_BATCH


@dataclass
class CylinderBatch:
    task_key: int
    xy: np.ndarray
    t: np.ndarray
    records: np.ndarray
    spatial_radius: float
    temporal_radius: int
    unit: TemporalUnit = TemporalUnit.DAYS
    kind = MsgType.CYLINDER_BATCH


@dataclass
class Compute:
    task_key: int
    partition_id: int
    replicate: int
    kind = MsgType.COMPUTE


@dataclass
class Partial:
    task_key: int
    partition_id: int
    hist: np.ndarray
    telemetry: dict = field(default_factory=dict)
    kind = MsgType.PARTIAL


@dataclass
class Done:
    info: dict = field(default_factory=dict)
    kind = MsgType.DONE


@dataclass
class ErrorMsg:
    message: str
    kind = MsgType.ERROR


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _unjson(buf: bytes, offset: int):
    try:
        return json.loads(bytes(buf).decode()) if len(buf) else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"invalid JSON body: {exc}", offset) from None


def encode_message(msg) -> bytes:
    """Message payload (unframed)."""
    head = _HEAD.pack(PROTOCOL_VERSION, int(msg.kind))
    if isinstance(msg, Hello):
        body = _U32.pack(msg.pid)
    elif isinstance(msg, PartitionerMsg):
        body = _U32.pack(len(msg.tree)) + msg.tree + _json(msg.config)
    elif isinstance(msg, PointBatch):
        body = _BATCH.pack(msg.task_key, len(msg.t)) + codec.encode_point_records(msg.xy, msg.t, msg.records)
    elif isinstance(msg, CylinderBatch):
        body = _BATCH.pack(msg.task_key, len(msg.t)) + codec.encode_cylinder_records(
            msg.xy, msg.t, msg.records, msg.spatial_radius, msg.temporal_radius, msg.unit)
    elif isinstance(msg, Compute):
        body = _COMPUTE.pack(msg.task_key, msg.partition_id, msg.replicate)
    elif isinstance(msg, Partial):
        hist = np.ascontiguousarray(msg.hist, dtype="<f8")
        cs, ct = hist.shape
        body = _PARTIAL.pack(msg.task_key, msg.partition_id, cs, ct) + hist.tobytes() + _json(msg.telemetry)
    elif isinstance(msg, Done):
        body = _json(msg.info)
    elif isinstance(msg, ErrorMsg):
        body = msg.message.encode()
    else:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    return head + body


def _need(buf, offset: int, size: int, what: str) -> None:
    if len(buf) - offset < size:
        raise DecodeError(f"truncated {what}", offset)


def decode_message(payload):
    """Inverse of :func:`encode_message`; malformed input raises DecodeError."""
    buf = memoryview(bytes(payload))
    _need(buf, 0, _HEAD.size, "message header")
    version, kind = _HEAD.unpack_from(buf, 0)
    if version != PROTOCOL_VERSION:
        raise DecodeError(f"unsupported protocol version {version}", 0)
    pos = _HEAD.size
    if kind == MsgType.HELLO:
        _need(buf, pos, 4, "hello")
        if len(buf) != pos + 4:
            raise DecodeError("trailing bytes after hello", pos + 4)
        return Hello(_U32.unpack_from(buf, pos)[0])
    if kind == MsgType.PARTITIONER:
        _need(buf, pos, 4, "tree length")
        (n,) = _U32.unpack_from(buf, pos)
        pos += 4
        _need(buf, pos, n, "partition tree")
        tree = bytes(buf[pos:pos + n])
        return PartitionerMsg(tree, _unjson(buf[pos + n:], pos + n))
    if kind in (MsgType.POINT_BATCH, MsgType.CYLINDER_BATCH):
        _need(buf, pos, _BATCH.size, "batch header")
        key, count = _BATCH.unpack_from(buf, pos)
        pos += _BATCH.size
        rec = codec.POINT_RECORD if kind == MsgType.POINT_BATCH else codec.CYLINDER_RECORD
        if len(buf) - pos != count * rec.itemsize:
            raise DecodeError(f"batch declares {count} records, body has {len(buf) - pos} bytes", pos)
        if kind == MsgType.POINT_BATCH:
            xy, t, ids = codec.decode_point_records(buf, pos, count)
            return PointBatch(key, xy, t, ids)
        xy, t, ids, s, u = codec.decode_cylinder_records(buf, pos, count)
        unit = TemporalUnit(int(np.frombuffer(buf, dtype=rec, count=count, offset=pos)["temporal_unit"][0])) \
            if count else TemporalUnit.DAYS
        return CylinderBatch(key, xy, t, ids, float(s[0]) if count else 0.0, int(u[0]) if count else 0, unit)
    if kind == MsgType.COMPUTE:
        if len(buf) != pos + _COMPUTE.size:
            raise DecodeError("compute body has wrong size", pos)
        return Compute(*_COMPUTE.unpack_from(buf, pos))
    if kind == MsgType.PARTIAL:
        _need(buf, pos, _PARTIAL.size, "partial header")
        key, part, cs, ct = _PARTIAL.unpack_from(buf, pos)
        pos += _PARTIAL.size
        _need(buf, pos, 8 * cs * ct, "partial histogram")
        hist = np.frombuffer(buf, dtype="<f8", count=cs * ct, offset=pos).reshape(cs, ct).astype(np.float64)
        pos += 8 * cs * ct
        return Partial(key, part, hist, _unjson(buf[pos:], pos))
    if kind == MsgType.DONE:
        return Done(_unjson(buf[pos:], pos))
    if kind == MsgType.ERROR:
        try:
            return ErrorMsg(bytes(buf[pos:]).decode())
        except UnicodeDecodeError:
            raise DecodeError("error text is not UTF-8", pos) from None
    raise DecodeError(f"unknown message type {kind}", 1)


# -- job configuration -------------------------------------------------------


def job_config(region: StudyRegion, grid: DistanceGrid, options: EstimatorOptions,
               unit: TemporalUnit = TemporalUnit.DAYS) -> dict:
    """JSON-safe description of everything a worker needs besides the data."""
    return {
        "boundary": region.boundary.tolist(),
        "period": [region.period_start, region.period_end],
        "s": grid.s_values.tolist(),
        "t": grid.t_values.tolist(),
        "use_index": options.use_index,
        "use_cache": options.use_cache,
        "coord_tolerance": options.coord_tolerance,
        "dist_tolerance": options.dist_tolerance,
        "node_capacity": options.node_capacity,
        "temporal_unit": int(unit),
    }


def parse_job_config(cfg: dict):
    """``(region, grid, options, unit)`` from :func:`job_config` output."""
    region = StudyRegion(np.asarray(cfg["boundary"], dtype=np.float64), *cfg["period"])
    grid = DistanceGrid(cfg["s"], cfg["t"])
    options = EstimatorOptions(
        bool(cfg["use_index"]), bool(cfg["use_cache"]),
        float(cfg["coord_tolerance"]), float(cfg["dist_tolerance"]), int(cfg["node_capacity"]),
    )
    return region, grid, options, TemporalUnit(int(cfg["temporal_unit"]))


# -- socket channel -----------------------------------------------------------


class Channel:
    """Blocking framed message channel over a stream socket.

    ``log`` (a list), when given, receives every payload sent or received as
    ``(direction, payload)`` tuples.
    """

    def __init__(self, sock: socket.socket, log: list | None = None):
        self.sock = sock
        self.log = log
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, msg) -> None:
        payload = encode_message(msg)
        data = codec.frame(payload)
        self.sock.sendall(data)
        self.bytes_sent += len(data)
        if self.log is not None:
            self.log.append(("send", payload))

    def _read_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            chunk = self.sock.recv(min(n - got, 1 << 20))
            if not chunk:
                raise ConnectionError("connection closed by peer")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self):
        head = self._read_exact(4)
        (length,) = struct.unpack(">I", head)
        if length > MAX_FRAME:
            raise DecodeError(f"frame of {length} bytes exceeds limit", 0)
        payload = self._read_exact(length)
        self.bytes_received += 4 + length
        if self.log is not None:
            self.log.append(("recv", payload))
        return decode_message(payload)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
