"""Compact binary encoding of spatiotemporal objects and indexes.

Every object starts with a one-byte type id followed by its field values
only (little-endian). Trees are written depth first. ``frame``/``unframe``
add a 4-byte big-endian length prefix for stream transport. The normative
byte layout is documented in ``docs/format.md``.
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import GeometryError, STCylinder, STEnvelope, STPoint, TemporalUnit
from .partitioner import KDBNode, KDBPartitioner
from .st_index import Node, STRTree

__all__ = [
    "TypeId",
    "DecodeError",
    "POINT_SIZE",
    "CYLINDER_SIZE",
    "ENVELOPE_SIZE",
    "encode_point",
    "decode_point",
    "encode_cylinder",
    "decode_cylinder",
    "encode_envelope",
    "decode_envelope",
    "encode_tree",
    "decode_tree",
    "encode",
    "decode",
    "frame",
    "unframe",
    "read_frame",
    "POINT_RECORD",
    "CYLINDER_RECORD",
    "encode_point_records",
    "decode_point_records",
    "encode_cylinder_records",
    "decode_cylinder_records",
]


class TypeId:
    POINT = 0x01
    CYLINDER = 0x02
    ENVELOPE = 0x03
    STR_TREE = 0x10
    KDB_TREE = 0x11


class DecodeError(ValueError):
    """Malformed input; ``offset`` is the byte position where decoding failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


_POINT = struct.Struct("<ddIqqi")
_CYL_TAIL = struct.Struct("<dqB")
_ENV = struct.Struct("<ddddqqiq")
_TREE_HEAD = struct.Struct("<I")
_NODE_HEAD = struct.Struct("<BH")
_SPLIT_F = struct.Struct("<Bd")
_SPLIT_I = struct.Struct("<Bq")
_FRAME = struct.Struct(">I")

POINT_SIZE = 1 + _POINT.size  # 41
CYLINDER_SIZE = 1 + POINT_SIZE + _CYL_TAIL.size  # 59
ENVELOPE_SIZE = 1 + _ENV.size  # 61
MAX_FANOUT = 0xFFFF
MAX_DEPTH = 256


class _Reader:
    def __init__(self, buf, offset: int = 0, end: int | None = None):
        self.buf = memoryview(buf)
        self.pos = offset
        self.end = len(self.buf) if end is None else end

    def take(self, st: struct.Struct):
        if self.pos + st.size > self.end:
            raise DecodeError(f"truncated input: need {st.size} bytes", self.pos)
        out = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return out

    def type_id(self, expected: int) -> None:
        if self.pos >= self.end:
            raise DecodeError("truncated input: missing type id", self.pos)
        got = self.buf[self.pos]
        if got != expected:
            raise DecodeError(f"expected type id 0x{expected:02x}, got 0x{got:02x}", self.pos)
        self.pos += 1

    def peek(self) -> int:
        if self.pos >= self.end:
            raise DecodeError("truncated input: missing type id", self.pos)
        return self.buf[self.pos]


def _check(make, reader: _Reader, start: int):
    try:
        return make()
    except (GeometryError, ValueError, KeyError) as exc:
        if isinstance(exc, DecodeError):
            raise
        raise DecodeError(f"invalid field values: {exc}", start) from None


# -- objects ------------------------------------------------------------------


def encode_point(p: STPoint) -> bytes:
    return bytes([TypeId.POINT]) + _POINT.pack(
        p.x, p.y, p.overlap_count, p.start_time, p.end_time, p.zone_id
    )


def _read_point(r: _Reader) -> STPoint:
    start = r.pos
    r.type_id(TypeId.POINT)
    x, y, count, t0, t1, zone = r.take(_POINT)
    return _check(lambda: STPoint(x, y, t0, t1, count, zone), r, start)


def decode_point(buf) -> STPoint:
    return _finish(_read_point, buf)


def encode_cylinder(c: STCylinder) -> bytes:
    return (
        bytes([TypeId.CYLINDER])
        + encode_point(c.center)
        + _CYL_TAIL.pack(c.spatial_radius, c.temporal_radius, int(c.temporal_unit))
    )


def _read_cylinder(r: _Reader) -> STCylinder:
    start = r.pos
    r.type_id(TypeId.CYLINDER)
    center = _read_point(r)
    s, t, unit = r.take(_CYL_TAIL)
    return _check(lambda: STCylinder(center, s, t, TemporalUnit(unit)), r, start)


def decode_cylinder(buf) -> STCylinder:
    return _finish(_read_cylinder, buf)


def encode_envelope(e: STEnvelope) -> bytes:
    return bytes([TypeId.ENVELOPE]) + _ENV.pack(
        e.x_min, e.x_max, e.y_min, e.y_max, int(e.t_min), int(e.t_max), e.zone_id, e.envelope_id
    )


def _read_envelope(r: _Reader) -> STEnvelope:
    start = r.pos
    r.type_id(TypeId.ENVELOPE)
    vals = r.take(_ENV)
    return _check(lambda: STEnvelope(*vals), r, start)


def decode_envelope(buf) -> STEnvelope:
    return _finish(_read_envelope, buf)


# -- trees --------------------------------------------------------------------


def _env_of(arr: np.ndarray, envelope_id: int = 0) -> STEnvelope:
    return STEnvelope(
        float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]),
        int(arr[4]), int(arr[5]), 0, envelope_id,
    )


def _encode_str(tree: STRTree) -> bytes:
    out = [bytes([TypeId.STR_TREE]), _TREE_HEAD.pack(tree.node_capacity)]
    if tree.root is None:
        # empty index: zero envelope and a single leaf without items
        empty = encode_envelope(_env_of(np.zeros(6)))
        out += [empty, empty, _NODE_HEAD.pack(1, 0)]
        return b"".join(out)
    out.append(encode_envelope(_env_of(tree.root.envelope)))
    xy = tree.xy_source
    t = tree.t_source
    counter = [0]

    def node(nd: Node):
        eid = counter[0]
        counter[0] += 1
        out.append(encode_envelope(_env_of(nd.envelope, eid)))
        if nd.is_leaf:
            out.append(_NODE_HEAD.pack(1, len(nd.items)))
            for i in nd.items:
                p = tree.point(int(i)) if tree._source is not None else STPoint(float(xy[i, 0]), float(xy[i, 1]), int(t[i]))
                out.append(encode_point(p))
        else:
            out.append(_NODE_HEAD.pack(0, len(nd.children)))
            for ch in nd.children:
                node(ch)

    node(tree.root)
    return b"".join(out)


def _decode_str(r: _Reader) -> STRTree:
    r.type_id(TypeId.STR_TREE)
    (capacity,) = r.take(_TREE_HEAD)
    if capacity < 1:
        raise DecodeError("node capacity must be >= 1", r.pos - _TREE_HEAD.size)
    _read_envelope(r)
    points: list[STPoint] = []

    def node(depth: int) -> Node:
        if depth > MAX_DEPTH:
            raise DecodeError("tree too deep", r.pos)
        env = _read_envelope(r).as_array()
        is_leaf, count = r.take(_NODE_HEAD)
        if is_leaf not in (0, 1):
            raise DecodeError("bad leaf flag", r.pos - _NODE_HEAD.size)
        if is_leaf:
            first = len(points)
            for _ in range(count):
                points.append(_read_point(r))
            return Node(env, items=np.arange(first, first + count, dtype=np.int64))
        if count == 0:
            raise DecodeError("internal node without children", r.pos - _NODE_HEAD.size)
        return Node(env, children=[node(depth + 1) for _ in range(count)])

    root = node(0)
    if root.is_leaf and len(root.items) == 0:
        return STRTree([], capacity)
    tree_pts = np.array([[p.x, p.y] for p in points], dtype=np.float64).reshape(-1, 2)
    tree_t = np.array([p.start_time for p in points], dtype=np.int64)
    try:
        tree = STRTree.from_root(root, capacity, tree_pts, tree_t)
    except ValueError as exc:
        raise DecodeError(str(exc), r.pos) from None
    tree._source = points
    return tree


def _encode_kdb(part: KDBPartitioner) -> bytes:
    out = [bytes([TypeId.KDB_TREE]), _TREE_HEAD.pack(2), encode_envelope(part.domain)]

    def node(nd: KDBNode):
        out.append(encode_envelope(nd.envelope))
        if nd.is_leaf:
            out.append(_NODE_HEAD.pack(1, 0))
        else:
            out.append(_NODE_HEAD.pack(0, 2))
            if nd.dim == 2:
                out.append(_SPLIT_I.pack(nd.dim, int(nd.split)))
            else:
                out.append(_SPLIT_F.pack(nd.dim, float(nd.split)))
            node(nd.low)
            node(nd.high)

    node(part.root)
    return b"".join(out)


def _decode_kdb(r: _Reader) -> KDBPartitioner:
    r.type_id(TypeId.KDB_TREE)
    r.take(_TREE_HEAD)
    domain = _read_envelope(r)

    def node(depth: int) -> KDBNode:
        if depth > MAX_DEPTH:
            raise DecodeError("tree too deep", r.pos)
        env = _read_envelope(r)
        is_leaf, count = r.take(_NODE_HEAD)
        if is_leaf == 1:
            if count != 0:
                raise DecodeError("KDB leaf must carry no items", r.pos - _NODE_HEAD.size)
            return KDBNode(env)
        if is_leaf != 0 or count != 2:
            raise DecodeError("KDB internal node must have 2 children", r.pos - _NODE_HEAD.size)
        if r.pos >= r.end:
            raise DecodeError("truncated split record", r.pos)
        dim = r.buf[r.pos]
        if dim > 2:
            raise DecodeError(f"bad split dimension {dim}", r.pos)
        _, split = r.take(_SPLIT_I if dim == 2 else _SPLIT_F)
        return KDBNode(env, dim, float(split), node(depth + 1), node(depth + 1))

    return KDBPartitioner(node(0), domain)


def encode_tree(tree) -> bytes:
    if isinstance(tree, STRTree):
        return _encode_str(tree)
    if isinstance(tree, KDBPartitioner):
        return _encode_kdb(tree)
    raise TypeError(f"cannot encode {type(tree).__name__} as a tree")


def _read_tree(r: _Reader):
    tid = r.peek()
    if tid == TypeId.STR_TREE:
        return _decode_str(r)
    if tid == TypeId.KDB_TREE:
        return _decode_kdb(r)
    raise DecodeError(f"unknown tree type id 0x{tid:02x}", r.pos)


def decode_tree(buf):
    return _finish(_read_tree, buf)


# -- generic ------------------------------------------------------------------

_READERS = {
    TypeId.POINT: _read_point,
    TypeId.CYLINDER: _read_cylinder,
    TypeId.ENVELOPE: _read_envelope,
    TypeId.STR_TREE: _decode_str,
    TypeId.KDB_TREE: _decode_kdb,
}


def encode(obj) -> bytes:
    if isinstance(obj, STPoint):
        return encode_point(obj)
    if isinstance(obj, STCylinder):
        return encode_cylinder(obj)
    if isinstance(obj, STEnvelope):
        return encode_envelope(obj)
    return encode_tree(obj)


def _read_any(r: _Reader):
    tid = r.peek()
    reader = _READERS.get(tid)
    if reader is None:
        raise DecodeError(f"unknown type id 0x{tid:02x}", r.pos)
    return reader(r)


def decode(buf):
    """Decode any single encoded object; trailing bytes are an error."""
    return _finish(_read_any, buf)


def decode_stream(buf, offset: int = 0, end: int | None = None):
    """Decode consecutive objects from ``buf[offset:end]``."""
    r = _Reader(buf, offset, end)
    out = []
    while r.pos < r.end:
        out.append(_read_any(r))
    return out


def _finish(read, buf):
    r = _Reader(buf)
    obj = read(r)
    if r.pos != r.end:
        raise DecodeError(f"{r.end - r.pos} trailing bytes", r.pos)
    return obj


# -- framing ------------------------------------------------------------------


def frame(payload: bytes) -> bytes:
    if len(payload) > 0xFFFFFFFF:
        raise ValueError("payload too large for a frame")
    return _FRAME.pack(len(payload)) + bytes(payload)


def unframe(buf) -> bytes:
    """Payload of a single complete frame; errors on truncation or excess bytes."""
    payload, used = read_frame(buf)
    if used != len(buf):
        raise DecodeError(f"{len(buf) - used} bytes after frame", used)
    return payload


def read_frame(buf, offset: int = 0) -> tuple[bytes, int]:
    """Read one frame starting at ``offset``; returns ``(payload, next_offset)``."""
    if len(buf) - offset < _FRAME.size:
        raise DecodeError("truncated frame length", offset)
    (length,) = _FRAME.unpack_from(buf, offset)
    start = offset + _FRAME.size
    if len(buf) - start < length:
        raise DecodeError(f"frame declares {length} bytes, {len(buf) - start} available", start)
    return bytes(buf[start:start + length]), start + length


# -- record batches -----------------------------------------------------------
# Wire batches prefix each encoded object with its i64 record index. The
# structured dtypes below are byte-identical to the per-object encoders.

POINT_DTYPE = np.dtype([
    ("type_id", "u1"), ("x", "<f8"), ("y", "<f8"), ("overlap_count", "<u4"),
    ("start_time", "<i8"), ("end_time", "<i8"), ("zone_id", "<i4"),
])
POINT_RECORD = np.dtype([("record", "<i8"), ("point", POINT_DTYPE)])
CYLINDER_RECORD = np.dtype([
    ("record", "<i8"), ("type_id", "u1"), ("center", POINT_DTYPE),
    ("spatial_radius", "<f8"), ("temporal_radius", "<i8"), ("temporal_unit", "u1"),
])


def _fill_points(arr, xy, t):
    arr["type_id"] = TypeId.POINT
    arr["x"] = xy[:, 0]
    arr["y"] = xy[:, 1]
    arr["overlap_count"] = 1
    arr["start_time"] = t
    arr["end_time"] = t
    arr["zone_id"] = 0


def _check_points(arr, offset: int, stride: int) -> None:
    bad = (
        (arr["type_id"] != TypeId.POINT)
        | ~np.isfinite(arr["x"]) | ~np.isfinite(arr["y"])
        | (arr["start_time"] > arr["end_time"]) | (arr["overlap_count"] < 1)
    )
    if bad.any():
        raise DecodeError("invalid point record", offset + stride * int(np.argmax(bad)))


def encode_point_records(xy, t, records) -> bytes:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    arr = np.empty(len(xy), dtype=POINT_RECORD)
    arr["record"] = records
    _fill_points(arr["point"], xy, np.asarray(t, dtype=np.int64))
    return arr.tobytes()


def decode_point_records(buf, offset: int = 0, count: int | None = None):
    """``(xy, t, records)`` from a run of point records."""
    if count is None:
        count = (len(buf) - offset) // POINT_RECORD.itemsize
    need = count * POINT_RECORD.itemsize
    if len(buf) - offset < need:
        raise DecodeError(f"truncated point batch: need {need} bytes", offset)
    arr = np.frombuffer(buf, dtype=POINT_RECORD, count=count, offset=offset)
    _check_points(arr["point"], offset, POINT_RECORD.itemsize)
    p = arr["point"]
    return np.column_stack([p["x"], p["y"]]), p["start_time"].astype(np.int64), arr["record"].astype(np.int64)


def encode_cylinder_records(xy, t, records, spatial_radius: float, temporal_radius: int,
                            unit: TemporalUnit = TemporalUnit.DAYS) -> bytes:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    arr = np.empty(len(xy), dtype=CYLINDER_RECORD)
    arr["record"] = records
    arr["type_id"] = TypeId.CYLINDER
    _fill_points(arr["center"], xy, np.asarray(t, dtype=np.int64))
    arr["spatial_radius"] = spatial_radius
    arr["temporal_radius"] = temporal_radius
    arr["temporal_unit"] = int(unit)
    return arr.tobytes()


def decode_cylinder_records(buf, offset: int = 0, count: int | None = None):
    """``(xy, t, records, spatial_radius, temporal_radius)`` from cylinder records."""
    if count is None:
        count = (len(buf) - offset) // CYLINDER_RECORD.itemsize
    need = count * CYLINDER_RECORD.itemsize
    if len(buf) - offset < need:
        raise DecodeError(f"truncated cylinder batch: need {need} bytes", offset)
    arr = np.frombuffer(buf, dtype=CYLINDER_RECORD, count=count, offset=offset)
    bad = arr["type_id"] != TypeId.CYLINDER
    if bad.any():
        raise DecodeError("invalid cylinder record", offset + CYLINDER_RECORD.itemsize * int(np.argmax(bad)))
    _check_points(arr["center"], offset, CYLINDER_RECORD.itemsize)
    if ((arr["spatial_radius"] < 0) | (arr["temporal_radius"] < 0) | (arr["temporal_unit"] > 4)).any():
        raise DecodeError("invalid cylinder radii", offset)
    c = arr["center"]
    return (
        np.column_stack([c["x"], c["y"]]), c["start_time"].astype(np.int64),
        arr["record"].astype(np.int64), arr["spatial_radius"], arr["temporal_radius"],
    )
