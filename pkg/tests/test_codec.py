import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spacetime_k import codec
from spacetime_k.codec import DecodeError, TypeId
from spacetime_k.geometry import STCylinder, STEnvelope, STPoint, TemporalUnit
from spacetime_k.partitioner import build_kdb_for_partitions
from spacetime_k.st_index import STRTree

finite = st.floats(-1e12, 1e12, allow_nan=False, allow_infinity=False)
i64 = st.integers(-2**62, 2**62)


@st.composite
def points(draw):
    t0 = draw(i64)
    return STPoint(draw(finite), draw(finite), t0, draw(st.one_of(st.none(), st.integers(t0, 2**62))),
                   draw(st.integers(1, 2**32 - 1)), draw(st.integers(-2**31, 2**31 - 1)))


@st.composite
def cylinders(draw):
    return STCylinder(draw(points()), draw(st.floats(0, 1e9)), draw(st.integers(0, 2**62)),
                      draw(st.sampled_from(list(TemporalUnit))))


@st.composite
def envelopes(draw):
    xs = sorted(draw(st.lists(finite, min_size=2, max_size=2)))
    ys = sorted(draw(st.lists(finite, min_size=2, max_size=2)))
    ts = sorted(draw(st.lists(i64, min_size=2, max_size=2)))
    return STEnvelope(*xs, *ys, *ts, draw(st.integers(-2**31, 2**31 - 1)), draw(i64))


def test_fixed_sizes():
    p = STPoint(1.5, -2.5, 10, 12, 3, 7)
    assert len(codec.encode_point(p)) == codec.POINT_SIZE == 41
    assert len(codec.encode_cylinder(STCylinder(p, 5.0, 2))) == codec.CYLINDER_SIZE == 59
    assert len(codec.encode_envelope(STEnvelope(0, 1, 0, 1, 0, 1))) == codec.ENVELOPE_SIZE == 61


def test_point_layout():
    b = codec.encode_point(STPoint(1.5, -2.5, 10, 12, 3, 7))
    assert b[0] == TypeId.POINT
    assert struct.unpack("<ddIqqi", b[1:]) == (1.5, -2.5, 3, 10, 12, 7)


@settings(max_examples=300)
@given(points())
def test_point_round_trip(p):
    assert codec.decode_point(codec.encode_point(p)) == p
    assert codec.decode(codec.encode(p)) == p


@settings(max_examples=300)
@given(cylinders())
def test_cylinder_round_trip(c):
    assert codec.decode_cylinder(codec.encode_cylinder(c)) == c


@settings(max_examples=300)
@given(envelopes())
def test_envelope_round_trip(e):
    assert codec.decode_envelope(codec.encode_envelope(e)) == e


def test_str_tree_round_trip_queries():
    rng = np.random.default_rng(1)
    pts = [STPoint(float(x), float(y), int(t)) for x, y, t in
           zip(rng.uniform(0, 100, 700), rng.uniform(0, 100, 700), rng.integers(0, 50, 700))]
    tree = STRTree(pts, 6)
    back = codec.decode_tree(codec.encode_tree(tree))
    assert back.node_capacity == 6 and back.depth == tree.depth and len(back) == len(tree)
    assert codec.encode_tree(back) == codec.encode_tree(tree)
    for _ in range(200):
        c = STCylinder(STPoint(*rng.uniform(0, 100, 2), int(rng.integers(0, 50))), rng.uniform(0, 30), int(rng.integers(0, 10)))
        key = lambda p: (p.x, p.y, p.start_time)
        assert sorted(back.range_query(c), key=key) == sorted(tree.range_query(c), key=key)
    empty = codec.decode_tree(codec.encode_tree(STRTree([], 4)))
    assert len(empty) == 0 and empty.node_capacity == 4


def test_kdb_round_trip():
    rng = np.random.default_rng(2)
    xy = rng.uniform(0, 100, (2000, 2))
    t = rng.integers(0, 30, 2000)
    part = build_kdb_for_partitions((xy, t), STEnvelope(0, 100, 0, 100, 0, 30), 13)
    back = codec.decode(codec.encode(part))
    assert len(back) == 13
    assert back.domain == part.domain and back.leaves == part.leaves
    np.testing.assert_array_equal(back.locate_array(xy, t), part.locate_array(xy, t))
    assert codec.encode_tree(back) == codec.encode_tree(part)


def test_stream_and_frames():
    objs = [STPoint(1, 2, 3), STCylinder(STPoint(0, 0, 0), 1.0, 1), STEnvelope(0, 1, 0, 1, 0, 1)]
    buf = b"".join(codec.encode(o) for o in objs)
    assert codec.decode_stream(buf) == objs
    framed = codec.frame(buf)
    assert framed[:4] == struct.pack(">I", len(buf))
    assert codec.unframe(framed) == buf
    payload, nxt = codec.read_frame(framed + codec.frame(b"xy"), 0)
    assert payload == buf and codec.read_frame(framed + codec.frame(b"xy"), nxt) == (b"xy", nxt + 6)
    with pytest.raises(DecodeError):
        codec.unframe(framed[:-1])
    with pytest.raises(DecodeError):
        codec.unframe(framed + b"\0")
    with pytest.raises(DecodeError):
        codec.read_frame(b"\0\0")


def test_errors_report_offsets():
    b = codec.encode_point(STPoint(1, 2, 3))
    with pytest.raises(DecodeError) as e:
        codec.decode_point(b[:20])
    assert e.value.offset == 1
    with pytest.raises(DecodeError) as e:
        codec.decode(b + b"\x01")
    assert e.value.offset == 41
    with pytest.raises(DecodeError) as e:
        codec.decode(b"\x7f" + b[1:])
    assert e.value.offset == 0
    bad_env = bytearray(codec.encode_envelope(STEnvelope(0, 1, 0, 1, 0, 1)))
    bad_env[1:9] = struct.pack("<d", 5.0)  # x_min > x_max
    with pytest.raises(DecodeError):
        codec.decode(bytes(bad_env))


def test_record_batches_match_object_encoding():
    rng = np.random.default_rng(3)
    xy = rng.uniform(-1e6, 1e6, (50, 2))
    t = rng.integers(-1000, 1000, 50)
    rec = rng.permutation(50).astype(np.int64) * 7
    buf = codec.encode_point_records(xy, t, rec)
    ref = b"".join(struct.pack("<q", r) + codec.encode_point(STPoint(x, y, int(tt))) for (x, y), tt, r in zip(xy, t, rec))
    assert buf == ref
    xy2, t2, rec2 = codec.decode_point_records(buf)
    np.testing.assert_array_equal(xy2, xy)
    np.testing.assert_array_equal(t2, t)
    np.testing.assert_array_equal(rec2, rec)
    cbuf = codec.encode_cylinder_records(xy, t, rec, 25.0, 3, TemporalUnit.DAYS)
    cref = b"".join(struct.pack("<q", r) + codec.encode_cylinder(STCylinder(STPoint(x, y, int(tt)), 25.0, 3))
                    for (x, y), tt, r in zip(xy, t, rec))
    assert cbuf == cref
    out = codec.decode_cylinder_records(cbuf)
    np.testing.assert_array_equal(out[0], xy)
    assert (out[3] == 25.0).all() and (out[4] == 3).all()
    broken = bytearray(buf)
    broken[49 * 3 + 8] = 0x02  # type id of the fourth record
    with pytest.raises(DecodeError) as e:
        codec.decode_point_records(bytes(broken))
    assert e.value.offset == 49 * 3  # start of the offending record


def _seed_corpus():
    rng = np.random.default_rng(4)
    xy = rng.uniform(0, 10, (40, 2))
    t = rng.integers(0, 10, 40)
    return [
        codec.encode_point(STPoint(1, 2, 3)),
        codec.encode_cylinder(STCylinder(STPoint(1, 2, 3), 1.0, 2)),
        codec.encode_envelope(STEnvelope(0, 1, 0, 1, 0, 1)),
        codec.encode_tree(STRTree((xy, t), 4)),
        codec.encode_tree(build_kdb_for_partitions((xy, t), STEnvelope(0, 10, 0, 10, 0, 10), 5)),
    ]


def fuzz_once(rng, corpus):
    """Decode one random or mutated byte string; only DecodeError may escape."""
    if rng.random() < 0.5:
        data = rng.bytes(int(rng.integers(0, 200)))
        if data and rng.random() < 0.7:
            data = bytes([int(rng.choice([1, 2, 3, 0x10, 0x11]))]) + data[1:]
    else:
        data = bytearray(corpus[int(rng.integers(0, len(corpus)))])
        for _ in range(int(rng.integers(1, 4))):
            op = rng.integers(0, 3)
            if op == 0 and data:
                data[int(rng.integers(0, len(data)))] = int(rng.integers(0, 256))
            elif op == 1:
                data = data[:int(rng.integers(0, len(data) + 1))]
            else:
                data += rng.bytes(int(rng.integers(1, 8)))
        data = bytes(data)
    try:
        codec.decode(data)
    except DecodeError:
        pass
    try:
        codec.decode_point_records(data)
    except DecodeError:
        pass


def test_fuzz_small():
    rng = np.random.default_rng(5)
    corpus = _seed_corpus()
    for _ in range(3000):
        fuzz_once(rng, corpus)


def test_frame_edge_cases_and_nesting():
    assert codec.frame(b"") == b"\0\0\0\0"
    assert codec.unframe(b"\0\0\0\0") == b""
    with pytest.raises(DecodeError):
        codec.unframe(b"\0\0\0")
    b = codec.encode_cylinder(STCylinder(STPoint(1, 2, 3), 1.0, 2))
    assert b[0] == TypeId.CYLINDER and b[1] == TypeId.POINT
    e = STEnvelope(3.0, 3.0, 4.0, 4.0, 5, 5)
    assert codec.decode(codec.encode(e)) == e
    one_leaf = codec.encode_tree(STRTree([STPoint(1, 1, 1)], 4))
    assert len(one_leaf) == 1 + 4 + 61 + 61 + 3 + 41
