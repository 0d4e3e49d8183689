import socket
import struct

import numpy as np
import pytest

from spacetime_k.codec import DecodeError
from spacetime_k.estimator import DistanceGrid, EstimatorOptions
from spacetime_k.geometry import StudyRegion, TemporalUnit
from spacetime_k.runtime.protocol import (
    PROTOCOL_VERSION,
    Channel,
    Compute,
    CylinderBatch,
    Done,
    ErrorMsg,
    Hello,
    MsgType,
    Partial,
    PartitionerMsg,
    PointBatch,
    decode_message,
    encode_message,
    job_config,
    parse_job_config,
)


def sample_messages():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 10, (5, 2))
    t = rng.integers(0, 9, 5)
    ids = np.arange(5, dtype=np.int64) * 3
    return [
        Hello(1234),
        PartitionerMsg(b"\x11tree", {"a": 1}),
        PointBatch(7, xy, t, ids),
        CylinderBatch(7, xy, t, ids, 250.0, 4, TemporalUnit.MONTHS),
        Compute(7, 3, -1),
        Partial(7, 3, rng.uniform(0, 1, (2, 3)), {"comparisons": 10}),
        Done({"completed": 2}),
        ErrorMsg("boom é"),
    ]


def _eq(a, b):
    assert type(a) is type(b)
    for k, v in vars(a).items():
        w = getattr(b, k)
        if isinstance(v, np.ndarray):
            np.testing.assert_array_equal(v, w)
        else:
            assert v == w, k


@pytest.mark.parametrize("msg", sample_messages(), ids=lambda m: type(m).__name__)
def test_round_trip(msg):
    payload = encode_message(msg)
    assert payload[0] == PROTOCOL_VERSION and payload[1] == int(msg.kind)
    _eq(decode_message(payload), msg)


def test_layouts():
    assert encode_message(Hello(5)) == bytes([1, MsgType.HELLO]) + struct.pack("<I", 5)
    assert encode_message(Compute(1, 2, -1)) == bytes([1, MsgType.COMPUTE]) + struct.pack("<IIi", 1, 2, -1)
    pb = encode_message(PointBatch(9, np.zeros((2, 2)), np.zeros(2, int), np.arange(2)))
    assert len(pb) == 2 + 8 + 2 * 49
    cb = encode_message(CylinderBatch(9, np.zeros((2, 2)), np.zeros(2, int), np.arange(2), 1.0, 1))
    assert len(cb) == 2 + 8 + 2 * 67


def test_malformed():
    with pytest.raises(DecodeError):
        decode_message(b"")
    with pytest.raises(DecodeError):
        decode_message(bytes([2, 1, 0, 0, 0, 0]))
    with pytest.raises(DecodeError):
        decode_message(bytes([1, 99]))
    good = encode_message(sample_messages()[2])
    with pytest.raises(DecodeError):
        decode_message(good[:-1])
    with pytest.raises(DecodeError):
        decode_message(encode_message(Hello(1)) + b"\0")
    rng = np.random.default_rng(1)
    for _ in range(2000):
        data = bytes([1, int(rng.integers(0, 10))]) + rng.bytes(int(rng.integers(0, 120)))
        try:
            decode_message(data)
        except DecodeError:
            pass


def test_job_config_round_trip(l_region):
    grid = DistanceGrid([100.0, 200.0], [1.0, 5.0])
    opts = EstimatorOptions(False, True, 0.5, 0.25, 8)
    region, g, o, unit = parse_job_config(job_config(l_region, grid, opts, TemporalUnit.HOURS))
    assert g == grid and o == opts and unit is TemporalUnit.HOURS
    np.testing.assert_array_equal(region.boundary, l_region.boundary)
    assert (region.period_start, region.period_end) == (0, 100)


def test_channel_over_socketpair():
    a, b = socket.socketpair()
    log = []
    ca, cb = Channel(a, log), Channel(b)
    for m in sample_messages():
        ca.send(m)
        _eq(cb.recv(), m)
    assert ca.bytes_sent == cb.bytes_received
    assert [d for d, _ in log] == ["send"] * len(sample_messages())
    a.close()
    with pytest.raises(ConnectionError):
        cb.recv()
    cb.close()
