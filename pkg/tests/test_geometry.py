import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spacetime_k.geometry import (
    GeometryError,
    STCylinder,
    STEnvelope,
    STPoint,
    StudyRegion,
    TemporalUnit,
    envelope_intersects_cylinder,
    envelopes_intersect_cylinder,
    point_arrays,
    point_in_polygon,
    points_in_polygon,
    polygon_area,
    spatial_distance,
    temporal_distance,
    within_cylinder,
)

coord = st.floats(-1e4, 1e4, allow_nan=False)
tval = st.integers(-1000, 1000)


def test_distances():
    assert spatial_distance(STPoint(0, 0, 0), STPoint(3, 4, 0)) == 5.0
    p = STPoint(1.5, -2.0, 7)
    assert spatial_distance(p, p) == 0.0
    assert spatial_distance(STPoint(-1, 0, 0), STPoint(1, 0, 0)) == 2.0
    assert temporal_distance(STPoint(0, 0, 10), STPoint(0, 0, 3)) == 7
    assert temporal_distance(STPoint(0, 0, 5), STPoint(0, 0, 5)) == 0
    assert temporal_distance(STPoint(0, 0, 0), STPoint(0, 0, 100)) == 100


def test_within_cylinder_inclusive():
    cyl = STCylinder(STPoint(0, 0, 0), 10, 5)
    assert within_cylinder(cyl, STPoint(6, 8, 5))
    assert not within_cylinder(cyl, STPoint(6, 8, 6))
    assert within_cylinder(cyl, cyl.center)


@given(coord, coord, tval, coord, coord, tval, st.floats(0, 2e4), st.integers(0, 500))
def test_within_cylinder_matches_direct(x0, y0, t0, x1, y1, t1, s, t):
    cyl = STCylinder(STPoint(x0, y0, t0), s, t)
    p = STPoint(x1, y1, t1)
    d = math.sqrt((x1 - x0) ** 2 + (y1 - y0) ** 2)
    if math.isclose(d, s, rel_tol=1e-12):
        return  # rounding-level ties are not meaningful here
    assert within_cylinder(cyl, p) == (d <= s and abs(t1 - t0) <= t)


def test_envelope_cylinder_examples():
    env = STEnvelope(0, 10, 0, 10, 0, 10)
    assert envelope_intersects_cylinder(env, STCylinder(STPoint(5, 5, 5), 1, 1))
    assert not envelope_intersects_cylinder(env, STCylinder(STPoint(20, 5, 5), 1, 1))
    assert envelope_intersects_cylinder(env, STCylinder(STPoint(12, 5, 5), 2, 1))
    # corner: clamped distance sqrt(2) > 1.4
    assert not envelope_intersects_cylinder(env, STCylinder(STPoint(11, 11, 5), 1.4, 1))
    # time overlap is inclusive
    assert envelope_intersects_cylinder(env, STCylinder(STPoint(5, 5, 13), 1, 3))
    assert not envelope_intersects_cylinder(env, STCylinder(STPoint(5, 5, 14), 1, 3))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_envelope_cylinder_no_false_negatives(seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-10, 10, 3)
    hi = lo + rng.uniform(0, 10, 3)
    env = STEnvelope(lo[0], hi[0], lo[1], hi[1], int(lo[2]), int(hi[2]) + 1)
    c = rng.uniform(-20, 25, 2)
    cyl = STCylinder(STPoint(c[0], c[1], int(rng.integers(-20, 25))), rng.uniform(0, 8), int(rng.integers(0, 6)))
    # sample the cylinder volume densely
    m = 10_000
    r = cyl.spatial_radius * np.sqrt(rng.uniform(0, 1, m))
    th = rng.uniform(0, 2 * np.pi, m)
    px = c[0] + r * np.cos(th)
    py = c[1] + r * np.sin(th)
    pt = cyl.center.t + rng.integers(-cyl.temporal_radius, cyl.temporal_radius + 1, m)
    hit = ((px >= env.x_min) & (px <= env.x_max) & (py >= env.y_min) & (py <= env.y_max)
           & (pt >= env.t_min) & (pt <= env.t_max)).any()
    pred = envelope_intersects_cylinder(env, cyl)
    if hit:
        assert pred
    vec = envelopes_intersect_cylinder(env.as_array()[None, :], c[0], c[1], cyl.center.t,
                                       cyl.spatial_radius, cyl.temporal_radius)
    assert bool(vec[0]) == pred


def test_point_in_polygon(unit_square):
    assert point_in_polygon((0.5, 0.5), unit_square)
    assert not point_in_polygon((2, 2), unit_square)
    assert point_in_polygon((0, 0.5), unit_square)
    assert point_in_polygon((1, 1), unit_square)
    assert not point_in_polygon((1.0000001, 0.5), unit_square)


def test_points_in_polygon_concave(l_region):
    pts = np.array([[1000, 1000], [8000, 8000], [5000, 2000], [2000, 8000], [4000, 6000], [-1, 0]])
    assert points_in_polygon(pts[:, 0], pts[:, 1], l_region).tolist() == [True, False, True, True, True, False]


def test_polygon_area():
    assert polygon_area(np.array([(0, 0), (1, 0), (1, 1), (0, 1)])) == 1.0
    assert polygon_area(np.array([(0, 0), (2, 0), (0, 2)])) == 2.0
    sq = StudyRegion.rectangle(0, 0, 10000, 10000, 0, 1)
    assert sq.area == 1.0e8
    with pytest.raises(GeometryError):
        polygon_area(np.array([(0, 0), (1, 1), (2, 2)]))


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=3),
       st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_polygon_area_invariances(tri, dx, dy):
    ring = np.array(tri)
    a = abs((ring[1, 0] - ring[0, 0]) * (ring[2, 1] - ring[0, 1]) - (ring[2, 0] - ring[0, 0]) * (ring[1, 1] - ring[0, 1])) / 2
    if a < 1e-3:
        return
    base = polygon_area(ring)
    assert math.isclose(base, a, rel_tol=1e-9)
    # shoelace rounding error scales with coordinate magnitude squared
    scale = np.abs(ring).max() ** 2
    assert math.isclose(polygon_area(ring[::-1]), base, rel_tol=1e-12, abs_tol=1e-13 * scale)
    shifted = ring + [dx, dy]
    assert math.isclose(polygon_area(shifted), base, rel_tol=1e-9, abs_tol=1e-13 * np.abs(shifted).max() ** 2)


def test_region_validation():
    with pytest.raises(GeometryError):
        StudyRegion(np.array([(0, 0), (1, 0)]), 0, 1)
    with pytest.raises(GeometryError):  # bow tie
        StudyRegion(np.array([(0, 0), (1, 1), (1, 0), (0, 1)]), 0, 1)
    with pytest.raises(GeometryError):
        StudyRegion.rectangle(0, 0, 1, 1, 5, 5)
    r = StudyRegion(np.array([(0, 0), (1, 0), (1, 1), (0, 1), (0, 0)]), 0, 10)
    assert len(r.boundary) == 4 and r.duration == 10
    assert r == StudyRegion.rectangle(0, 0, 1, 1, 0, 10)


def test_value_types():
    p = STPoint(1.0, 2.0, 5)
    assert p.end_time == 5 and p.overlap_count == 1 and p.t == 5
    with pytest.raises(GeometryError):
        STPoint(math.nan, 0, 0)
    with pytest.raises(GeometryError):
        STPoint(0, 0, 5, 4)
    with pytest.raises(GeometryError):
        STPoint(0, 0, 0, overlap_count=0)
    with pytest.raises(GeometryError):
        STEnvelope(1, 0, 0, 1, 0, 1)
    with pytest.raises(GeometryError):
        STCylinder(p, -1, 0)
    assert STCylinder(p, 1, 1, "hours").temporal_unit is TemporalUnit.HOURS
    assert TemporalUnit.parse("months") == 4


def test_point_arrays_forms():
    pts = [STPoint(1, 2, 3), STPoint(4, 5, 6)]
    xy, t = point_arrays(pts)
    xy2, t2 = point_arrays(np.array([[1, 2, 3], [4, 5, 6]]))
    xy3, t3 = point_arrays((xy, t))
    for a, b in ((xy, xy2), (xy, xy3)):
        np.testing.assert_array_equal(a, b)
    assert t.dtype == np.int64 and t.tolist() == t2.tolist() == t3.tolist() == [3, 6]
