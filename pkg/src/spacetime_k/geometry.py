"""Spatiotemporal value types, distances and planar polygon primitives.

Coordinates are projected planar meters; time is an integer count of a
caller-declared unit. All comparisons against thresholds are inclusive.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from shapely.geometry import LinearRing

__all__ = [
    "TemporalUnit",
    "STPoint",
    "STEnvelope",
    "STCylinder",
    "StudyRegion",
    "GeometryError",
    "spatial_distance",
    "temporal_distance",
    "within_cylinder",
    "envelope_intersects_cylinder",
    "envelopes_intersect_cylinder",
    "point_in_polygon",
    "points_in_polygon",
    "polygon_area",
    "point_arrays",
]

# max number of (point, edge) cells materialised at once by vectorised tests
_CHUNK_CELLS = 4_000_000


class GeometryError(ValueError):
    """Raised for invalid geometric input (degenerate polygons, bad ranges)."""


class TemporalUnit(enum.IntEnum):
    SECONDS = 0
    MINUTES = 1
    HOURS = 2
    DAYS = 3
    MONTHS = 4

    @classmethod
    def parse(cls, name: str | int | "TemporalUnit") -> "TemporalUnit":
        if isinstance(name, cls):
            return name
        if isinstance(name, int):
            return cls(name)
        return cls[name.upper()]


@dataclass(frozen=True, slots=True)
class STPoint:
    """A spatiotemporal event.

    ``end_time`` defaults to ``start_time``; K-function input records are
    instants, so the two are equal there. ``overlap_count`` and ``zone_id``
    are carried for serialization fidelity only.
    """

    x: float
    y: float
    start_time: int
    end_time: int | None = None
    overlap_count: int = 1
    zone_id: int = 0

    def __post_init__(self):
        if self.end_time is None:
            object.__setattr__(self, "end_time", self.start_time)
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite coordinates ({self.x}, {self.y})")
        if self.start_time > self.end_time:
            raise GeometryError("start_time must not exceed end_time")
        if self.overlap_count < 1:
            raise GeometryError("overlap_count must be >= 1")

    @property
    def t(self) -> int:
        return self.start_time


@dataclass(frozen=True, slots=True)
class STEnvelope:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    t_min: int
    t_max: int
    zone_id: int = 0
    envelope_id: int = 0

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max or self.t_min > self.t_max:
            raise GeometryError(f"inverted envelope {self}")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x_min, self.x_max, self.y_min, self.y_max, self.t_min, self.t_max],
            dtype=np.float64,
        )

    def contains_point(self, p: STPoint) -> bool:
        return (
            self.x_min <= p.x <= self.x_max
            and self.y_min <= p.y <= self.y_max
            and self.t_min <= p.start_time <= self.t_max
        )


@dataclass(frozen=True, slots=True)
class STCylinder:
    """Query volume: a disc of ``spatial_radius`` swept over ``[t - r_t, t + r_t]``."""

    center: STPoint
    spatial_radius: float
    temporal_radius: int
    temporal_unit: TemporalUnit = TemporalUnit.DAYS

    def __post_init__(self):
        if self.spatial_radius < 0 or self.temporal_radius < 0:
            raise GeometryError("cylinder radii must be non-negative")
        object.__setattr__(self, "temporal_unit", TemporalUnit.parse(self.temporal_unit))


@dataclass(frozen=True)
class StudyRegion:
    """Simple polygon (no holes) times a study period.

    ``boundary`` is stored open (the closing vertex is dropped if repeated).
    """

    boundary: np.ndarray
    period_start: int
    period_end: int
    area: float = field(init=False)
    duration: int = field(init=False)

    def __post_init__(self):
        ring = np.asarray(self.boundary, dtype=np.float64)
        if ring.ndim != 2 or ring.shape[1] != 2:
            raise GeometryError("boundary must be a sequence of (x, y) vertices")
        if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        if len(ring) < 3:
            raise GeometryError("polygon needs at least 3 vertices")
        if not np.all(np.isfinite(ring)):
            raise GeometryError("polygon vertices must be finite")
        ring.setflags(write=False)
        object.__setattr__(self, "boundary", ring)
        area = polygon_area(ring)
        if not LinearRing(ring).is_simple:
            raise GeometryError("polygon boundary is self-intersecting")
        duration = int(self.period_end) - int(self.period_start)
        if duration <= 0:
            raise GeometryError("study period must have positive duration")
        object.__setattr__(self, "period_start", int(self.period_start))
        object.__setattr__(self, "period_end", int(self.period_end))
        object.__setattr__(self, "area", area)
        object.__setattr__(self, "duration", duration)

    @classmethod
    def rectangle(cls, x0, y0, x1, y1, period_start, period_end) -> "StudyRegion":
        return cls(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]), period_start, period_end)

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Segment endpoint arrays ``(x0, y0, x1, y1)``, one entry per edge."""
        b = self.boundary
        nxt = np.roll(b, -1, axis=0)
        return b[:, 0], b[:, 1], nxt[:, 0], nxt[:, 1]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        b = self.boundary
        return float(b[:, 0].min()), float(b[:, 1].min()), float(b[:, 0].max()), float(b[:, 1].max())

    def domain(self) -> STEnvelope:
        x0, y0, x1, y1 = self.bounds
        return STEnvelope(x0, x1, y0, y1, self.period_start, self.period_end)

    def contains(self, x: float, y: float, t: int | None = None) -> bool:
        if t is not None and not (self.period_start <= t <= self.period_end):
            return False
        return point_in_polygon((x, y), self)

    def __eq__(self, other):
        if not isinstance(other, StudyRegion):
            return NotImplemented
        return (
            np.array_equal(self.boundary, other.boundary)
            and self.period_start == other.period_start
            and self.period_end == other.period_end
        )

    def __hash__(self):
        return hash((self.boundary.tobytes(), self.period_start, self.period_end))


def spatial_distance(p: STPoint, q: STPoint) -> float:
    dx = p.x - q.x
    dy = p.y - q.y
    return math.sqrt(dx * dx + dy * dy)


def temporal_distance(p: STPoint, q: STPoint) -> int:
    return abs(p.start_time - q.start_time)


def within_cylinder(cyl: STCylinder, p: STPoint) -> bool:
    return (
        spatial_distance(cyl.center, p) <= cyl.spatial_radius
        and temporal_distance(cyl.center, p) <= cyl.temporal_radius
    )


def envelope_intersects_cylinder(env: STEnvelope, cyl: STCylinder) -> bool:
    """Exact cylinder/cube intersection test.

    The spatial footprint test clamps the disc centre into the rectangle and
    compares the clamped distance with the radius; the temporal test is an
    interval overlap.
    """
    c = cyl.center
    ct = c.start_time
    if ct + cyl.temporal_radius < env.t_min or ct - cyl.temporal_radius > env.t_max:
        return False
    dx = c.x - min(max(c.x, env.x_min), env.x_max)
    dy = c.y - min(max(c.y, env.y_min), env.y_max)
    # same sqrt form as the point test, so rounding never causes a false negative
    return math.sqrt(dx * dx + dy * dy) <= cyl.spatial_radius


def envelopes_intersect_cylinder(envs: np.ndarray, cx, cy, ct, s, t) -> np.ndarray:
    """Vectorised form of :func:`envelope_intersects_cylinder`.

    ``envs`` has columns ``x_min, x_max, y_min, y_max, t_min, t_max``.
    """
    dx = cx - np.clip(cx, envs[:, 0], envs[:, 1])
    dy = cy - np.clip(cy, envs[:, 2], envs[:, 3])
    return (
        (np.sqrt(dx * dx + dy * dy) <= s)
        & (envs[:, 4] <= ct + t)
        & (envs[:, 5] >= ct - t)
    )


def polygon_area(boundary) -> float:
    """Absolute shoelace area of a ring."""
    b = boundary.boundary if isinstance(boundary, StudyRegion) else np.asarray(boundary, dtype=np.float64)
    if len(b) < 3:
        raise GeometryError("polygon needs at least 3 vertices")
    # shift to the first vertex so large projected offsets do not cancel
    x = b[:, 0] - b[0, 0]
    y = b[:, 1] - b[0, 1]
    area = abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))) / 2.0
    if area == 0.0:
        raise GeometryError("degenerate (zero-area) polygon")
    return area


def points_in_polygon(px, py, region: StudyRegion | np.ndarray) -> np.ndarray:
    """Even-odd ray casting for many points; boundary points count as inside."""
    if isinstance(region, StudyRegion):
        x0, y0, x1, y1 = region.edges
    else:
        b = np.asarray(region, dtype=np.float64)
        nxt = np.roll(b, -1, axis=0)
        x0, y0, x1, y1 = b[:, 0], b[:, 1], nxt[:, 0], nxt[:, 1]
    px = np.atleast_1d(np.asarray(px, dtype=np.float64))
    py = np.atleast_1d(np.asarray(py, dtype=np.float64))
    out = np.empty(px.shape, dtype=bool)
    step = max(1, _CHUNK_CELLS // len(x0))
    for lo in range(0, len(px), step):
        X = px[lo:lo + step, None]
        Y = py[lo:lo + step, None]
        straddle = (y0 > Y) != (y1 > Y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x0 + (Y - y0) * (x1 - x0) / (y1 - y0)
        odd = np.count_nonzero(straddle & (X < x_cross), axis=1) % 2 == 1
        cross = (x1 - x0) * (Y - y0) - (y1 - y0) * (X - x0)
        on_edge = (
            (cross == 0)
            & (X >= np.minimum(x0, x1)) & (X <= np.maximum(x0, x1))
            & (Y >= np.minimum(y0, y1)) & (Y <= np.maximum(y0, y1))
        )
        out[lo:lo + step] = odd | on_edge.any(axis=1)
    return out


def point_in_polygon(pt: Sequence[float], region: StudyRegion | np.ndarray) -> bool:
    return bool(points_in_polygon([pt[0]], [pt[1]], region)[0])


def point_arrays(points) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(xy, t)`` arrays for a point collection.

    Accepts a sequence of :class:`STPoint`, an ``(n, 3)`` array of
    ``x, y, t`` rows, or an already split ``(xy, t)`` pair.
    """
    if isinstance(points, tuple) and len(points) == 2 and isinstance(points[0], np.ndarray):
        xy, t = points
        return np.asarray(xy, dtype=np.float64).reshape(-1, 2), np.asarray(t, dtype=np.int64)
    if isinstance(points, np.ndarray):
        arr = points.reshape(-1, 3)
        return arr[:, :2].astype(np.float64), arr[:, 2].astype(np.int64)
    n = len(points)
    xy = np.empty((n, 2), dtype=np.float64)
    t = np.empty(n, dtype=np.int64)
    for i, p in enumerate(points):
        xy[i, 0] = p.x
        xy[i, 1] = p.y
        t[i] = p.start_time
    return xy, t
