"""Isotropic edge-correction weights.

The spatial weight of a pair is the fraction of the circle centred on the
first point, passing through the second, that lies inside the study polygon.
The temporal weight is 1 when the interval ``[t - u, t + u]`` lies inside the
study period and 1/2 otherwise.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import GeometryError, STPoint, StudyRegion, points_in_polygon

__all__ = [
    "spatial_isotropic_weight",
    "spatial_weights",
    "temporal_isotropic_weight",
    "temporal_weights",
    "pair_weight",
    "pair_weights",
]

TANGENT_EPS = 1e-9
ANGLE_EPS = 1e-9
_TWO_PI = 2.0 * math.pi
_CHUNK_CELLS = 2_000_000


_CANDIDATE_MARGIN = 1e-9


def _edge_ranges(ux, uy, x0, y0, ex, ey, a):
    """Squared min/max distance from each centre to each edge, plus vertex offsets."""
    fx = x0 - ux[:, None]
    fy = y0 - uy[:, None]
    f2 = fx * fx + fy * fy
    g2 = np.roll(f2, -1, axis=1)  # far end of each edge
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.clip(-(fx * ex + fy * ey) / a, 0.0, 1.0)
    p = np.where(a > 0, p, 0.0)
    qx = fx + p * ex
    qy = fy + p * ey
    return fx, fy, qx * qx + qy * qy, np.maximum(f2, g2), f2.max(axis=1)


def _weights_chunk(cx, cy, d, region: StudyRegion) -> np.ndarray:
    x0, y0, x1, y1 = region.edges
    ex = x1 - x0
    ey = y1 - y0
    a = ex * ex + ey * ey

    # rows arrive grouped by centre; per-centre work is done once per run
    new_run = np.ones(len(d), dtype=bool)
    new_run[1:] = (cx[1:] != cx[:-1]) | (cy[1:] != cy[:-1])
    run = np.cumsum(new_run) - 1
    starts = np.flatnonzero(new_run)
    fx, fy, min2, max2, far2 = _edge_ranges(cx[starts], cy[starts], x0, y0, ex, ey, a)

    # no crossing: the circle is either wholly inside or encloses the polygon
    d2 = d * d
    w = np.where(d2 < far2[run], 1.0, 0.0)
    w[d == 0.0] = 1.0

    # an edge can only cross the circle if the radius lies in its distance range
    lo_ok = min2[run] <= d2[:, None] * (1.0 + _CANDIDATE_MARGIN)
    cand = lo_ok & (d2[:, None] <= max2[run] * (1.0 + _CANDIDATE_MARGIN)) & (d > 0.0)[:, None]
    r, e = np.nonzero(cand)
    if r.size == 0:
        return w

    # exact crossings on candidate (row, edge) entries only
    rr = run[r]
    fxr = fx[rr, e]
    fyr = fy[rr, e]
    exe, eye, ae = ex[e], ey[e], a[e]
    b = 2.0 * (fxr * exe + fyr * eye)
    c = (fxr * fxr + fyr * fyr) - d2[r]
    four_ac = 4.0 * ae * c
    disc = b * b - four_ac
    crossing = (disc > TANGENT_EPS * (b * b + np.abs(four_ac))) & (ae > 0)
    root = np.sqrt(np.where(crossing, disc, 0.0))
    rows, angs = [], []
    with np.errstate(divide="ignore", invalid="ignore"):
        for sgn in (-1.0, 1.0):
            s = (-b + sgn * root) / (2.0 * ae)
            ok = crossing & (s >= 0.0) & (s <= 1.0)
            ang = np.arctan2(fyr[ok] + s[ok] * eye[ok], fxr[ok] + s[ok] * exe[ok])
            angs.append(np.where(ang < 0.0, ang + _TWO_PI, ang))
            rows.append(r[ok])
    rows = np.concatenate(rows)
    angs = np.concatenate(angs)
    if rows.size == 0:
        return w
    order = np.lexsort((angs, rows))
    rows, angs = rows[order], angs[order]

    # drop near-duplicates (circle through a vertex yields the angle twice),
    # including across the 0 / 2pi seam
    first = np.ones(len(rows), dtype=bool)
    first[1:] = rows[1:] != rows[:-1]
    last = np.ones(len(rows), dtype=bool)
    last[:-1] = first[1:]
    dup = np.zeros(len(rows), dtype=bool)
    dup[1:] = ~first[1:] & ((angs[1:] - angs[:-1]) < ANGLE_EPS)
    seg_start = np.flatnonzero(first)
    seg_len = np.diff(np.append(seg_start, len(rows)))
    seg_first_ang = np.repeat(angs[seg_start], seg_len)
    dup |= last & ~first & ((seg_first_ang + _TWO_PI - angs) < ANGLE_EPS)
    keep = ~dup
    rows, angs = rows[keep], angs[keep]

    first = np.ones(len(rows), dtype=bool)
    first[1:] = rows[1:] != rows[:-1]
    seg_start = np.flatnonzero(first)
    seg_len = np.diff(np.append(seg_start, len(rows)))
    multi = np.repeat(seg_len >= 2, seg_len)
    rows, angs = rows[multi], angs[multi]
    seg_start = seg_start[seg_len >= 2]
    seg_len = seg_len[seg_len >= 2]
    if rows.size == 0:
        return w
    seg_start = np.concatenate([[0], np.cumsum(seg_len)[:-1]])

    # arcs between consecutive angles; the last arc wraps to the first + 2pi
    nxt = np.empty_like(angs)
    nxt[:-1] = angs[1:]
    seg_end = seg_start + seg_len - 1
    nxt[seg_end] = angs[seg_start] + _TWO_PI
    span = nxt - angs
    mid = 0.5 * (angs + nxt)
    rad = d[rows]
    inside = points_in_polygon(cx[rows] + rad * np.cos(mid), cy[rows] + rad * np.sin(mid), region)
    total = np.add.reduceat(np.where(inside, span, 0.0), seg_start)
    w[rows[seg_start]] = total / _TWO_PI
    return w


def spatial_weights(cx, cy, d, region: StudyRegion) -> np.ndarray:
    """Vectorised spatial isotropic weights.

    Parameters
    ----------
    cx, cy : array_like
        Circle centres; assumed to lie inside ``region`` (not checked here).
    d : array_like
        Circle radii, ``>= 0``.
    region : StudyRegion

    Returns
    -------
    numpy.ndarray
        Inside fractions in ``(0, 1]``.

    Raises
    ------
    GeometryError
        If a circle lies entirely outside the polygon, which only happens
        when the radius exceeds every centre-to-vertex distance.
    """
    cx = np.asarray(cx, dtype=np.float64).ravel()
    cy = np.asarray(cy, dtype=np.float64).ravel()
    d = np.asarray(d, dtype=np.float64).ravel()
    out = np.empty(len(d), dtype=np.float64)
    step = max(1, _CHUNK_CELLS // len(region.boundary))
    for lo in range(0, len(d), step):
        sl = slice(lo, lo + step)
        out[sl] = _weights_chunk(cx[sl], cy[sl], d[sl], region)
    if len(out) and not (out > 0.0).all():
        bad = int(np.argmin(out))
        raise GeometryError(
            f"circle of radius {d[bad]} around ({cx[bad]}, {cy[bad]}) lies outside the region"
        )
    return out


def spatial_isotropic_weight(center, d: float, region: StudyRegion) -> float:
    if isinstance(center, STPoint):
        x, y = center.x, center.y
    else:
        x, y = center
    if d < 0:
        raise GeometryError("distance must be non-negative")
    if not region.contains(x, y):
        raise GeometryError(f"centre ({x}, {y}) is outside the study region")
    return float(spatial_weights([x], [y], [d], region)[0])


def temporal_weights(ct, u, region: StudyRegion) -> np.ndarray:
    ct = np.asarray(ct)
    u = np.asarray(u)
    inside = (ct - u >= region.period_start) & (ct + u <= region.period_end)
    return np.where(inside, 1.0, 0.5)


def temporal_isotropic_weight(center_t: int, u: int, region: StudyRegion) -> float:
    if center_t - u >= region.period_start and center_t + u <= region.period_end:
        return 1.0
    return 0.5


def pair_weights(cx, cy, ct, d, u, region: StudyRegion, cache=None) -> np.ndarray:
    """Product of spatial and temporal weights for many pairs."""
    if cache is None:
        return spatial_weights(cx, cy, d, region) * temporal_weights(ct, u, region)
    omega = cache.spatial_batch(cx, cy, d, lambda x, y, r: spatial_weights(x, y, r, region))
    nu = cache.temporal_batch(ct, u, lambda t, v: temporal_weights(t, v, region))
    return omega * nu


def pair_weight(center: STPoint, d: float, u: int, region: StudyRegion, cache=None) -> float:
    if cache is None:
        return spatial_isotropic_weight(center, d, region) * temporal_isotropic_weight(
            center.start_time, u, region
        )
    if not region.contains(center.x, center.y):
        raise GeometryError(f"centre ({center.x}, {center.y}) is outside the study region")
    return float(pair_weights([center.x], [center.y], [center.start_time], [d], [u], region, cache)[0])
