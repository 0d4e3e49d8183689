"""Space-time Ripley's K and L surfaces.

For every ordered pair ``(i, j)``, ``j != i``, within the largest thresholds,
``1 / (w_ij * v_ij)`` is added to the histogram cell of the smallest grid
distances covering ``(d_ij, u_ij)``. A 2-D cumulative sum scaled by
``A * D / n**2`` then gives K-hat on the whole grid.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .edge_correction import pair_weights
from .geometry import GeometryError, StudyRegion, point_arrays, points_in_polygon
from .st_index import DEFAULT_NODE_CAPACITY, STRTree
from .weight_cache import WeightCache

__all__ = [
    "EstimatorError",
    "DistanceGrid",
    "KSurface",
    "EstimatorOptions",
    "intensity",
    "theoretical_k",
    "theoretical_surface",
    "k_to_l",
    "l_surface",
    "estimate_surface",
    "diff_surface",
    "pair_histogram",
    "finish_surface",
    "check_inside",
]

# pairs are weighted and binned in blocks of this many, in canonical order
PAIR_BLOCK = 1 << 16
_BRUTE_CELLS = 4_000_000


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class DistanceGrid:
    s_values: np.ndarray
    t_values: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s_values, dtype=np.float64)
        t = np.asarray(self.t_values, dtype=np.float64)
        for name, v in (("spatial", s), ("temporal", t)):
            if v.ndim != 1 or len(v) == 0:
                raise EstimatorError(f"{name} distances must be a non-empty 1-D sequence")
            if not (v > 0).all() or not (np.diff(v) > 0).all():
                raise EstimatorError(f"{name} distances must be positive and strictly increasing")
        s.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "s_values", s)
        object.__setattr__(self, "t_values", t)

    @classmethod
    def from_steps(cls, s_max: float, s_step: float, t_max: float, t_step: float) -> "DistanceGrid":
        """Grid ``step, 2*step, ..., max`` on both axes (zero excluded)."""
        if s_step <= 0 or t_step <= 0:
            raise EstimatorError("steps must be positive")
        cs = int(math.floor(s_max / s_step + 1e-9))
        ct = int(math.floor(t_max / t_step + 1e-9))
        return cls(np.arange(1, cs + 1) * float(s_step), np.arange(1, ct + 1) * float(t_step))

    @property
    def s_max(self) -> float:
        return float(self.s_values[-1])

    @property
    def t_max(self) -> float:
        return float(self.t_values[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.s_values), len(self.t_values)

    def __eq__(self, other):
        if not isinstance(other, DistanceGrid):
            return NotImplemented
        return np.array_equal(self.s_values, other.s_values) and np.array_equal(self.t_values, other.t_values)

    def __hash__(self):
        return hash((self.s_values.tobytes(), self.t_values.tobytes()))


@dataclass
class KSurface:
    """A ``c_s x c_t`` surface of K, L or difference values over a grid."""

    grid: DistanceGrid
    values: np.ndarray
    kind: str = "K"
    telemetry: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise EstimatorError(f"surface shape {self.values.shape} does not match grid {self.grid.shape}")
        if self.kind not in ("K", "L", "Diff"):
            raise EstimatorError(f"unknown surface kind {self.kind!r}")

    def __eq__(self, other):
        if not isinstance(other, KSurface):
            return NotImplemented
        return self.kind == other.kind and self.grid == other.grid and np.array_equal(self.values, other.values)


@dataclass
class EstimatorOptions:
    use_index: bool = True
    use_cache: bool = False
    coord_tolerance: float = 0.0
    dist_tolerance: float = 0.0
    node_capacity: int = DEFAULT_NODE_CAPACITY

    def new_cache(self) -> WeightCache | None:
        if not self.use_cache:
            return None
        return WeightCache(self.coord_tolerance, self.dist_tolerance)


def intensity(n: int, region: StudyRegion) -> float:
    """Points per unit of area x time."""
    if n < 1:
        raise EstimatorError("intensity needs at least one point")
    if region.area <= 0 or region.duration <= 0:
        raise EstimatorError("region must have positive area and duration")
    return n / (region.area * region.duration)


def theoretical_k(s, t):
    """K under complete spatiotemporal randomness: ``2 pi s^2 t``."""
    return 2.0 * np.pi * np.square(s) * t


def theoretical_surface(grid: DistanceGrid) -> KSurface:
    return KSurface(grid, theoretical_k(grid.s_values[:, None], grid.t_values[None, :]), "K")


def k_to_l(k, s, t):
    """``sqrt(K / (2 pi t)) - s``; zero under complete spatiotemporal randomness."""
    k = np.asarray(k, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise EstimatorError("L is undefined at temporal distance 0")
    if np.any(k < 0):
        raise EstimatorError("K must be non-negative")
    out = np.sqrt(k / (2.0 * np.pi * t)) - s
    return float(out) if out.ndim == 0 else out


def l_surface(k: KSurface) -> KSurface:
    g = k.grid
    return KSurface(g, k_to_l(k.values, g.s_values[:, None], g.t_values[None, :]), "L", dict(k.telemetry))


def diff_surface(est: KSurface, upper: KSurface) -> KSurface:
    """Exceedance of the estimate above the upper envelope, zero elsewhere."""
    if est.grid != upper.grid:
        raise EstimatorError("surfaces are defined on different grids")
    diff = est.values - upper.values
    return KSurface(est.grid, np.where(diff > 0, diff, 0.0), "Diff")


def check_inside(xy: np.ndarray, t: np.ndarray, region: StudyRegion) -> None:
    in_time = (t >= region.period_start) & (t <= region.period_end)
    if not in_time.all():
        bad = int(np.argmin(in_time))
        raise EstimatorError(f"point #{bad} (t={t[bad]}) is outside the study period")
    inside = points_in_polygon(xy[:, 0], xy[:, 1], region)
    if not inside.all():
        bad = int(np.argmin(inside))
        raise EstimatorError(f"point #{bad} ({xy[bad, 0]}, {xy[bad, 1]}) is outside the study region")


class _Accumulator:
    """Bins weighted pairs; fed in canonical order, flushed in fixed-size blocks."""

    def __init__(self, cx, cy, ct, lxy, lt, region, grid, cache):
        self.cx, self.cy, self.ct = cx, cy, ct
        self.lxy, self.lt = lxy, lt
        self.region = region
        self.grid = grid
        self.cache = cache
        self.cs, self.ctn = grid.shape
        self.hist = np.zeros(self.cs * self.ctn, dtype=np.float64)
        self.pending_c: list[np.ndarray] = []
        self.pending_l: list[np.ndarray] = []
        self.pending = 0
        self.pairs = 0

    def add(self, ci: np.ndarray, lj: np.ndarray) -> None:
        if len(ci) == 0:
            return
        self.pending_c.append(ci)
        self.pending_l.append(lj)
        self.pending += len(ci)
        if self.pending >= PAIR_BLOCK:
            self._flush(final=False)

    def _flush(self, final: bool) -> None:
        if not self.pending:
            return
        ci = np.concatenate(self.pending_c)
        lj = np.concatenate(self.pending_l)
        cut = len(ci) if final else (len(ci) // PAIR_BLOCK) * PAIR_BLOCK
        for lo in range(0, cut, PAIR_BLOCK):
            self._bin(ci[lo:min(lo + PAIR_BLOCK, cut)], lj[lo:min(lo + PAIR_BLOCK, cut)])
        self.pending_c = [ci[cut:]] if cut < len(ci) else []
        self.pending_l = [lj[cut:]] if cut < len(ci) else []
        self.pending = len(ci) - cut

    def _bin(self, ci, lj) -> None:
        cx = self.cx[ci]
        cy = self.cy[ci]
        ct = self.ct[ci]
        dx = self.lxy[lj, 0] - cx
        dy = self.lxy[lj, 1] - cy
        d = np.sqrt(dx * dx + dy * dy)
        u = np.abs(self.lt[lj] - ct)
        w = pair_weights(cx, cy, ct, d, u, self.region, self.cache)
        bs = np.searchsorted(self.grid.s_values, d, side="left")
        bt = np.searchsorted(self.grid.t_values, u, side="left")
        self.hist += np.bincount(bs * self.ctn + bt, weights=1.0 / w, minlength=len(self.hist))
        self.pairs += len(ci)

    def result(self) -> np.ndarray:
        self._flush(final=True)
        return self.hist.reshape(self.cs, self.ctn)


def pair_histogram(
    center_xy, center_t, center_ids, local_xy, local_t, local_ids,
    region: StudyRegion, grid: DistanceGrid, use_index: bool = True,
    cache: WeightCache | None = None, node_capacity: int = DEFAULT_NODE_CAPACITY,
) -> tuple[np.ndarray, dict]:
    """Pre-cumulative histogram of weighted pair counts.

    Each centre is paired with every local point within ``(s_max, t_max)``
    whose record id differs from the centre's; the centre supplies the edge
    weights. Centres are processed in ascending id order and neighbours in
    ascending id order, so the result does not depend on ``use_index``.

    Returns
    -------
    hist : numpy.ndarray
        ``c_s x c_t`` weighted counts.
    telemetry : dict
        ``comparisons``, ``pairs``, ``index_build_s``, ``query_s``.
    """
    center_xy = np.asarray(center_xy, dtype=np.float64).reshape(-1, 2)
    center_t = np.asarray(center_t, dtype=np.int64)
    center_ids = np.asarray(center_ids, dtype=np.int64)
    local_xy = np.asarray(local_xy, dtype=np.float64).reshape(-1, 2)
    local_t = np.asarray(local_t, dtype=np.int64)
    local_ids = np.asarray(local_ids, dtype=np.int64)

    c_order = np.argsort(center_ids, kind="stable")
    center_xy, center_t, center_ids = center_xy[c_order], center_t[c_order], center_ids[c_order]
    l_order = np.argsort(local_ids, kind="stable")
    local_xy, local_t, local_ids = local_xy[l_order], local_t[l_order], local_ids[l_order]

    s_max = grid.s_max
    t_max = int(math.floor(grid.t_max))
    cx = np.ascontiguousarray(center_xy[:, 0])
    cy = np.ascontiguousarray(center_xy[:, 1])
    acc = _Accumulator(cx, cy, center_t, local_xy, local_t, region, grid, cache)
    telemetry = {"comparisons": 0, "index_build_s": 0.0}
    t0 = time.perf_counter()
    if len(center_t) and len(local_t):
        if use_index:
            tb = time.perf_counter()
            # ids handed to the tree are positions in the id-sorted local arrays
            tree = STRTree((local_xy, local_t), node_capacity)
            telemetry["index_build_s"] = time.perf_counter() - tb
            for k in range(len(center_t)):
                nb = tree.query_ids(cx[k], cy[k], int(center_t[k]), s_max, t_max)
                nb = nb[local_ids[nb] != center_ids[k]]
                acc.add(np.full(len(nb), k, dtype=np.int64), nb)
            telemetry["comparisons"] = tree.candidate_comparisons
        else:
            step = max(1, _BRUTE_CELLS // len(local_t))
            lx = local_xy[:, 0]
            ly = local_xy[:, 1]
            for lo in range(0, len(center_t), step):
                hi = min(lo + step, len(center_t))
                dx = lx[None, :] - cx[lo:hi, None]
                dy = ly[None, :] - cy[lo:hi, None]
                near = (np.sqrt(dx * dx + dy * dy) <= s_max) & (
                    np.abs(local_t[None, :] - center_t[lo:hi, None]) <= t_max
                )
                near &= local_ids[None, :] != center_ids[lo:hi, None]
                rows, cols = np.nonzero(near)
                acc.add(rows + lo, cols)
            self_pairs = np.isin(center_ids, local_ids).sum()
            telemetry["comparisons"] = int(len(center_t) * len(local_t) - self_pairs)
    hist = acc.result()
    telemetry["pairs"] = acc.pairs
    telemetry["query_s"] = time.perf_counter() - t0 - telemetry["index_build_s"]
    return hist, telemetry


def finish_surface(hist: np.ndarray, n: int, region: StudyRegion, grid: DistanceGrid) -> KSurface:
    """Cumulative sum over both axes, scaled by ``A * D / n**2``."""
    cum = np.cumsum(np.cumsum(hist, axis=0), axis=1)
    return KSurface(grid, cum * (region.area * region.duration / float(n * n)), "K")


def estimate_surface(
    points, region: StudyRegion, grid: DistanceGrid,
    options: EstimatorOptions | None = None, cache: WeightCache | None = None,
) -> KSurface:
    """Edge-corrected space-time K-hat over ``grid``.

    ``cache`` is used only when ``options.use_cache`` is set; a fresh cache
    is created when none is supplied.
    """
    options = options or EstimatorOptions()
    xy, t = point_arrays(points)
    n = len(t)
    if n < 2:
        raise EstimatorError("K estimation needs at least two points")
    check_inside(xy, t, region)
    if options.use_cache:
        cache = cache if cache is not None else options.new_cache()
    else:
        cache = None
    ids = np.arange(n, dtype=np.int64)
    t0 = time.perf_counter()
    try:
        hist, tele = pair_histogram(
            xy, t, ids, xy, t, ids, region, grid, options.use_index, cache, options.node_capacity
        )
    except GeometryError as exc:
        raise EstimatorError(str(exc)) from exc
    surface = finish_surface(hist, n, region, grid)
    tele["compute_s"] = time.perf_counter() - t0
    if cache is not None:
        tele["cache"] = cache.stats()
    surface.telemetry = tele
    return surface
