"""Null-model simulations and significance envelopes.

Three generators are supported: Monte Carlo CSTR (uniform over polygon x
period), bootstrap (resampling with replacement) and random permutation of
time labels. Replicate ``r`` uses seed ``base_seed + r``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .estimator import (
    DistanceGrid,
    EstimatorError,
    EstimatorOptions,
    KSurface,
    estimate_surface,
    l_surface,
)
from .geometry import STPoint, StudyRegion, point_arrays, points_in_polygon
from .weight_cache import WeightCache

__all__ = [
    "METHODS",
    "cstr_arrays",
    "bootstrap_arrays",
    "permutation_arrays",
    "simulate_arrays",
    "generate_cstr",
    "generate_bootstrap",
    "generate_permutation",
    "run_simulations",
    "envelopes",
    "significance_level",
]

METHODS = ("csr", "bootstrap", "permutation")


def _to_points(xy: np.ndarray, t: np.ndarray) -> list[STPoint]:
    return [STPoint(float(x), float(y), int(tt)) for (x, y), tt in zip(xy.tolist(), t.tolist())]


def cstr_arrays(n: int, region: StudyRegion, seed) -> tuple[np.ndarray, np.ndarray]:
    """``n`` points uniform over the polygon by bounding-box rejection sampling.

    Timestamps are uniform integers on ``[period_start, period_end]``.
    """
    if n < 0:
        raise EstimatorError("n must be non-negative")
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = region.bounds
    fill = region.area / ((x1 - x0) * (y1 - y0))
    xy = np.empty((0, 2))
    while len(xy) < n:
        need = n - len(xy)
        batch = int(need / fill * 1.1) + 16
        cand = np.column_stack([rng.uniform(x0, x1, batch), rng.uniform(y0, y1, batch)])
        keep = points_in_polygon(cand[:, 0], cand[:, 1], region)
        xy = np.concatenate([xy, cand[keep][:need]])
    t = rng.integers(region.period_start, region.period_end, size=n, endpoint=True)
    return xy, t.astype(np.int64)


def bootstrap_arrays(xy, t, seed) -> tuple[np.ndarray, np.ndarray]:
    n = len(t)
    if n < 1:
        raise EstimatorError("bootstrap needs at least one point")
    idx = np.random.default_rng(seed).integers(0, n, size=n)
    return xy[idx], t[idx]


def permutation_arrays(xy, t, seed) -> tuple[np.ndarray, np.ndarray]:
    if len(t) < 1:
        raise EstimatorError("permutation needs at least one point")
    return xy.copy(), np.random.default_rng(seed).permutation(t)


def simulate_arrays(method: str, xy, t, region: StudyRegion, seed):
    if method == "csr":
        return cstr_arrays(len(t), region, seed)
    if method == "bootstrap":
        return bootstrap_arrays(xy, t, seed)
    if method == "permutation":
        return permutation_arrays(xy, t, seed)
    raise EstimatorError(f"unknown simulation method {method!r}; expected one of {METHODS}")


def generate_cstr(n: int, region: StudyRegion, seed) -> list[STPoint]:
    return _to_points(*cstr_arrays(n, region, seed))


def generate_bootstrap(points: Sequence[STPoint], seed) -> list[STPoint]:
    """``n`` draws with replacement from the observed points."""
    if len(points) < 1:
        raise EstimatorError("bootstrap needs at least one point")
    idx = np.random.default_rng(seed).integers(0, len(points), size=len(points))
    return [points[i] for i in idx]


def generate_permutation(points: Sequence[STPoint], seed) -> list[STPoint]:
    """Copy of the points with their timestamps randomly exchanged."""
    if len(points) < 1:
        raise EstimatorError("permutation needs at least one point")
    _, t = point_arrays(points)
    shuffled = np.random.default_rng(seed).permutation(t)
    return [
        STPoint(p.x, p.y, int(tt), int(tt), p.overlap_count, p.zone_id)
        for p, tt in zip(points, shuffled)
    ]


def run_simulations(
    points, region: StudyRegion, grid: DistanceGrid, method: str, m: int, base_seed: int,
    options: EstimatorOptions | None = None, cache: WeightCache | None = None,
    estimate: Callable[..., KSurface] | None = None,
) -> list[KSurface]:
    """L surfaces of ``m`` simulated datasets.

    The weight cache, if any, is frozen first so that simulations only read
    what the estimation phase stored. ``estimate`` may replace the
    single-node estimator, e.g. with a partitioned runtime; it is called as
    ``estimate((xy, t), cache)``.
    """
    if m < 1:
        raise EstimatorError("number of simulations must be >= 1")
    options = options or EstimatorOptions()
    if options.use_cache and cache is None:
        cache = options.new_cache()
    if cache is not None:
        cache.freeze()
    if estimate is None:
        def estimate(data, c):
            return estimate_surface(data, region, grid, options, c)
    xy, t = point_arrays(points)
    out = []
    for r in range(m):
        sim = simulate_arrays(method, xy, t, region, base_seed + r)
        out.append(l_surface(estimate(sim, cache)))
    return out


def envelopes(sims: Sequence[KSurface]) -> tuple[KSurface, KSurface]:
    """Pointwise maximum and minimum over simulated surfaces."""
    if not sims:
        raise EstimatorError("need at least one simulated surface")
    grid = sims[0].grid
    if any(s.grid != grid for s in sims):
        raise EstimatorError("simulated surfaces are defined on different grids")
    stack = np.stack([s.values for s in sims])
    kind = sims[0].kind
    return KSurface(grid, stack.max(axis=0), kind), KSurface(grid, stack.min(axis=0), kind)


def significance_level(m: int) -> float:
    """One-sided level of exceeding the upper envelope of ``m`` simulations."""
    return 1.0 / (m + 1)
