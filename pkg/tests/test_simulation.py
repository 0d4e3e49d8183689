import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spacetime_k.estimator import DistanceGrid, EstimatorError, EstimatorOptions, KSurface, estimate_surface, l_surface
from spacetime_k.geometry import STPoint, points_in_polygon
from spacetime_k.simulation import (
    cstr_arrays,
    envelopes,
    generate_bootstrap,
    generate_cstr,
    generate_permutation,
    run_simulations,
    significance_level,
    simulate_arrays,
)


def test_cstr(l_region):
    assert generate_cstr(0, l_region, 1) == []
    pts = generate_cstr(2000, l_region, 5)
    xy = np.array([[p.x, p.y] for p in pts])
    t = np.array([p.t for p in pts])
    assert points_in_polygon(xy[:, 0], xy[:, 1], l_region).all()
    assert t.min() >= 0 and t.max() <= 100
    assert generate_cstr(50, l_region, 9) == generate_cstr(50, l_region, 9)
    # the two arms of the L carry points in proportion to their area
    frac = (xy[:, 1] > 4000).mean()
    assert abs(frac - 24 / 64) < 0.05


def test_bootstrap_and_permutation():
    p = [STPoint(1, 2, 3)]
    assert generate_bootstrap(p, 0) == p
    assert generate_permutation(p, 0) == p
    pts = [STPoint(float(i), float(i * i), i % 7) for i in range(60)]
    boot = generate_bootstrap(pts, 4)
    assert set(boot) <= set(pts) and len(boot) == 60
    assert generate_bootstrap(pts, 4) == boot
    perm = generate_permutation(pts, 4)
    assert sorted(q.t for q in perm) == sorted(q.t for q in pts)
    assert [(q.x, q.y) for q in perm] == [(q.x, q.y) for q in pts]
    with pytest.raises(EstimatorError):
        generate_permutation([], 0)
    with pytest.raises(EstimatorError):
        simulate_arrays("nope", np.zeros((1, 2)), np.zeros(1, int), None, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_keeps_spatial_distances(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 100, (30, 2))
    t = rng.integers(0, 50, 30)
    xy2, t2 = simulate_arrays("permutation", xy, t, None, seed)
    d = lambda a: np.sort(np.hypot(*(a[:, None, :] - a[None, :, :]).transpose(2, 0, 1)).ravel())
    np.testing.assert_array_equal(d(xy2), d(xy))
    np.testing.assert_array_equal(np.sort(t2), np.sort(t))


def test_envelopes():
    g = DistanceGrid([1.0], [1.0])
    sims = [KSurface(g, [[v]], "L") for v in (1.0, 3.0, 2.0)]
    up, lo = envelopes(sims)
    assert up.values.tolist() == [[3.0]] and lo.values.tolist() == [[1.0]]
    up, lo = envelopes(sims[:1])
    assert up == lo == sims[0]
    with pytest.raises(EstimatorError):
        envelopes([])
    assert significance_level(39) == 1 / 40


def test_run_simulations(square):
    g = DistanceGrid.from_steps(3000, 1000, 20, 10)
    with pytest.raises(EstimatorError):
        run_simulations([STPoint(1, 1, 1)], square, g, "permutation", 1, 0)
    two = [STPoint(10, 10, 1), STPoint(20, 20, 5)]
    assert len(run_simulations(two, square, g, "permutation", 1, 0)) == 1
    xy, t = cstr_arrays(200, square, 2)
    a = run_simulations((xy, t), square, g, "csr", 3, 100)
    b = run_simulations((xy, t), square, g, "csr", 3, 100, EstimatorOptions(use_cache=True))
    assert a == b and all(s.kind == "L" for s in a)
    # seed ladder: simulation r is reproducible on its own
    assert run_simulations((xy, t), square, g, "csr", 1, 102)[0] == a[2]


def test_permutation_breaks_temporal_clustering(square):
    rng = np.random.default_rng(1)
    xy = rng.uniform(1000, 9000, (300, 2))
    t = (xy[:, 0] // 100).astype(np.int64)  # time tracks x: strong space-time interaction
    g = DistanceGrid.from_steps(1000, 500, 5, 5)
    est = l_surface(estimate_surface((xy, t), square, g))
    sims = run_simulations((xy, t), square, g, "permutation", 9, 0)
    up, _ = envelopes(sims)
    assert est.values[-1, -1] > up.values[-1, -1]


@pytest.mark.slow
def test_csr_exceedance_rate(square):
    """Under the null, exceeding the max of m simulations has probability 1/(m+1)."""
    m, reps = 9, 100
    g = DistanceGrid([1500.0], [10.0])
    hits = 0
    for r in range(reps):
        xy, t = cstr_arrays(150, square, 10_000 + r)
        est = l_surface(estimate_surface((xy, t), square, g))
        up, _ = envelopes(run_simulations((xy, t), square, g, "csr", m, 1000 * r))
        hits += est.values[0, 0] > up.values[0, 0]
    p = 1 / (m + 1)
    sd = np.sqrt(reps * p * (1 - p))
    assert abs(hits - reps * p) <= 3 * sd
