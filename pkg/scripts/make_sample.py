"""Regenerate the bundled sample dataset and the golden report for it.

The golden surfaces come from the brute-force reference in tests/oracle.py,
evaluated on the observed data and on the simulated datasets the CLI draws
(same generator, seeds seed..seed+m-1).

    python3 scripts/make_sample.py
"""

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import oracle  # noqa: E402

from spacetime_k.geometry import StudyRegion, points_in_polygon  # noqa: E402
from spacetime_k.simulation import cstr_arrays  # noqa: E402

DATA = ROOT / "src" / "spacetime_k" / "data"
GOLDEN = ROOT / "tests" / "data" / "golden_sample.json"

# concave 12-gon, metres
RING = [
    (0, 0), (12000, 0), (15000, 3000), (15000, 9000), (11000, 9000), (10000, 6000),
    (7000, 6500), (6000, 10000), (2000, 11000), (-1000, 8000), (1000, 5000), (-1500, 2000),
]
PERIOD = (0, 365)
GRID = dict(smax=2000.0, sstep=100.0, tmax=20.0, tstep=1.0)
SIMS, SEED = 9, 7


def make_points(n=1000, seed=2024):
    rng = np.random.default_rng(seed)
    region = StudyRegion(np.array(RING, float), *PERIOD)
    xy_u, t_u = cstr_arrays(400, region, rng)
    centres = [(3000, 2500, 60), (11000, 3000, 150), (13000, 7000, 250), (3000, 8500, 300)]
    xs, ts = [], []
    while sum(len(x) for x in xs) < n - 400:
        cx, cy, ct = centres[rng.integers(len(centres))]
        p = rng.normal([cx, cy], 600, size=(1, 2))
        tt = int(np.clip(np.rint(rng.normal(ct, 8)), *PERIOD))
        if points_in_polygon(p[:, 0], p[:, 1], region)[0]:
            xs.append(p)
            ts.append(tt)
    xy = np.vstack([xy_u, np.vstack(xs)])
    t = np.concatenate([t_u, np.array(ts)])
    # make sure both period ends occur so the inferred period is PERIOD
    t[0], t[1] = PERIOD
    order = rng.permutation(n)
    return xy[order], t[order]


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    xy, t = make_points()
    with open(DATA / "sample_points.csv", "w") as fh:
        fh.write("id,x,y,t\n")
        for i, ((x, y), tt) in enumerate(zip(xy.tolist(), t.tolist())):
            fh.write(f"{i},{x!r},{y!r},{tt}\n")
    ring = RING + [RING[0]]
    (DATA / "sample_boundary.wkt").write_text(
        "POLYGON ((" + ", ".join(f"{x} {y}" for x, y in ring) + "))\n")

    # reread exactly what the CLI will see
    arr = np.loadtxt(DATA / "sample_points.csv", delimiter=",", skiprows=1)
    xy, t = arr[:, 1:3], arr[:, 3].astype(np.int64)
    s_vals = [GRID["sstep"] * (k + 1) for k in range(20)]
    t_vals = [GRID["tstep"] * (k + 1) for k in range(20)]
    region = StudyRegion(np.array(RING, float), *PERIOD)
    k = oracle.k_surface(xy, t, RING, *PERIOD, s_vals, t_vals)
    l = oracle.l_from_k(k, s_vals, t_vals)
    sims = []
    for r in range(SIMS):
        sxy, st = cstr_arrays(len(t), region, SEED + r)
        sims.append(oracle.l_from_k(oracle.k_surface(sxy, st, RING, *PERIOD, s_vals, t_vals), s_vals, t_vals))
    upper, lower = np.max(sims, axis=0), np.min(sims, axis=0)
    s_col = np.array(s_vals)[:, None]
    t_row = np.array(t_vals)[None, :]
    golden = {
        "args": ["--smax", "2000", "--sstep", "100", "--tmax", "20", "--tstep", "1",
                 "--sims", str(SIMS), "--seed", str(SEED)],
        "grid": {"s": s_vals, "t": t_vals},
        "k_hat": k.tolist(),
        "l_hat": l.tolist(),
        "theoretical_k": (2 * np.pi * s_col ** 2 * t_row).tolist(),
        "envelope": {"upper_l": upper.tolist(), "lower_l": lower.tolist()},
        "diff_upper": np.where(l > upper, l - upper, 0.0).tolist(),
    }
    GOLDEN.write_text(json.dumps(golden, indent=1) + "\n")


if __name__ == "__main__":
    main()
