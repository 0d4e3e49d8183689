"""Command-line front end.

``spacetime-k run`` ingests a CSV of events and a polygon boundary, runs the
estimation (and optional simulations), and writes a JSON report. ``spacetime-k
worker`` starts a worker process for distributed mode.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon, shape

from .codec import DecodeError
from .estimator import DistanceGrid, EstimatorError, EstimatorOptions, KSurface
from .geometry import GeometryError, StudyRegion, TemporalUnit, points_in_polygon
from .partitioner import PartitionError
from .runtime import JobSpec, RuntimeFailure, acceleration_factor, run_distributed, run_local, serve, \
    speedup_factor

__all__ = ["main", "build_parser", "ingest", "read_points", "read_boundary", "DataError", "UNIT_SECONDS"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

UNIT_SECONDS = {
    TemporalUnit.SECONDS: 1,
    TemporalUnit.MINUTES: 60,
    TemporalUnit.HOURS: 3600,
    TemporalUnit.DAYS: 86400,
    TemporalUnit.MONTHS: 30 * 86400,
}
UNIT_NAMES = [u.name.lower() for u in TemporalUnit]
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class DataError(ValueError):
    """Bad input data (exit code 2)."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- ingest -------------------------------------------------------------------


def parse_time(text: str, unit: TemporalUnit) -> int:
    """Integer timestamp, or an ISO-8601 date/datetime converted to ``unit``.

    Dates count whole units since 1970-01-01 UTC (months are 30 days).
    """
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise DataError(f"unparseable timestamp {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    seconds = (dt - _EPOCH).total_seconds()
    return int(math.floor(seconds / UNIT_SECONDS[unit]))


def read_points(path, unit: TemporalUnit = TemporalUnit.DAYS):
    """``(ids, xy, t, line_numbers)`` from a CSV with columns ``id,x,y,t``."""
    ids, xs, ys, ts, lines = [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "x", "y", "t"} - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        for row in reader:
            line = reader.line_num
            try:
                x, y = float(row["x"]), float(row["y"])
                t = parse_time(row["t"], unit)
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: line {line}: {exc}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"{path}: line {line}: non-finite coordinate")
            ids.append(row["id"])
            xs.append(x)
            ys.append(y)
            ts.append(t)
            lines.append(line)
    if not ids:
        raise DataError(f"{path}: no points")
    return ids, np.column_stack([xs, ys]), np.asarray(ts, dtype=np.int64), lines


def read_boundary(path) -> np.ndarray:
    """Exterior ring of a WKT POLYGON or GeoJSON Polygon (Feature or bare geometry)."""
    text = Path(path).read_text().strip()
    try:
        if text.startswith("{"):
            obj = json.loads(text)
            if obj.get("type") == "FeatureCollection":
                if len(obj.get("features", [])) != 1:
                    raise DataError(f"{path}: expected exactly one feature")
                obj = obj["features"][0]
            if obj.get("type") == "Feature":
                obj = obj["geometry"]
            geom = shape(obj)
        else:
            geom = shapely.from_wkt(text)
    except DataError:
        raise
    except Exception as exc:  # shapely raises several parser error types
        raise DataError(f"{path}: cannot parse boundary: {exc}") from None
    if not isinstance(geom, Polygon):
        raise DataError(f"{path}: boundary must be a Polygon, got {geom.geom_type}")
    if len(geom.interiors):
        raise DataError(f"{path}: polygons with holes are not supported")
    return np.asarray(geom.exterior.coords, dtype=np.float64)[:, :2]


def ingest(points_path, boundary_path, unit: TemporalUnit = TemporalUnit.DAYS,
           period_start: int | None = None, period_end: int | None = None, drop_outside: bool = False,
           report=None):
    """Load points and region. Returns ``(xy, t, region, dropped)``.

    The period defaults to ``[min t, max t]``. Points outside the polygon or
    period raise :class:`DataError` listing the rows unless ``drop_outside``.
    """
    ids, xy, t, lines = read_points(points_path, unit)
    ring = read_boundary(boundary_path)
    start = int(t.min()) if period_start is None else int(period_start)
    end = int(t.max()) if period_end is None else int(period_end)
    try:
        region = StudyRegion(ring, start, end)
    except GeometryError as exc:
        raise DataError(f"invalid study region: {exc}") from None
    inside = points_in_polygon(xy[:, 0], xy[:, 1], region) & (t >= start) & (t <= end)
    bad = np.flatnonzero(~inside)
    if len(bad):
        listing = ", ".join(f"line {lines[i]} (id {ids[i]})" for i in bad[:20])
        more = f" and {len(bad) - 20} more" if len(bad) > 20 else ""
        if not drop_outside:
            raise DataError(f"{len(bad)} point(s) outside the study region: {listing}{more}")
        if report is not None:
            report(f"dropped {len(bad)} point(s) outside the study region")
        xy, t = xy[inside], t[inside]
    if len(t) < 2:
        raise DataError("need at least two points inside the study region")
    return xy, t, region, int(len(bad))


# -- output -------------------------------------------------------------------


def _matrix(surface: KSurface | None):
    return None if surface is None else surface.values.tolist()


def build_report(result, spec: JobSpec, params: dict) -> dict:
    out = {
        "params": params,
        "grid": {"s": spec.grid.s_values.tolist(), "t": spec.grid.t_values.tolist()},
        "k_hat": _matrix(result.k_hat),
        "l_hat": _matrix(result.l_hat),
        "theoretical_k": _matrix(result.theoretical_k),
    }
    if spec.sims:
        out["envelope"] = {"upper_l": _matrix(result.upper), "lower_l": _matrix(result.lower)}
        out["diff_upper"] = _matrix(result.diff_upper)
    tele = result.telemetry
    out["telemetry"] = {
        "timings": tele.get("timings", {}),
        "comparisons": tele.get("comparisons", {}),
        "cache": tele.get("cache"),
        "redundancy": tele.get("redundancy", {}),
        "bytes": tele.get("bytes", {}),
        "mode": tele.get("mode"),
    }
    if "distributed" in tele:
        out["telemetry"]["distributed"] = tele["distributed"]
    return out


def write_csv_matrices(directory, report: dict) -> list[Path]:
    """One CSV per matrix: header ``s`` then the t values, one row per s."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mats = {k: report[k] for k in ("k_hat", "l_hat", "theoretical_k", "diff_upper") if k in report}
    if "envelope" in report:
        mats.update(report["envelope"])
    s_vals, t_vals = report["grid"]["s"], report["grid"]["t"]
    written = []
    for name, m in mats.items():
        p = d / f"{name}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s"] + [repr(float(v)) for v in t_vals])
            for s, row in zip(s_vals, m):
                w.writerow([repr(float(s))] + [repr(float(v)) for v in row])
        written.append(p)
    return written


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False)


# -- commands -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spacetime-k", description="Space-time K function estimation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="estimate K/L surfaces and simulation envelopes")
    r.add_argument("--points", required=True, help="CSV with columns id,x,y,t")
    r.add_argument("--boundary", required=True, help="WKT POLYGON or GeoJSON Polygon file")
    r.add_argument("--time-unit", choices=UNIT_NAMES, default="days")
    r.add_argument("--period-start", type=int, help="override the inferred period start")
    r.add_argument("--period-end", type=int, help="override the inferred period end")
    r.add_argument("--smax", type=float, required=True)
    r.add_argument("--sstep", type=float, required=True)
    r.add_argument("--tmax", type=float, required=True)
    r.add_argument("--tstep", type=float, required=True)
    r.add_argument("--sims", type=int, default=99)
    r.add_argument("--sim-method", choices=["csr", "bootstrap", "permutation"], default="csr")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--index", choices=["on", "off"], default="on")
    r.add_argument("--cache", choices=["on", "off"], default="off")
    r.add_argument("--coord-tol", type=float, default=0.0)
    r.add_argument("--dist-tol", type=float, default=0.0)
    r.add_argument("--node-capacity", type=int, default=16)
    r.add_argument("--partitioner", choices=["kdb", "hash"], default="kdb")
    r.add_argument("--partitions", type=int, default=1)
    r.add_argument("--sample-fraction", type=float, default=0.01)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--mode", choices=["local", "distributed"], default="local")
    r.add_argument("--out", help="output JSON path (default: stdout)")
    r.add_argument("--csv-dir", help="also write each matrix as CSV into this directory")
    r.add_argument("--drop-outside", action="store_true", help="drop points outside the region")
    r.add_argument("--benchmark", action="store_true",
                   help="time index x cache x partitioner combinations instead of a single run")

    w = sub.add_parser("worker", help="serve tasks for distributed mode")
    w.add_argument("--worker-listen", default="127.0.0.1:0", help="host:port to bind")
    w.add_argument("--once", action="store_true", help="exit after one master session")
    w.add_argument("--fail-after", type=int, help=argparse.SUPPRESS)
    return p


def _validate(args) -> None:
    for name in ("smax", "sstep", "tmax", "tstep"):
        v = getattr(args, name)
        if not (math.isfinite(v) and v > 0):
            raise UsageError(f"--{name} must be positive")
    if args.sims < 0:
        raise UsageError("--sims must be >= 0")
    if args.partitions < 1 or args.workers < 1:
        raise UsageError("--partitions and --workers must be >= 1")
    if args.coord_tol < 0 or args.dist_tol < 0:
        raise UsageError("tolerances must be >= 0")
    if not 0 < args.sample_fraction <= 1:
        raise UsageError("--sample-fraction must be in (0, 1]")
    if args.node_capacity < 1:
        raise UsageError("--node-capacity must be >= 1")


def _spec(args, region, grid, options, partitioner=None) -> JobSpec:
    return JobSpec(
        region=region, grid=grid, sim_method=args.sim_method, sims=args.sims, seed=args.seed,
        options=options, partitioner=partitioner or args.partitioner, partitions=args.partitions,
        workers=args.workers, mode=args.mode, sample_fraction=args.sample_fraction,
        temporal_unit=TemporalUnit.parse(args.time_unit),
    )


def _execute(points, spec: JobSpec):
    return run_distributed(points, spec) if spec.mode == "distributed" else run_local(points, spec)


def _params(args, region: StudyRegion, n: int, dropped: int) -> dict:
    return {
        "points": str(args.points), "boundary": str(args.boundary), "n": n, "dropped": dropped,
        "time_unit": args.time_unit, "period": [region.period_start, region.period_end],
        "area": region.area, "smax": args.smax, "sstep": args.sstep, "tmax": args.tmax, "tstep": args.tstep,
        "sims": args.sims, "sim_method": args.sim_method, "seed": args.seed,
        "index": args.index, "cache": args.cache, "coord_tol": args.coord_tol, "dist_tol": args.dist_tol,
        "node_capacity": args.node_capacity, "partitioner": args.partitioner, "partitions": args.partitions,
        "sample_fraction": args.sample_fraction, "workers": args.workers, "mode": args.mode,
        "significance": (1.0 / (args.sims + 1)) if args.sims else None,
    }


def _compute_time(result) -> float:
    tm = result.telemetry["timings"]
    return tm.get("partition_s", 0.0) + tm.get("estimation_s", 0.0) + tm.get("simulation_s", 0.0)


def benchmark(points, region, grid, args) -> dict:
    """Time every index x cache x partitioner combination.

    Wall time covers partitioning, estimation and simulation (no I/O). SF is
    relative to the unindexed, uncached run with the same partitioner; in
    distributed mode AF compares a 1-thread local run to the distributed one.
    """
    runs = []
    for partitioner in ("kdb", "hash"):
        for index in ("off", "on"):
            for cache in ("off", "on"):
                options = EstimatorOptions(index == "on", cache == "on", args.coord_tol, args.dist_tol,
                                           args.node_capacity)
                spec = _spec(args, region, grid, options, partitioner)
                res = _execute(points, spec)
                entry = {
                    "partitioner": partitioner, "index": index, "cache": cache,
                    "wall_s": _compute_time(res),
                    "comparisons": res.telemetry["comparisons"],
                    "cache_stats": res.telemetry.get("cache"),
                    "redundancy": res.telemetry["redundancy"],
                    "bytes": res.telemetry.get("bytes", {}),
                    "k_hat": res.k_hat.values,
                }
                if args.mode == "distributed":
                    spec.mode, spec.workers = "local", 1
                    entry["standalone_wall_s"] = _compute_time(run_local(points, spec))
                    entry["af"] = acceleration_factor(entry["standalone_wall_s"], entry["wall_s"])
                runs.append(entry)
    for e in runs:
        base = next(b for b in runs if b["partitioner"] == e["partitioner"] and b["index"] == "off"
                    and b["cache"] == "off")
        e["sf"] = speedup_factor(base["wall_s"], e["wall_s"])
        e["matches_baseline"] = bool(np.allclose(e["k_hat"], base["k_hat"], rtol=1e-9, atol=0.0))
    for e in runs:
        del e["k_hat"]
    return {"params": _params(args, region, len(points[1]), 0), "benchmark": runs}


def _cmd_run(args, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    _validate(args)
    unit = TemporalUnit.parse(args.time_unit)
    xy, t, region, dropped = ingest(args.points, args.boundary, unit, args.period_start, args.period_end,
                                    args.drop_outside, report=lambda m: print(m, file=err))
    grid = DistanceGrid.from_steps(args.smax, args.sstep, args.tmax, args.tstep)
    options = EstimatorOptions(args.index == "on", args.cache == "on", args.coord_tol, args.dist_tol,
                               args.node_capacity)
    if args.benchmark:
        report = benchmark((xy, t), region, grid, args)
        report["params"]["dropped"] = dropped
    else:
        spec = _spec(args, region, grid, options)
        t0 = time.perf_counter()
        result = _execute((xy, t), spec)
        result.telemetry.setdefault("timings", {})["wall_s"] = time.perf_counter() - t0
        report = build_report(result, spec, _params(args, region, len(t), dropped))
        if args.csv_dir:
            write_csv_matrices(args.csv_dir, report)
    text = dump_json(report)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text, file=out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "worker":
            serve(args.worker_listen, args.fail_after, args.once)
            return EXIT_OK
        return _cmd_run(args)
    except UsageError as exc:
        print(f"spacetime-k: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GeometryError, EstimatorError, PartitionError, DecodeError, OSError) as exc:
        print(f"spacetime-k: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeFailure as exc:
        print(f"spacetime-k: runtime failure: {exc}", file=sys.stderr)
        if exc.telemetry:
            print(json.dumps(exc.telemetry, default=str), file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME
