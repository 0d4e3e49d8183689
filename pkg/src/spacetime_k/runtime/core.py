"""Job planning, per-partition task execution and aggregation.

A job partitions the observed (and each simulated) dataset, replicates every
point's query cylinder to the partitions it intersects, and counts each
ordered pair ``(i, j)`` in the single task that owns ``j``. Partial
histograms are summed in partition order, so the final surface does not
depend on scheduling.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..estimator import (
    DistanceGrid,
    EstimatorError,
    EstimatorOptions,
    KSurface,
    check_inside,
    diff_surface,
    finish_surface,
    l_surface,
    pair_histogram,
    theoretical_surface,
)
from ..geometry import StudyRegion, TemporalUnit, point_arrays
from ..partitioner import (
    KDBPartitioner,
    assign_cylinders,
    build_kdb_for_partitions,
    hash_partition_ids,
    partition_envelopes,
    sample_indices,
)
from ..simulation import METHODS, envelopes, simulate_arrays
from ..weight_cache import WeightCache

__all__ = [
    "JobSpec",
    "Task",
    "PartialResult",
    "Partitioning",
    "JobResult",
    "RuntimeFailure",
    "make_partitioning",
    "plan_job",
    "execute_task",
    "aggregate",
    "run_job",
    "speedup_factor",
    "acceleration_factor",
]


class RuntimeFailure(RuntimeError):
    """Job failure (worker loss beyond the retry budget, remote errors)."""

    def __init__(self, message: str, telemetry: dict | None = None):
        super().__init__(message)
        self.telemetry = telemetry or {}


@dataclass
class JobSpec:
    region: StudyRegion
    grid: DistanceGrid
    sim_method: str = "csr"
    sims: int = 0
    seed: int = 0
    options: EstimatorOptions = field(default_factory=EstimatorOptions)
    partitioner: str = "kdb"
    partitions: int = 1
    workers: int = 1
    mode: str = "local"
    sample_fraction: float = 0.01
    temporal_unit: TemporalUnit = TemporalUnit.DAYS
    worker_addresses: Sequence[str] | None = None
    # test hook: {worker_index: tasks completed before the worker dies}
    fail_workers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.partitions < 1:
            raise EstimatorError("partition count must be >= 1")
        if self.workers < 1:
            raise EstimatorError("worker count must be >= 1")
        if self.sims < 0:
            raise EstimatorError("number of simulations must be >= 0")
        if self.partitioner not in ("kdb", "hash"):
            raise EstimatorError(f"unknown partitioner {self.partitioner!r}")
        if self.mode not in ("local", "distributed"):
            raise EstimatorError(f"unknown mode {self.mode!r}")
        if self.sims and self.sim_method not in METHODS:
            raise EstimatorError(f"unknown simulation method {self.sim_method!r}")

    @property
    def t_radius(self) -> int:
        return int(math.floor(self.grid.t_max))


@dataclass
class Task:
    """One partition of one dataset: local points plus replicated cylinders."""

    task_id: int
    partition_id: int
    replicate: int  # -1 for the observed data
    local_xy: np.ndarray
    local_t: np.ndarray
    local_ids: np.ndarray
    center_xy: np.ndarray
    center_t: np.ndarray
    center_ids: np.ndarray

    @property
    def phase(self) -> str:
        return "estimation" if self.replicate < 0 else "simulation"


@dataclass
class PartialResult:
    task_id: int
    partition_id: int
    hist: np.ndarray
    telemetry: dict = field(default_factory=dict)


class Partitioning:
    """Splits point arrays into per-partition tasks.

    KDB partitions come from a tree built once on a sample of the observed
    data; hash partitions use record indices and their members' MBRs.
    """

    def __init__(self, kind: str, partitions: int, kdb: KDBPartitioner | None = None):
        self.kind = kind
        self.kdb = kdb
        self.count = len(kdb) if kdb is not None else partitions

    def split(self, xy, t, s_max: float, t_radius: int, replicate: int, first_task_id: int = 0):
        n = len(t)
        ids = np.arange(n, dtype=np.int64)
        if self.kdb is not None:
            part = self.kdb.locate_array(xy, t)
            envs = self.kdb.leaf_array
        else:
            part = hash_partition_ids(ids, self.count)
            envs = partition_envelopes(xy, t, part, self.count)
        cyl = assign_cylinders(envs, xy, t, s_max, t_radius)
        order = np.argsort(part, kind="stable")
        bounds = np.searchsorted(part[order], np.arange(self.count + 1))
        tasks = []
        for p in range(self.count):
            members = order[bounds[p]:bounds[p + 1]]
            c = cyl[p]
            tasks.append(Task(
                first_task_id + p, p, replicate,
                xy[members], t[members], ids[members],
                xy[c], t[c], ids[c],
            ))
        stats = {
            "partitions": self.count,
            "points_per_partition": np.diff(bounds).tolist(),
            "cylinder_assignments": int(sum(len(c) for c in cyl)),
        }
        return tasks, stats


def make_partitioning(xy, t, spec: JobSpec) -> Partitioning:
    if spec.partitioner == "hash":
        return Partitioning("hash", spec.partitions)
    if spec.partitions == 1:
        sample = (xy[:0], t[:0])
    else:
        # at least four sample points per requested partition
        fraction = max(spec.sample_fraction, min(1.0, 4.0 * spec.partitions / len(t)))
        idx = sample_indices(len(t), fraction, spec.seed)
        sample = (xy[idx], t[idx])
    domain = spec.region.domain()
    kdb = build_kdb_for_partitions(sample, domain, spec.partitions)
    return Partitioning("kdb", spec.partitions, kdb)


def plan_job(points, spec: JobSpec, partitioning: Partitioning | None = None, replicate: int = -1):
    """Tasks for one dataset. Returns ``(tasks, partitioning, stats)``."""
    xy, t = point_arrays(points)
    if partitioning is None:
        partitioning = make_partitioning(xy, t, spec)
    tasks, stats = partitioning.split(xy, t, spec.grid.s_max, spec.t_radius, replicate)
    return tasks, partitioning, stats


def execute_task(task: Task, region: StudyRegion, grid: DistanceGrid,
                 options: EstimatorOptions, cache: WeightCache | None = None) -> PartialResult:
    """Weighted pair histogram of one task (pre-cumulative)."""
    hist, tele = pair_histogram(
        task.center_xy, task.center_t, task.center_ids,
        task.local_xy, task.local_t, task.local_ids,
        region, grid, options.use_index, cache if options.use_cache else None, options.node_capacity,
    )
    tele["local_points"] = len(task.local_t)
    tele["cylinders"] = len(task.center_t)
    return PartialResult(task.task_id, task.partition_id, hist, tele)


def aggregate(partials: Sequence[PartialResult], n: int, region: StudyRegion, grid: DistanceGrid) -> KSurface:
    """Sum partial histograms in partition order and finish the K surface."""
    hist = np.zeros(grid.shape, dtype=np.float64)
    for pr in sorted(partials, key=lambda p: (p.partition_id, p.task_id)):
        if pr.hist.shape != grid.shape:
            raise EstimatorError("partial histogram does not match the grid")
        hist = hist + pr.hist
    return finish_surface(hist, n, region, grid)


def speedup_factor(t_original: float, t_optimized: float) -> float:
    if t_original <= 0 or t_optimized <= 0:
        raise ValueError("execution times must be positive")
    return t_original / t_optimized


def acceleration_factor(t_standalone: float, t_distributed: float) -> float:
    return speedup_factor(t_standalone, t_distributed)


@dataclass
class JobResult:
    k_hat: KSurface
    l_hat: KSurface
    theoretical_k: KSurface
    simulations: list[KSurface] = field(default_factory=list)
    upper: KSurface | None = None
    lower: KSurface | None = None
    diff_upper: KSurface | None = None
    telemetry: dict = field(default_factory=dict)


def _sum_cache_stats(stats: list[dict]) -> dict:
    out = {t: {"hits": 0, "misses": 0, "insertions": 0} for t in ("spatial", "temporal")}
    for s in stats:
        for tbl in out:
            for k in out[tbl]:
                out[tbl][k] += s[tbl][k]
    return out


def run_job(points, spec: JobSpec, execute_phase: Callable[[list[Task]], list[PartialResult]],
            on_simulation_start: Callable[[], None] | None = None,
            on_partitioned: Callable[[Partitioning], None] | None = None) -> JobResult:
    """Estimation followed by ``spec.sims`` simulations.

    ``execute_phase`` runs one dataset's tasks (in any order, on any
    executor) and returns their partial results. ``on_partitioned`` sees the
    partitioner once it is built, before any task runs.
    """
    xy, t = point_arrays(points)
    n = len(t)
    if n < 2:
        raise EstimatorError("K estimation needs at least two points")
    check_inside(xy, t, spec.region)
    tele: dict = {"timings": {}, "comparisons": {}, "redundancy": {}}

    t0 = time.perf_counter()
    partitioning = make_partitioning(xy, t, spec)
    tasks, stats = partitioning.split(xy, t, spec.grid.s_max, spec.t_radius, -1)
    tele["timings"]["partition_s"] = time.perf_counter() - t0
    tele["redundancy"]["estimation"] = stats
    if on_partitioned is not None:
        on_partitioned(partitioning)

    t0 = time.perf_counter()
    partials = execute_phase(tasks)
    k_hat = aggregate(partials, n, spec.region, spec.grid)
    tele["timings"]["estimation_s"] = time.perf_counter() - t0
    tele["comparisons"]["estimation"] = int(sum(p.telemetry.get("comparisons", 0) for p in partials))
    tele["timings"]["index_build_s"] = float(sum(p.telemetry.get("index_build_s", 0.0) for p in partials))

    result = JobResult(k_hat, l_surface(k_hat), theoretical_surface(spec.grid), telemetry=tele)
    if spec.sims:
        if on_simulation_start is not None:
            on_simulation_start()
        t0 = time.perf_counter()
        sim_cmp = 0
        assignments = 0
        next_id = len(tasks)
        for r in range(spec.sims):
            sxy, st = simulate_arrays(spec.sim_method, xy, t, spec.region, spec.seed + r)
            rtasks, rstats = partitioning.split(sxy, st, spec.grid.s_max, spec.t_radius, r, next_id)
            next_id += len(rtasks)
            assignments += rstats["cylinder_assignments"]
            rpartials = execute_phase(rtasks)
            sim_cmp += int(sum(p.telemetry.get("comparisons", 0) for p in rpartials))
            result.simulations.append(l_surface(aggregate(rpartials, n, spec.region, spec.grid)))
        tele["timings"]["simulation_s"] = time.perf_counter() - t0
        tele["comparisons"]["simulation"] = sim_cmp
        tele["redundancy"]["simulation_cylinder_assignments"] = assignments
        result.upper, result.lower = envelopes(result.simulations)
        result.diff_upper = diff_surface(result.l_hat, result.upper)
    return result
