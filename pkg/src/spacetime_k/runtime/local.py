"""Local execution: tasks run on a thread pool inside this process."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

from ..weight_cache import WeightCache
from .core import JobResult, JobSpec, PartialResult, Task, _sum_cache_stats, execute_task, run_job

__all__ = ["PartitionCaches", "LocalExecutor", "run_local"]


class PartitionCaches:
    """One weight cache per partition id, kept across estimation and simulations."""

    def __init__(self, options):
        self.options = options
        self.caches: dict[int, WeightCache] = {}
        self.frozen = False

    def get(self, partition_id: int) -> WeightCache | None:
        if not self.options.use_cache:
            return None
        cache = self.caches.get(partition_id)
        if cache is None:
            cache = self.caches[partition_id] = self.options.new_cache()
            if self.frozen:
                cache.freeze()
        return cache

    def freeze(self) -> None:
        self.frozen = True
        for c in self.caches.values():
            c.freeze()

    def stats(self) -> dict:
        return _sum_cache_stats([c.stats() for c in self.caches.values()])


class LocalExecutor:
    def __init__(self, spec: JobSpec, threads: int | None = None):
        self.spec = spec
        self.threads = threads or spec.workers
        self.caches = PartitionCaches(spec.options)

    def run_phase(self, tasks: list[Task]) -> list[PartialResult]:
        spec = self.spec

        def run(task):
            return execute_task(task, spec.region, spec.grid, spec.options, self.caches.get(task.partition_id))

        if self.threads == 1:
            return [run(t) for t in tasks]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(run, tasks))


def run_local(points, spec: JobSpec, threads: int | None = None) -> JobResult:
    ex = LocalExecutor(spec, threads)
    result = run_job(points, spec, ex.run_phase, ex.caches.freeze)
    if spec.options.use_cache:
        result.telemetry["cache"] = ex.caches.stats()
    result.telemetry["mode"] = "local"
    result.telemetry["threads"] = ex.threads
    return result
