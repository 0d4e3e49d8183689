"""Job execution: local thread pool and master/worker modes."""

from .core import (
    JobResult,
    JobSpec,
    PartialResult,
    Partitioning,
    RuntimeFailure,
    Task,
    acceleration_factor,
    aggregate,
    execute_task,
    make_partitioning,
    plan_job,
    run_job,
    speedup_factor,
)
from .distributed import DistributedExecutor, run_distributed, serve
from .local import LocalExecutor, PartitionCaches, run_local


def run(points, spec: JobSpec) -> JobResult:
    """Run a job in the mode named by ``spec.mode``."""
    if spec.mode == "distributed":
        return run_distributed(points, spec)
    return run_local(points, spec)


__all__ = [
    "JobResult", "JobSpec", "PartialResult", "Partitioning", "RuntimeFailure", "Task",
    "acceleration_factor", "aggregate", "execute_task", "make_partitioning", "plan_job",
    "run_job", "speedup_factor", "DistributedExecutor", "run_distributed", "serve",
    "LocalExecutor", "PartitionCaches", "run_local", "run",
]
