"""Master/worker execution over framed socket messages.

The master partitions each dataset, ships every task to a worker as a point
batch plus a cylinder batch, and gathers the partial histograms. Partition
``p`` goes to live worker ``p % live``, so a partition keeps hitting the same
worker cache across phases. When a worker dies its in-flight and queued tasks
move to the surviving workers; a task may fail at most once.
"""

from __future__ import annotations

import os
import socket
import subprocess
import sys
import threading
import time
from collections import deque

from .. import codec
from ..codec import DecodeError
from ..estimator import EstimatorError
from ..geometry import GeometryError
from ..partitioner import PartitionError
from .core import JobResult, JobSpec, PartialResult, Partitioning, RuntimeFailure, Task, _sum_cache_stats, \
    execute_task, run_job
from .local import PartitionCaches
from .protocol import (
    Channel,
    Compute,
    CylinderBatch,
    Done,
    ErrorMsg,
    Hello,
    Partial,
    PartitionerMsg,
    PointBatch,
    job_config,
    parse_job_config,
)

__all__ = ["serve", "parse_address", "DistributedExecutor", "run_distributed", "WORKERS_ENV"]

WORKERS_ENV = "STK_WORKERS"
MAX_FAILURES_PER_TASK = 1
_EXIT_INJECTED = 17


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host, int(port)


# -- worker -------------------------------------------------------------------


class _Session:
    """State of one master connection on a worker."""

    def __init__(self, chan: Channel, fail_after: int | None):
        self.chan = chan
        self.fail_after = fail_after
        self.completed = 0
        self.config = None
        self.kdb = None
        self.caches: PartitionCaches | None = None
        self.points: dict[int, PointBatch] = {}
        self.cylinders: dict[int, CylinderBatch] = {}

    def run(self) -> None:
        while True:
            msg = self.chan.recv()
            if isinstance(msg, Hello):
                self.chan.send(Hello(os.getpid()))
            elif isinstance(msg, PartitionerMsg):
                self.config = parse_job_config(msg.config)
                self.kdb = codec.decode_tree(msg.tree) if msg.tree else None
                self.caches = PartitionCaches(self.config[2])
            elif isinstance(msg, PointBatch):
                self.points[msg.task_key] = msg
            elif isinstance(msg, CylinderBatch):
                self.cylinders[msg.task_key] = msg
            elif isinstance(msg, Compute):
                if self.fail_after is not None and self.completed >= self.fail_after:
                    os._exit(_EXIT_INJECTED)
                self.chan.send(self.compute(msg))
            elif isinstance(msg, Done):
                stats = self.caches.stats() if self.caches is not None and self.caches.caches else None
                self.chan.send(Done({"completed": self.completed, "cache": stats}))
                return
            else:
                self.chan.send(ErrorMsg(f"unexpected message {type(msg).__name__}"))

    def compute(self, msg: Compute):
        if self.config is None:
            return ErrorMsg("compute before partitioner")
        pts = self.points.pop(msg.task_key, None)
        cyl = self.cylinders.pop(msg.task_key, None)
        if pts is None or cyl is None:
            return ErrorMsg(f"task {msg.task_key} is missing its point or cylinder batch")
        region, grid, options, _ = self.config
        if self.kdb is not None and len(pts.t):
            if (self.kdb.locate_array(pts.xy, pts.t) != msg.partition_id).any():
                return ErrorMsg(f"task {msg.task_key}: points outside partition {msg.partition_id}")
        if msg.replicate >= 0:
            self.caches.freeze()
        task = Task(msg.task_key, msg.partition_id, msg.replicate,
                    pts.xy, pts.t, pts.records, cyl.xy, cyl.t, cyl.records)
        try:
            pr = execute_task(task, region, grid, options, self.caches.get(msg.partition_id))
        except (EstimatorError, GeometryError, PartitionError) as exc:
            return ErrorMsg(f"task {msg.task_key}: {exc}")
        self.completed += 1
        return Partial(pr.task_id, pr.partition_id, pr.hist, pr.telemetry)


def serve(address: str = "127.0.0.1:0", fail_after: int | None = None, once: bool = False,
          announce=None) -> None:
    """Run a worker: accept a master connection and execute its tasks.

    Prints ``LISTENING host:port`` once bound. ``fail_after`` makes the
    process exit abruptly when asked for a task after that many completed
    tasks (fault-injection hook).
    """
    host, port = parse_address(address)
    srv = socket.create_server((host, port))
    bound = srv.getsockname()
    line = f"LISTENING {bound[0]}:{bound[1]}"
    (announce or (lambda s: print(s, flush=True)))(line)
    try:
        while True:
            conn, _ = srv.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            chan = Channel(conn)
            try:
                _Session(chan, fail_after).run()
            except (ConnectionError, DecodeError, OSError):
                pass
            finally:
                chan.close()
            if once:
                return
    finally:
        srv.close()


# -- master -------------------------------------------------------------------


class _Worker:
    def __init__(self, index: int, address: str, proc: subprocess.Popen | None = None):
        self.index = index
        self.address = address
        self.proc = proc
        self.chan: Channel | None = None
        self.alive = True
        self.tasks_done = 0
        self.info: dict = {}


def _spawn_worker(fail_after: int | None) -> tuple[subprocess.Popen, str]:
    cmd = [sys.executable, "-m", "spacetime_k", "worker", "--worker-listen", "127.0.0.1:0", "--once"]
    if fail_after is not None:
        cmd += ["--fail-after", str(int(fail_after))]
    proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
    line = proc.stdout.readline().strip()
    if not line.startswith("LISTENING "):
        proc.kill()
        raise RuntimeFailure(f"worker failed to start (got {line!r})")
    return proc, line.split(" ", 1)[1]


class DistributedExecutor:
    """Runs task phases on a set of worker processes.

    Workers are spawned locally unless addresses are given (``spec.worker_addresses``
    or the ``STK_WORKERS`` environment variable, comma separated).
    """

    def __init__(self, spec: JobSpec, wire_log: list | None = None, connect_timeout: float = 30.0):
        self.spec = spec
        self.wire_log = wire_log
        self.connect_timeout = connect_timeout
        self.workers: list[_Worker] = []
        self.failures: list[dict] = []
        self.reassigned = 0
        self.partitioner_bytes = 0

    # lifecycle

    def start(self) -> None:
        addresses = list(self.spec.worker_addresses or [])
        if not addresses and os.environ.get(WORKERS_ENV):
            addresses = [a.strip() for a in os.environ[WORKERS_ENV].split(",") if a.strip()]
        if addresses:
            self.workers = [_Worker(i, a) for i, a in enumerate(addresses)]
        else:
            for i in range(self.spec.workers):
                proc, addr = _spawn_worker(self.spec.fail_workers.get(i))
                self.workers.append(_Worker(i, addr, proc))
        for w in self.workers:
            host, port = parse_address(w.address)
            try:
                sock = socket.create_connection((host, port), timeout=self.connect_timeout)
            except OSError as exc:
                raise RuntimeFailure(f"cannot reach worker {w.address}: {exc}") from None
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            w.chan = Channel(sock, self.wire_log)
            w.chan.send(Hello(os.getpid()))
            if not isinstance(w.chan.recv(), Hello):
                raise RuntimeFailure(f"worker {w.address} did not answer the handshake")

    def broadcast(self, partitioning: Partitioning) -> None:
        tree = codec.encode_tree(partitioning.kdb) if partitioning.kdb is not None else b""
        self.partitioner_bytes = len(tree)
        cfg = job_config(self.spec.region, self.spec.grid, self.spec.options, self.spec.temporal_unit)
        cfg["partitioner"] = partitioning.kind
        cfg["partitions"] = partitioning.count
        for w in self._live():
            try:
                w.chan.send(PartitionerMsg(tree, cfg))
            except OSError as exc:
                self._mark_dead(w, None, exc)

    def close(self) -> None:
        for w in self.workers:
            if w.alive and w.chan is not None:
                try:
                    w.chan.send(Done())
                    reply = w.chan.recv()
                    if isinstance(reply, Done):
                        w.info = reply.info
                except (OSError, DecodeError):
                    pass
            if w.chan is not None:
                w.chan.close()
        for w in self.workers:
            if w.proc is not None:
                try:
                    w.proc.wait(timeout=10)
                except subprocess.TimeoutExpired:
                    w.proc.kill()
                    w.proc.wait()
                if w.proc.stdout is not None:
                    w.proc.stdout.close()

    # scheduling

    def _live(self) -> list[_Worker]:
        return [w for w in self.workers if w.alive]

    def _mark_dead(self, w: _Worker, task: Task | None, exc: Exception) -> None:
        w.alive = False
        self.failures.append({
            "worker": w.index, "address": w.address, "error": str(exc) or type(exc).__name__,
            "task_id": None if task is None else task.task_id,
        })

    def _run_on(self, w: _Worker, task: Task) -> PartialResult:
        spec = self.spec
        w.chan.send(PointBatch(task.task_id, task.local_xy, task.local_t, task.local_ids))
        w.chan.send(CylinderBatch(task.task_id, task.center_xy, task.center_t, task.center_ids,
                                  spec.grid.s_max, spec.t_radius, spec.temporal_unit))
        w.chan.send(Compute(task.task_id, task.partition_id, task.replicate))
        reply = w.chan.recv()
        if isinstance(reply, ErrorMsg):
            raise RuntimeFailure(f"worker {w.address}: {reply.message}")
        if not isinstance(reply, Partial) or reply.task_key != task.task_id:
            raise RuntimeFailure(f"worker {w.address} sent an unexpected reply")
        tele = dict(reply.telemetry)
        tele["worker"] = w.index
        return PartialResult(reply.task_key, reply.partition_id, reply.hist, tele)

    def run_phase(self, tasks: list[Task]) -> list[PartialResult]:
        live = self._live()
        if not live:
            raise RuntimeFailure("no live workers", self.telemetry())
        queues = {w.index: deque() for w in self.workers}
        for task in tasks:
            queues[live[task.partition_id % len(live)].index].append((task, 0))
        results: dict[int, PartialResult] = {}
        cond = threading.Condition()
        state = {"remaining": len(tasks), "error": None}

        def loop(w: _Worker):
            while True:
                with cond:
                    while not queues[w.index] and state["remaining"] and state["error"] is None:
                        cond.wait()
                    if not state["remaining"] or state["error"] is not None:
                        return
                    task, failed = queues[w.index].popleft()
                try:
                    pr = self._run_on(w, task)
                except RuntimeFailure as exc:
                    with cond:
                        state["error"] = exc
                        cond.notify_all()
                    return
                except (OSError, DecodeError) as exc:
                    with cond:
                        self._mark_dead(w, task, exc)
                        orphans = [(task, failed + 1)] + list(queues[w.index])
                        queues[w.index].clear()
                        survivors = self._live()
                        for tk, f in orphans:
                            if f > MAX_FAILURES_PER_TASK:
                                state["error"] = RuntimeFailure(f"task {tk.task_id} failed on {f} workers")
                                break
                            if not survivors:
                                state["error"] = RuntimeFailure("all workers failed")
                                break
                            queues[survivors[tk.partition_id % len(survivors)].index].append((tk, f))
                            self.reassigned += 1
                        cond.notify_all()
                    return
                with cond:
                    results[task.task_id] = pr
                    w.tasks_done += 1
                    state["remaining"] -= 1
                    cond.notify_all()

        threads = [threading.Thread(target=loop, args=(w,), daemon=True) for w in live]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if state["error"] is not None:
            err = state["error"]
            raise RuntimeFailure(str(err), self.telemetry())
        if state["remaining"]:
            raise RuntimeFailure("tasks left unfinished: all workers failed", self.telemetry())
        return [results[t.task_id] for t in tasks]

    # reporting

    def telemetry(self) -> dict:
        chans = [w.chan for w in self.workers if w.chan is not None]
        return {
            "workers": len(self.workers),
            "live_workers": len(self._live()),
            "failures": list(self.failures),
            "reassigned_tasks": self.reassigned,
            "tasks_per_worker": [w.tasks_done for w in self.workers],
            "bytes": {
                "sent": int(sum(c.bytes_sent for c in chans)),
                "received": int(sum(c.bytes_received for c in chans)),
                "partitioner": self.partitioner_bytes,
            },
        }


def run_distributed(points, spec: JobSpec, wire_log: list | None = None) -> JobResult:
    """Run a job on worker processes and aggregate on the master."""
    ex = DistributedExecutor(spec, wire_log)
    t0 = time.perf_counter()
    try:
        ex.start()
        result = run_job(points, spec, ex.run_phase, None, ex.broadcast)
    except RuntimeFailure as exc:
        ex.close()
        exc.telemetry = {**ex.telemetry(), **exc.telemetry}
        raise
    except BaseException:
        ex.close()
        raise
    ex.close()
    tele = ex.telemetry()
    result.telemetry["bytes"] = tele.pop("bytes")
    result.telemetry["distributed"] = tele
    result.telemetry["mode"] = "distributed"
    result.telemetry["timings"]["total_s"] = time.perf_counter() - t0
    caches = [w.info["cache"] for w in ex.workers if w.info.get("cache")]
    if spec.options.use_cache:
        result.telemetry["cache"] = _sum_cache_stats(caches)
    return result
