"""Spatiotemporal partitioning.

A KDB-tree is built on a small random sample by recursive median splits,
cycling x -> y -> t. Its leaves tile the whole domain (not just the data
MBR), so every point of the study region lands in exactly one partition.
Cylinders are replicated to every leaf whose cube they intersect.

Hash partitioning by record index is provided as the baseline.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .geometry import STCylinder, STEnvelope, STPoint, envelopes_intersect_cylinder, point_arrays

__all__ = [
    "PartitionError",
    "KDBNode",
    "KDBPartitioner",
    "sample_indices",
    "sample_points",
    "build_kdb",
    "build_kdb_for_partitions",
    "hash_assign",
    "hash_partition_ids",
    "partition_envelopes",
    "assign_cylinders",
]

DIMS = ("x", "y", "t")
_ASSIGN_CHUNK = 4_000_000


class PartitionError(ValueError):
    pass


@dataclass
class KDBNode:
    envelope: STEnvelope
    dim: int = -1  # -1 for leaves
    split: float = 0.0
    low: "KDBNode | None" = None
    high: "KDBNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.dim < 0


def sample_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    if n == 0:
        raise PartitionError("cannot sample from an empty dataset")
    if not 0 < fraction <= 1:
        raise PartitionError("sample fraction must be in (0, 1]")
    size = max(1, int(math.floor(n * fraction + 0.5)))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=size, replace=False))


def sample_points(points, fraction: float, seed: int):
    """Uniform sample without replacement of ``max(1, round(n * fraction))`` points."""
    idx = sample_indices(len(points), fraction, seed)
    if isinstance(points, np.ndarray):
        return points[idx]
    return [points[i] for i in idx]


def _choose_split(values: np.ndarray, dim: int) -> float | None:
    v = np.sort(values)
    uniq = np.unique(v)
    if len(uniq) < 2:
        return None
    le = np.searchsorted(v, uniq[:-1], side="right")
    k = int(np.argmin(np.abs(le - len(v) / 2.0)))
    a, b = uniq[k], uniq[k + 1]
    if dim == 2:
        return float(math.floor((int(a) + int(b)) / 2))
    mid = 0.5 * (a + b)
    return float(mid if mid < b else a)


def _split_envelope(env: STEnvelope, dim: int, split: float) -> tuple[STEnvelope, STEnvelope]:
    lo = [env.x_min, env.x_max, env.y_min, env.y_max, env.t_min, env.t_max]
    hi = list(lo)
    if dim == 2:
        split = int(split)
    lo[2 * dim + 1] = split
    hi[2 * dim] = split
    return STEnvelope(*lo), STEnvelope(*hi)


class KDBPartitioner:
    """Domain-tiling KDB-tree partitioner.

    Leaves are numbered in depth-first order (low side first), which makes the
    "lower id wins" tie rule on split planes coincide with ``coord <= split``.
    """

    def __init__(self, root: KDBNode, domain: STEnvelope):
        self.root = root
        self.domain = domain
        self.leaves: list[STEnvelope] = []
        self._number(root)
        self.leaf_array = np.array([e.as_array() for e in self.leaves])

    def _number(self, node: KDBNode) -> None:
        if node.is_leaf:
            e = node.envelope
            node.envelope = STEnvelope(
                e.x_min, e.x_max, e.y_min, e.y_max, e.t_min, e.t_max, e.zone_id, len(self.leaves)
            )
            self.leaves.append(node.envelope)
        else:
            self._number(node.low)
            self._number(node.high)

    def __len__(self) -> int:
        return len(self.leaves)

    @property
    def num_partitions(self) -> int:
        return len(self.leaves)

    def locate(self, p: STPoint) -> int:
        if not self.domain.contains_point(p):
            raise PartitionError(f"point ({p.x}, {p.y}, {p.start_time}) is outside the partition domain")
        node = self.root
        while not node.is_leaf:
            coord = (p.x, p.y, p.start_time)[node.dim]
            node = node.low if coord <= node.split else node.high
        return node.envelope.envelope_id

    def locate_array(self, xy: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`locate` over point arrays."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        t = np.asarray(t, dtype=np.int64)
        d = self.domain
        inside = (
            (xy[:, 0] >= d.x_min) & (xy[:, 0] <= d.x_max)
            & (xy[:, 1] >= d.y_min) & (xy[:, 1] <= d.y_max)
            & (t >= d.t_min) & (t <= d.t_max)
        )
        if not inside.all():
            bad = int(np.argmin(inside))
            raise PartitionError(f"point #{bad} is outside the partition domain")
        coords = (xy[:, 0], xy[:, 1], t)
        out = np.empty(len(t), dtype=np.int64)
        stack = [(self.root, np.arange(len(t)))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf:
                out[idx] = node.envelope.envelope_id
                continue
            low = coords[node.dim][idx] <= node.split
            stack.append((node.low, idx[low]))
            stack.append((node.high, idx[~low]))
        return out

    def assign_cylinder(self, cyl: STCylinder) -> list[int]:
        c = cyl.center
        hit = envelopes_intersect_cylinder(
            self.leaf_array, c.x, c.y, c.start_time, cyl.spatial_radius, cyl.temporal_radius
        )
        return [int(i) for i in np.nonzero(hit)[0]]

    def assign_cylinders(self, xy, t, s: float, t_radius: int) -> list[np.ndarray]:
        return assign_cylinders(self.leaf_array, xy, t, s, t_radius)

    def internal_nodes(self):
        out = []

        def walk(nd):
            if not nd.is_leaf:
                out.append(nd)
                walk(nd.low)
                walk(nd.high)

        walk(self.root)
        return out


def _sample_coords(sample):
    xy, t = point_arrays(sample) if len(sample) else (np.empty((0, 2)), np.empty(0, np.int64))
    return (xy[:, 0], xy[:, 1], t)


def _split_node(coords, env: STEnvelope, idx: np.ndarray, depth: int):
    """Median split of one node, cycling x -> y -> t by depth.

    Returns ``(dim, split, low_env, high_env, low_idx, high_idx)`` or None when
    the sample is identical along every dimension.
    """
    for k in range(3):
        dim = (depth + k) % 3
        split = _choose_split(coords[dim][idx], dim)
        if split is not None:
            break
    else:
        return None
    low_env, high_env = _split_envelope(env, dim, split)
    low = coords[dim][idx] <= split
    return dim, split, low_env, high_env, idx[low], idx[~low]


def build_kdb(sample, domain: STEnvelope, max_items_per_leaf: int) -> KDBPartitioner:
    """Build a KDB partitioner from sample points.

    Nodes holding more than ``max_items_per_leaf`` sample points are split at
    the sample median, cycling x -> y -> t by depth. A node whose sample is
    identical along every dimension stays a leaf.
    """
    if max_items_per_leaf < 1:
        raise PartitionError("max_items_per_leaf must be >= 1")
    coords = _sample_coords(sample)

    def grow(env: STEnvelope, idx: np.ndarray, depth: int) -> KDBNode:
        if len(idx) <= max_items_per_leaf:
            return KDBNode(env)
        parts = _split_node(coords, env, idx, depth)
        if parts is None:
            return KDBNode(env)
        dim, split, low_env, high_env, lo, hi = parts
        return KDBNode(env, dim, split, grow(low_env, lo, depth + 1), grow(high_env, hi, depth + 1))

    return KDBPartitioner(grow(domain, np.arange(len(coords[2])), 0), domain)


def build_kdb_for_partitions(sample, domain: STEnvelope, partitions: int) -> KDBPartitioner:
    """KDB partitioner with ``partitions`` leaves where the sample allows.

    The leaf holding the most sample points is split first (ties broken by
    creation order), until the leaf count reaches ``partitions`` or no leaf
    can be split. With a power-of-two count this is the balanced median tree.
    """
    if partitions < 1:
        raise PartitionError("partition count must be >= 1")
    coords = _sample_coords(sample)
    root = KDBNode(domain)
    heap = [(-len(coords[2]), 0, root, np.arange(len(coords[2])), 0)]
    seq, leaves = 1, 1
    while leaves < partitions and heap:
        neg, _, node, idx, depth = heapq.heappop(heap)
        if -neg < 2:
            break
        parts = _split_node(coords, node.envelope, idx, depth)
        if parts is None:
            continue
        dim, split, low_env, high_env, lo, hi = parts
        node.dim, node.split = dim, split
        node.low, node.high = KDBNode(low_env), KDBNode(high_env)
        heapq.heappush(heap, (-len(lo), seq, node.low, lo, depth + 1))
        heapq.heappush(heap, (-len(hi), seq + 1, node.high, hi, depth + 1))
        seq += 2
        leaves += 1
    return KDBPartitioner(root, domain)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """Output ``x`` of the SplitMix64 stream seeded at zero."""
    with np.errstate(over="ignore"):
        z = (x.astype(np.uint64) + np.uint64(1)) * np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def hash_partition_ids(record_index, partition_count: int) -> np.ndarray:
    if partition_count < 1:
        raise PartitionError("partition count must be >= 1")
    idx = np.asarray(record_index, dtype=np.int64)
    return (_splitmix64(idx) % np.uint64(partition_count)).astype(np.int64)


def hash_assign(record_index: int, partition_count: int) -> int:
    """Baseline partition of a record: a stable hash of its index."""
    return int(hash_partition_ids([record_index], partition_count)[0])


def partition_envelopes(xy, t, part_ids, partition_count: int) -> np.ndarray:
    """Per-partition MBR of member points; empty partitions get NaN rows."""
    envs = np.full((partition_count, 6), np.nan)
    for p in range(partition_count):
        m = part_ids == p
        if m.any():
            envs[p] = [xy[m, 0].min(), xy[m, 0].max(), xy[m, 1].min(), xy[m, 1].max(), t[m].min(), t[m].max()]
    return envs


def assign_cylinders(envs: np.ndarray, xy, t, s: float, t_radius: int) -> list[np.ndarray]:
    """For each envelope row, the ascending indices of cylinders intersecting it.

    NaN rows (empty partitions) intersect nothing.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    t = np.asarray(t, dtype=np.int64)
    n = len(t)
    hits = [[] for _ in range(len(envs))]
    step = max(1, _ASSIGN_CHUNK // max(1, len(envs)))
    for lo in range(0, n, step):
        cx = xy[lo:lo + step, 0][:, None]
        cy = xy[lo:lo + step, 1][:, None]
        ct = t[lo:lo + step][:, None]
        dx = cx - np.clip(cx, envs[:, 0], envs[:, 1])
        dy = cy - np.clip(cy, envs[:, 2], envs[:, 3])
        m = (np.sqrt(dx * dx + dy * dy) <= s) & (envs[:, 4] <= ct + t_radius) & (envs[:, 5] >= ct - t_radius)
        rows, cols = np.nonzero(m.T)
        if len(rows):
            bounds = np.searchsorted(rows, np.arange(len(envs) + 1))
            for p in range(len(envs)):
                if bounds[p + 1] > bounds[p]:
                    hits[p].append(cols[bounds[p]:bounds[p + 1]] + lo)
    return [np.concatenate(h) if h else np.empty(0, dtype=np.int64) for h in hits]
