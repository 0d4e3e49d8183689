"""Sort-Tile-Recursive packed 3-D R-tree over spatiotemporal points.

The tree is bulk loaded only. Internally every level is flattened in
depth-first order, so the children of a node (and the items of a leaf) are a
contiguous range of the next level; range queries walk the levels with
vectorised envelope tests.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .geometry import STCylinder, STEnvelope, STPoint, envelopes_intersect_cylinder, point_arrays

__all__ = ["STRTree", "Node", "build_str", "str_groups"]

DEFAULT_NODE_CAPACITY = 16


@dataclass
class Node:
    """Tree node used for construction and (de)serialization."""

    envelope: np.ndarray  # x_min, x_max, y_min, y_max, t_min, t_max
    children: list["Node"] = field(default_factory=list)
    items: np.ndarray | None = None  # positions into the tree's point arrays (leaves)

    @property
    def is_leaf(self) -> bool:
        return self.items is not None


def _slices(n: int) -> int:
    r = max(1, int(round(n ** (1.0 / 3.0))))
    while r ** 3 < n:
        r += 1
    while r > 1 and (r - 1) ** 3 >= n:
        r -= 1
    return r


def str_groups(coords: np.ndarray, capacity: int) -> list[np.ndarray]:
    """Pack rows of ``coords`` (``x, y, t`` columns) into STR groups.

    Sort by x into ``r`` slabs, each slab by y into ``r`` sub-slabs, each
    sub-slab by t, then chunk into groups of ``capacity``.
    """
    n = len(coords)
    leaves = math.ceil(n / capacity)
    r = _slices(leaves)
    slab = capacity * r * r
    sub = capacity * r
    groups = []
    order_x = np.argsort(coords[:, 0], kind="stable")
    for a in range(0, n, slab):
        s_idx = order_x[a:a + slab]
        s_idx = s_idx[np.argsort(coords[s_idx, 1], kind="stable")]
        for b in range(0, len(s_idx), sub):
            ss_idx = s_idx[b:b + sub]
            ss_idx = ss_idx[np.argsort(coords[ss_idx, 2], kind="stable")]
            for c in range(0, len(ss_idx), capacity):
                groups.append(ss_idx[c:c + capacity])
    return groups


def _mbr(xy: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.array(
        [xy[:, 0].min(), xy[:, 0].max(), xy[:, 1].min(), xy[:, 1].max(), t.min(), t.max()],
        dtype=np.float64,
    )


def _union(envs: np.ndarray) -> np.ndarray:
    return np.array(
        [envs[:, 0].min(), envs[:, 1].max(), envs[:, 2].min(),
         envs[:, 3].max(), envs[:, 4].min(), envs[:, 5].max()],
        dtype=np.float64,
    )


def _expand(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    lens = ends - starts
    total = int(lens.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    base = np.repeat(starts - (np.cumsum(lens) - lens), lens)
    return base + np.arange(total, dtype=np.int64)


class STRTree:
    """Balanced R-tree over spatiotemporal points.

    Parameters
    ----------
    points : sequence of STPoint, (n, 3) array, or ``(xy, t)`` pair
    node_capacity : int
        Maximum items per leaf. Internal fan-out is ``max(node_capacity, 2)``.
    ids : array_like, optional
        Identifier reported for each point by :meth:`query_ids`; defaults to
        the input position.
    """

    def __init__(self, points=(), node_capacity: int = DEFAULT_NODE_CAPACITY, ids=None):
        if node_capacity < 1:
            raise ValueError("node_capacity must be >= 1")
        self.node_capacity = int(node_capacity)
        if isinstance(points, (list, tuple)) and len(points) == 0:
            xy, t = np.empty((0, 2)), np.empty(0, np.int64)
        else:
            xy, t = point_arrays(points)
        is_records = isinstance(points, (list, tuple)) and len(points) and isinstance(points[0], STPoint)
        self._source = points if is_records else None
        ids = np.arange(len(t), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        self.candidate_comparisons = 0
        self._lock = threading.Lock()
        self.root = self._bulk_load(xy, t) if len(t) else None
        self._flatten(xy, t, ids)

    # -- construction -----------------------------------------------------

    def _bulk_load(self, xy, t) -> Node:
        coords = np.column_stack([xy, t.astype(np.float64)])
        nodes = [
            Node(envelope=_mbr(xy[g], t[g]), items=g)
            for g in str_groups(coords, self.node_capacity)
        ]
        fanout = max(self.node_capacity, 2)
        while len(nodes) > 1:
            envs = np.array([nd.envelope for nd in nodes])
            centres = np.column_stack([
                (envs[:, 0] + envs[:, 1]) / 2, (envs[:, 2] + envs[:, 3]) / 2, (envs[:, 4] + envs[:, 5]) / 2
            ])
            parents = []
            for g in str_groups(centres, fanout):
                parents.append(Node(envelope=_union(envs[g]), children=[nodes[i] for i in g]))
            nodes = parents
        return nodes[0]

    @classmethod
    def from_root(cls, root: Node | None, node_capacity: int, xy, t, ids=None) -> "STRTree":
        """Rebuild a tree from an explicit node structure (used by the codec)."""
        tree = cls.__new__(cls)
        tree.node_capacity = int(node_capacity)
        tree._source = None
        tree.candidate_comparisons = 0
        tree._lock = threading.Lock()
        tree.root = root
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        t = np.asarray(t, dtype=np.int64)
        ids = np.arange(len(t), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        tree._flatten(xy, t, ids)
        return tree

    def _flatten(self, xy, t, ids) -> None:
        self.level_envs: list[np.ndarray] = []
        self.level_ranges: list[np.ndarray] = []
        if self.root is None:
            self.xy = np.empty((0, 2))
            self.t = np.empty(0, dtype=np.int64)
            self.ids = np.empty(0, dtype=np.int64)
            self.positions = np.empty(0, dtype=np.int64)
            self._xy_src, self._t_src = self.xy, self.t
            return
        perm = []
        level = [self.root]
        while True:
            self.level_envs.append(np.array([nd.envelope for nd in level]))
            if level[0].is_leaf:
                if not all(nd.is_leaf for nd in level):
                    raise ValueError("unbalanced tree: leaves at different depths")
                ranges, pos = [], 0
                for nd in level:
                    perm.append(np.asarray(nd.items, dtype=np.int64))
                    ranges.append((pos, pos + len(nd.items)))
                    pos += len(nd.items)
                self.level_ranges.append(np.array(ranges, dtype=np.int64).reshape(-1, 2))
                break
            if any(nd.is_leaf for nd in level):
                raise ValueError("unbalanced tree: leaves at different depths")
            ranges, pos, nxt = [], 0, []
            for nd in level:
                ranges.append((pos, pos + len(nd.children)))
                pos += len(nd.children)
                nxt.extend(nd.children)
            self.level_ranges.append(np.array(ranges, dtype=np.int64).reshape(-1, 2))
            level = nxt
        perm = np.concatenate(perm) if perm else np.empty(0, dtype=np.int64)
        self._xy_src = xy
        self._t_src = t
        self.positions = perm
        self.xy = xy[perm]
        self.t = t[perm]
        self.ids = ids[perm]

    # -- properties -------------------------------------------------------

    def __len__(self) -> int:
        return len(self.t)

    @property
    def depth(self) -> int:
        return len(self.level_envs)

    @property
    def envelope(self) -> np.ndarray | None:
        return None if self.root is None else self.root.envelope

    def leaves(self) -> list[Node]:
        out = []

        def walk(nd):
            if nd.is_leaf:
                out.append(nd)
            else:
                for ch in nd.children:
                    walk(ch)

        if self.root is not None:
            walk(self.root)
        return out

    def leaf_depths(self) -> list[int]:
        depths = []

        def walk(nd, d):
            if nd.is_leaf:
                depths.append(d)
            else:
                for ch in nd.children:
                    walk(ch, d + 1)

        if self.root is not None:
            walk(self.root, 0)
        return depths

    def point(self, pos: int) -> STPoint:
        if self._source is not None:
            return self._source[int(pos)]
        return STPoint(float(self.xy_source[pos, 0]), float(self.xy_source[pos, 1]), int(self.t_source[pos]))

    @property
    def xy_source(self) -> np.ndarray:
        """Point coordinates in input order."""
        return self._xy_src

    @property
    def t_source(self) -> np.ndarray:
        return self._t_src

    # -- queries ----------------------------------------------------------

    def _query(self, cx: float, cy: float, ct: int, s: float, t: int) -> tuple[np.ndarray, int]:
        """Flattened positions of points within the cylinder, plus comparison count."""
        if self.root is None:
            return np.empty(0, dtype=np.int64), 0
        front = np.zeros(1, dtype=np.int64)
        comparisons = 0
        last = self.depth - 1
        for h in range(self.depth):
            comparisons += len(front)
            hit = envelopes_intersect_cylinder(self.level_envs[h][front], cx, cy, ct, s, t)
            front = front[hit]
            if front.size == 0:
                return front, comparisons
            rng = self.level_ranges[h][front]
            front = _expand(rng[:, 0], rng[:, 1])
            if h == last:
                comparisons += len(front)
                dx = self.xy[front, 0] - cx
                dy = self.xy[front, 1] - cy
                keep = (np.sqrt(dx * dx + dy * dy) <= s) & (np.abs(self.t[front] - ct) <= t)
                return front[keep], comparisons
        raise AssertionError("unreachable")

    def _count(self, comparisons: int) -> None:
        with self._lock:
            self.candidate_comparisons += comparisons

    def query_ids(self, cx: float, cy: float, ct: int, s: float, t: int) -> np.ndarray:
        """Identifiers of all points inside the cylinder, ascending."""
        pos, comparisons = self._query(cx, cy, ct, s, t)
        self._count(comparisons)
        return np.sort(self.ids[pos])

    def range_query(self, cyl: STCylinder) -> list[STPoint]:
        c = cyl.center
        pos, comparisons = self._query(c.x, c.y, c.start_time, cyl.spatial_radius, cyl.temporal_radius)
        self._count(comparisons)
        return [self.point(p) for p in np.sort(self.positions[pos])]


def build_str(points, node_capacity: int = DEFAULT_NODE_CAPACITY) -> STRTree:
    return STRTree(points, node_capacity)
