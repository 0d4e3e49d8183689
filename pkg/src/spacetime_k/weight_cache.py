"""Two-tier hash cache for spatial and temporal edge-correction weights.

Spatial entries are keyed ``(quantized centre) -> (quantized distance) -> w``
and temporal entries ``timestamp -> temporal distance -> v``. During the
estimation phase misses are inserted; once frozen for the simulation phase
the tables are read-only and misses are computed but never stored.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

__all__ = ["Phase", "TableStats", "WeightCache", "quantize", "quantize_array"]


class Phase(enum.Enum):
    ESTIMATION = "estimation"
    SIMULATION = "simulation"


def quantize(value: float, tolerance: float) -> int:
    """Integer key for ``value``.

    A zero tolerance keys on the exact IEEE-754 bit pattern; otherwise the
    key is ``value / tolerance`` rounded half away from zero.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    if tolerance == 0:
        return struct.unpack("<q", struct.pack("<d", float(value)))[0]
    q = math.floor(abs(value) / tolerance + 0.5)
    return int(q) if value >= 0 else -int(q)


def quantize_array(values, tolerance: float) -> np.ndarray:
    values = np.asarray(values)
    if tolerance == 0:
        return np.ascontiguousarray(values, dtype=np.float64).view(np.int64)
    q = np.floor(np.abs(values) / tolerance + 0.5)
    return np.where(values >= 0, q, -q).astype(np.int64)


@dataclass
class TableStats:
    hits: int = 0
    misses: int = 0
    insertions: int = 0

    @property
    def lookups(self) -> int:
        return self.hits + self.misses


@dataclass
class WeightCache:
    """Per-worker weight cache. Not safe for concurrent mutation."""

    coord_tolerance: float = 0.0
    dist_tolerance: float = 0.0
    phase: Phase = Phase.ESTIMATION
    spatial_table: dict = field(default_factory=dict, repr=False)
    temporal_table: dict = field(default_factory=dict, repr=False)
    spatial_stats: TableStats = field(default_factory=TableStats)
    temporal_stats: TableStats = field(default_factory=TableStats)

    def __post_init__(self):
        if self.coord_tolerance < 0 or self.dist_tolerance < 0:
            raise ValueError("tolerances must be non-negative")

    @property
    def frozen(self) -> bool:
        return self.phase is Phase.SIMULATION

    def freeze(self) -> None:
        self.phase = Phase.SIMULATION

    def stats(self) -> dict:
        return {
            "phase": self.phase.value,
            "spatial": asdict(self.spatial_stats),
            "temporal": asdict(self.temporal_stats),
            "spatial_centres": len(self.spatial_table),
            "temporal_centres": len(self.temporal_table),
        }

    # -- scalar interface -------------------------------------------------

    def get_or_compute_spatial(self, center, d: float, compute: Callable[..., float]) -> float:
        x, y = (center.x, center.y) if hasattr(center, "x") else center
        key1 = (quantize(x, self.coord_tolerance), quantize(y, self.coord_tolerance))
        key2 = quantize(d, self.dist_tolerance)
        return self._lookup(
            self.spatial_table, self.spatial_stats, key1, key2, lambda: compute((x, y), d)
        )

    def get_or_compute_temporal(self, center_t: int, u: int, compute: Callable[..., float]) -> float:
        return self._lookup(
            self.temporal_table, self.temporal_stats, int(center_t), int(u), lambda: compute(center_t, u)
        )

    def _lookup(self, table, stats, key1, key2, compute):
        tier2 = table.get(key1)
        if tier2 is not None:
            value = tier2.get(key2)
            if value is not None:
                stats.hits += 1
                return value
        value = float(compute())
        stats.misses += 1
        if not self.frozen:
            if tier2 is None:
                tier2 = table[key1] = {}
            tier2[key2] = value
            stats.insertions += 1
        return value

    # -- batch interface --------------------------------------------------

    def spatial_batch(self, cx, cy, d, compute) -> np.ndarray:
        """Weights for many ``(centre, distance)`` queries.

        Counters and table contents end up exactly as if the queries had been
        issued one at a time in order; misses are computed in one vectorised
        call to ``compute(cx, cy, d)``.
        """
        cx = np.asarray(cx, dtype=np.float64)
        cy = np.asarray(cy, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        qx = quantize_array(cx, self.coord_tolerance).tolist()
        qy = quantize_array(cy, self.coord_tolerance).tolist()
        qd = quantize_array(d, self.dist_tolerance).tolist()
        keys1 = list(zip(qx, qy))
        return self._batch(
            self.spatial_table, self.spatial_stats, keys1, qd,
            lambda idx: compute(cx[idx], cy[idx], d[idx]),
        )

    def temporal_batch(self, ct, u, compute) -> np.ndarray:
        ct = np.asarray(ct, dtype=np.int64)
        u = np.asarray(u, dtype=np.int64)
        return self._batch(
            self.temporal_table, self.temporal_stats, ct.tolist(), u.tolist(),
            lambda idx: compute(ct[idx], u[idx]),
        )

    def _batch(self, table, stats, keys1, keys2, compute) -> np.ndarray:
        n = len(keys2)
        out = np.empty(n, dtype=np.float64)
        frozen = self.frozen
        first: dict = {}  # new (key1, key2) -> index of its first query
        repeats: list[tuple[int, int]] = []  # (index, first index) served by an earlier miss
        misses: list[int] = []
        hits = 0
        last_key1 = object()
        tier2 = None
        for i in range(n):
            k1 = keys1[i]
            if k1 != last_key1:
                tier2 = table.get(k1)
                last_key1 = k1
            if tier2 is not None:
                value = tier2.get(keys2[i])
                if value is not None:
                    out[i] = value
                    hits += 1
                    continue
            k = (k1, keys2[i])
            j = first.get(k)
            if j is None:
                first[k] = i
                misses.append(i)
            elif frozen:
                misses.append(i)
            else:
                repeats.append((i, j))
                hits += 1
        if misses:
            idx = np.fromiter(misses, dtype=np.int64, count=len(misses))
            out[idx] = compute(idx)
        if repeats:
            r = np.array(repeats, dtype=np.int64)
            out[r[:, 0]] = out[r[:, 1]]
        stats.hits += hits
        stats.misses += len(misses)
        if not frozen:
            for (k1, k2), i in first.items():
                tier2 = table.get(k1)
                if tier2 is None:
                    tier2 = table[k1] = {}
                tier2[k2] = float(out[i])
            stats.insertions += len(first)
        return out
