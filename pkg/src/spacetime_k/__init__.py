"""Space-time Ripley's K function with edge correction, a 3-D STR index,
a two-tier edge-weight cache, KDB partitioning, a compact binary codec and
local or master/worker execution."""

from .edge_correction import pair_weight, spatial_isotropic_weight, spatial_weights, temporal_isotropic_weight
from .estimator import (
    DistanceGrid,
    EstimatorError,
    EstimatorOptions,
    KSurface,
    diff_surface,
    estimate_surface,
    intensity,
    k_to_l,
    l_surface,
    theoretical_k,
)
from .geometry import (
    GeometryError,
    STCylinder,
    STEnvelope,
    STPoint,
    StudyRegion,
    TemporalUnit,
    point_in_polygon,
)
from .partitioner import KDBPartitioner, PartitionError, build_kdb, hash_assign
from .simulation import envelopes, generate_bootstrap, generate_cstr, generate_permutation, run_simulations
from .st_index import STRTree
from .weight_cache import WeightCache

__version__ = "0.1.0"

__all__ = [
    "DistanceGrid", "EstimatorError", "EstimatorOptions", "KSurface", "diff_surface", "estimate_surface",
    "intensity", "k_to_l", "l_surface", "theoretical_k", "GeometryError", "STCylinder", "STEnvelope",
    "STPoint", "StudyRegion", "TemporalUnit", "point_in_polygon", "pair_weight", "spatial_isotropic_weight",
    "spatial_weights", "temporal_isotropic_weight", "KDBPartitioner", "PartitionError", "build_kdb",
    "hash_assign", "envelopes", "generate_bootstrap", "generate_cstr", "generate_permutation",
    "run_simulations", "STRTree", "WeightCache",
]
