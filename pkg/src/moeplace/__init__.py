"""Trace-driven expert placement, replication and routing for distributed MoE inference."""

from .affinity import (
    Profile,
    affinity_utilization,
    build_affinity,
    build_load,
    build_profile,
    intra_score,
    load_profile,
    save_profile,
    size_deviation,
)
from .errors import InfeasibleGroupingError, IntegrityError, TraceFormatError
from .grouping import (
    ClusterTopology,
    PlacementPlan,
    baseline_group,
    build_placement,
    controlled_non_uniform_group,
    fully_non_uniform_group,
    hierarchical_group,
    select_ratio,
    spectral_cluster,
)
from .replication import ReplicaPlan, plan_replication, replica_count, select_hot_experts
from .routing import choose_by_polling_weight, compute_weights, polling_weights, predict_loads, route_token
from .simulator import SimReport, compare, simulate
from .trace import (
    PRESETS,
    ModelShape,
    RoutingTrace,
    SyntheticSpec,
    generate_synthetic_trace,
    load_trace,
    save_trace,
    trace_hash,
)

__version__ = "0.1.0"
