"""Probabilistic demand graphs, Gittins/deadline scheduling, speculative
backend prewarming, and a deterministic discrete-event simulator for LLM
application workloads."""

from .distributions import EmpiricalDistribution, bucketize
from .errors import (
    ConfigError,
    EstimationError,
    ExhaustedDistributionError,
    GraphError,
    PdgsimError,
)
from .estimator import (
    Observation,
    RemainingDemand,
    build_masks,
    conditional_filter,
    exact_remaining_demand,
    monte_carlo_remaining_demand,
    pearson,
)
from .metrics import Metrics, build_metrics
from .pdgraph import (
    BackendKind,
    BackendSpec,
    CorrelationMask,
    FunctionalUnit,
    PDGraph,
    RateProfile,
    UnitRecord,
    branch_probabilities,
    load_graph,
    record_trial,
    save_graph,
    service_time,
)
from .prewarm import (
    CachePolicy,
    CacheState,
    PrewarmPlan,
    cache_access,
    cache_prefetch_signal,
    plan_prewarm,
    wastage_accounting,
)
from .sched import (
    ApplicationInstance,
    Policy,
    Priority,
    compute_priority,
    gittins_rank,
    lstf_slack,
    refresh_priorities,
)
from .simcore import SimConfig, SimResult, Simulator, run_simulation
from .workload import WorkloadSpec, archetype, assign_deadlines, generate, ingest_trace

__version__ = "0.1.0"
