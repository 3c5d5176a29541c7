"""Desk-scale multi-PoP network-service emulation."""

from .core import (
    ComputeInstance,
    GlobalConfig,
    PlatformState,
    PoPLedger,
    ResourceRequest,
    check_invariants,
    new_platform,
)
from .models import (
    AllocationOutcome,
    ResourceModel,
    allocate,
    baseline_none_usage,
    cpu_limit_model_a,
    cpu_limit_model_b,
    recompute_pop_limits,
    register_model,
    release,
    shared_pool_limit,
)
from .topology import TopologyDoc, build, dump_topology, load_topology, parse_topology, validate
from .chaining import compute_path, remove_chain, set_chain, simulate_traffic
from .endpoints import create_stack, delete_stack, get_stats, register_endpoint, start_endpoints
from .sim import builtin_scenario, export_series, run_scenario, tick

__version__ = "0.1.0"
