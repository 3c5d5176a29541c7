"""CPU limitation models and the allocate/release accounting around them.

Limits are evaluated in exact rational arithmetic and rounded *down* to the
nearest float, so the sum of all granted fractions can never exceed e_cpu
through rounding, and results are reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from . import registry
from .core import (
    ComputeInstance,
    GlobalConfig,
    InstanceInUse,
    PlatformState,
    PoPLedger,
    ResourceRequest,
    check_invariants,
)

REJECT_REASONS = ("cpu_exhausted", "memory_exhausted", "storage_exhausted", "unknown_pop")


def floor_float(q: Fraction) -> float:
    """Largest float not greater than ``q``."""
    f = float(q)
    if Fraction(f) > q:
        f = math.nextafter(f, -math.inf)
    return f


def scaled_share(e_cpu: float, total_mc: int, mc: int, used: int, nc: int) -> float:
    """(e_cpu / total_mc) * (mc / max(mc, used)) * nc, rounded down."""
    if nc < 1:
        raise ValueError(f"nc must be a positive number of CUs, got {nc!r}")
    q = Fraction(e_cpu) / total_mc * Fraction(mc, max(mc, used)) * nc
    return floor_float(q)


def cpu_limit_model_a(nc: int, ledger: PoPLedger, config: GlobalConfig) -> Optional[float]:
    """Fixed-limit model; None means the request is rejected.

    ``ledger`` is the state *before* admitting the request.
    """
    if nc < 1:
        raise ValueError(f"nc must be a positive number of CUs, got {nc!r}")
    if ledger.ac_cpu + nc > ledger.mc_cpu:
        return None
    return scaled_share(config.e_cpu, config.total_mc, 1, 1, nc)


def cpu_limit_model_b(nc: int, ledger: PoPLedger, config: GlobalConfig) -> float:
    """Over-provisioning model; ``ledger.ac_cpu`` already counts ``nc``."""
    return scaled_share(config.e_cpu, config.total_mc, ledger.mc_cpu, ledger.ac_cpu, nc)


def _pool(state: PlatformState) -> Tuple[int, int]:
    pops = [p for p, m in state.models.items() if isinstance(m, SharedPoolModel)]
    if not pops:
        pops = list(state.ledgers)
    mc = sum(state.ledgers[p].mc_cpu for p in pops)
    ac = sum(state.ledgers[p].ac_cpu for p in pops)
    return mc, ac


def shared_pool_limit(nc: int, state: PlatformState) -> float:
    """Over-provisioning evaluated over the pool of all shared-pool PoPs.

    When every PoP uses the shared pool this is the platform-wide total.
    """
    mc, ac = _pool(state)
    return scaled_share(state.config.e_cpu, state.config.total_mc, mc, ac, nc)


def baseline_none_usage(state: PlatformState, phys_capacity: float = 1.0) -> Dict[str, float]:
    """Equal share of the physical CPU for every live instance, demand-bound."""
    if not state.instances:
        return {}
    share = floor_float(Fraction(phys_capacity) / len(state.instances))
    return {i: min(c.demand, share) for i, c in state.instances.items()}


class ResourceModel:
    """Base for CPU limitation models.

    ``pooled`` models depend on instances outside their own PoP and are
    recomputed after every mutation anywhere on the platform. ``capped``
    declares that the model keeps the total within e_cpu.
    """

    kind = ""
    pooled = False
    capped = True
    hard_cpu_limit = False
    accepted_params: Tuple[str, ...] = ()

    def __init__(self, params: Mapping[str, Any], config: GlobalConfig):
        unknown = set(params) - set(self.accepted_params)
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        self.params = dict(params)
        self.config = config

    def admits(self, nc: int, ledger: PoPLedger, state: PlatformState) -> bool:
        return True

    def limits(self, state: PlatformState, pop: str) -> Dict[str, float]:
        raise NotImplementedError


class FixedLimitModel(ResourceModel):
    kind = "fixed_limit_A"
    hard_cpu_limit = True

    def admits(self, nc, ledger, state):
        return cpu_limit_model_a(nc, ledger, self.config) is not None

    def limits(self, state, pop):
        cfg = self.config
        return {c.id: scaled_share(cfg.e_cpu, cfg.total_mc, 1, 1, c.request.cpu_cu)
                for c in state.instances_in(pop)}


class OverProvisioningModel(ResourceModel):
    kind = "over_provisioning_B"

    def limits(self, state, pop):
        ledger = state.ledgers[pop]
        return {c.id: cpu_limit_model_b(c.request.cpu_cu, ledger, self.config)
                for c in state.instances_in(pop)}


class SharedPoolModel(ResourceModel):
    kind = "shared_pool"
    pooled = True

    def limits(self, state, pop):
        return {c.id: shared_pool_limit(c.request.cpu_cu, state) for c in state.instances_in(pop)}


class NoLimitModel(ResourceModel):
    """No limitation: every instance competes for the whole physical CPU.

    The granted fraction is the equal share of ``phys_capacity`` among all
    live instances platform-wide.
    """

    kind = "none"
    pooled = True
    accepted_params = ("phys_capacity",)

    def __init__(self, params, config):
        super().__init__(params, config)
        self.phys_capacity = float(self.params.get("phys_capacity", 1.0))
        if not 0 < self.phys_capacity <= 1:
            raise ValueError("phys_capacity must be in (0, 1]")
        self.capped = self.phys_capacity <= config.e_cpu

    def limits(self, state, pop):
        if not state.instances:
            return {}
        share = floor_float(Fraction(self.phys_capacity) / len(state.instances))
        return {c.id: share for c in state.instances_in(pop)}


def register_model(name: str, factory: Callable[[Dict[str, Any], GlobalConfig], ResourceModel]):
    """Make ``factory`` resolvable by ``name`` from topology documents."""
    return registry.MODELS.register(name, factory)


for _cls in (NoLimitModel, SharedPoolModel, FixedLimitModel, OverProvisioningModel):
    register_model(_cls.kind, _cls)


@dataclass
class AllocationOutcome:
    accepted: bool
    cpu_fraction: float = 0.0
    updated_fractions: Dict[str, float] = field(default_factory=dict)
    reason: Optional[str] = None

    @classmethod
    def reject(cls, reason: str) -> "AllocationOutcome":
        return cls(False, 0.0, {}, reason)


def recompute_pop_limits(state: PlatformState, pop: str) -> Dict[str, float]:
    """Limits the PoP's model assigns to its instances right now (pure)."""
    state.ledger(pop)
    return state.models[pop].limits(state, pop)


def _refresh(state: PlatformState, pop: str) -> Dict[str, float]:
    scope = [pop] + [p for p, m in state.models.items() if m.pooled and p != pop]
    changed = {}
    for p in scope:
        for iid, frac in recompute_pop_limits(state, p).items():
            inst = state.instances[iid]
            if inst.cpu_fraction != frac:
                inst.cpu_fraction = frac
                changed[iid] = frac
    return changed


def allocate(
    state: PlatformState,
    pop: str,
    request: ResourceRequest,
    image: str = "",
    demand: float = 1.0,
    name: Optional[str] = None,
    stack: Optional[str] = None,
) -> Tuple[Optional[ComputeInstance], AllocationOutcome]:
    """Admit a new instance into ``pop`` or reject it without side effects."""
    if not 0 <= demand <= 1:
        raise ValueError(f"demand must be in [0, 1], got {demand!r}")
    with state.lock:
        if pop not in state.ledgers:
            return None, AllocationOutcome.reject("unknown_pop")
        ledger = state.ledgers[pop]
        model = state.models[pop]
        if not model.admits(request.cpu_cu, ledger, state):
            return None, AllocationOutcome.reject("cpu_exhausted")
        if ledger.mem_allocated_mb + request.memory_mb > ledger.mem_capacity_mb:
            return None, AllocationOutcome.reject("memory_exhausted")
        if ledger.storage_allocated_gb + request.storage_gb > ledger.storage_capacity_gb:
            return None, AllocationOutcome.reject("storage_exhausted")

        inst = ComputeInstance(
            id=state.new_id("inst"), pop=pop, image=image, request=request,
            demand=demand, created_at=state.clock, name=name, stack=stack,
        )
        ledger.ac_cpu += request.cpu_cu
        ledger.mem_allocated_mb += request.memory_mb
        ledger.storage_allocated_gb += request.storage_gb
        state.instances[inst.id] = inst
        state.usage[inst.id] = []
        changed = _refresh(state, pop)
        check_invariants(state)
        changed.pop(inst.id, None)
        return inst, AllocationOutcome(True, inst.cpu_fraction, changed)


def release(state: PlatformState, instance_id: str) -> AllocationOutcome:
    """Remove an instance and hand its resources back to the PoP."""
    with state.lock:
        inst = state.instance(instance_id)
        users = sorted(c.id for c in state.chains.values() if instance_id in c.hops)
        if users:
            raise InstanceInUse(f"instance {instance_id} is used by chain(s) {', '.join(users)}")
        ledger = state.ledgers[inst.pop]
        ledger.ac_cpu -= inst.request.cpu_cu
        ledger.mem_allocated_mb -= inst.request.memory_mb
        ledger.storage_allocated_gb -= inst.request.storage_gb
        del state.instances[instance_id]
        state.usage.pop(instance_id, None)
        if inst.stack is not None and inst.stack in state.stacks:
            st = state.stacks[inst.stack]
            st.instances = {k: v for k, v in st.instances.items() if v != instance_id}
            if not st.instances:
                del state.stacks[inst.stack]
        changed = _refresh(state, inst.pop)
        check_invariants(state)
        return AllocationOutcome(True, 0.0, changed)
