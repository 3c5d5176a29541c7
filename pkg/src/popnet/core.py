"""Shared platform vocabulary: configuration, requests, instances, state."""

from __future__ import annotations

import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from . import registry
from .topology import ResourceModelRef, Topology


class PopnetError(Exception):
    """Base class for platform faults (rejections are outcomes, not faults)."""


class UnknownInstance(PopnetError, LookupError):
    pass


class UnknownPoP(PopnetError, LookupError):
    pass


class InstanceInUse(PopnetError):
    """Raised when releasing an instance that a live chain still references."""

    reason = "instance_in_chain"


class InvariantViolation(AssertionError):
    pass


@dataclass(frozen=True)
class GlobalConfig:
    e_cpu: float
    n_pops: int
    total_mc: int

    def __post_init__(self):
        if not (isinstance(self.e_cpu, (int, float)) and math.isfinite(self.e_cpu)
                and 0 < self.e_cpu <= 1):
            raise ValueError(f"e_cpu must be in (0, 1], got {self.e_cpu!r}")
        if self.n_pops < 1:
            raise ValueError("at least one PoP is required")
        if self.total_mc < 1:
            raise ValueError("total_mc must be positive")


@dataclass(frozen=True)
class ResourceRequest:
    cpu_cu: int
    memory_mb: int = 0
    storage_gb: int = 0

    def __post_init__(self):
        if isinstance(self.cpu_cu, bool) or not isinstance(self.cpu_cu, int) or self.cpu_cu < 1:
            raise ValueError(f"cpu_cu must be a positive integer, got {self.cpu_cu!r}")
        for name in ("memory_mb", "storage_gb"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")


@dataclass
class ComputeInstance:
    id: str
    pop: str
    image: str
    request: ResourceRequest
    cpu_fraction: float = 0.0
    demand: float = 1.0
    created_at: float = 0.0
    name: Optional[str] = None
    stack: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "pop": self.pop,
            "image": self.image,
            "cpu_cu": self.request.cpu_cu,
            "memory_mb": self.request.memory_mb,
            "storage_gb": self.request.storage_gb,
            "cpu_fraction": self.cpu_fraction,
            "demand": self.demand,
            "created_at": self.created_at,
            "stack": self.stack,
        }


@dataclass
class PoPLedger:
    pop: str
    mc_cpu: int
    mem_capacity_mb: int
    storage_capacity_gb: int
    model: ResourceModelRef
    ac_cpu: int = 0
    mem_allocated_mb: int = 0
    storage_allocated_gb: int = 0

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["model"] = {"kind": self.model.kind, "params": dict(self.model.params)}
        return d


@dataclass
class Stack:
    id: str
    pop: str
    name: str
    instances: Dict[str, str] = field(default_factory=dict)  # template name -> instance id
    chain: Optional[str] = None


@dataclass
class PlatformState:
    config: GlobalConfig
    topology: Topology
    ledgers: Dict[str, PoPLedger]
    models: Dict[str, Any]
    instances: Dict[str, ComputeInstance] = field(default_factory=dict)
    chains: Dict[str, Any] = field(default_factory=dict)
    stacks: Dict[str, Any] = field(default_factory=dict)
    usage: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    clock: float = 0.0
    counters: Dict[str, int] = field(default_factory=dict)
    endpoint_ports: Dict[str, int] = field(default_factory=dict)
    lock: Any = field(default_factory=threading.RLock, repr=False, compare=False)

    def new_id(self, prefix: str) -> str:
        # monotonic per prefix, so ids are never reused after a release
        n = self.counters.get(prefix, 0) + 1
        self.counters[prefix] = n
        return f"{prefix}-{n}"

    def instances_in(self, pop: str) -> List[ComputeInstance]:
        return [c for c in self.instances.values() if c.pop == pop]

    def instance(self, instance_id: str) -> ComputeInstance:
        try:
            return self.instances[instance_id]
        except KeyError:
            raise UnknownInstance(f"unknown instance {instance_id!r}") from None

    def ledger(self, pop: str) -> PoPLedger:
        try:
            return self.ledgers[pop]
        except KeyError:
            raise UnknownPoP(f"unknown PoP {pop!r}") from None


def new_platform(topology: Topology, e_cpu: Optional[float] = None) -> PlatformState:
    """Fresh platform state: empty ledgers, frozen total_mc, clock at zero.

    ``e_cpu`` falls back to the topology document's value and then to 1.0.
    """
    if not topology.pops:
        raise ValueError("topology has no PoPs")
    if e_cpu is None:
        e_cpu = topology.e_cpu if topology.e_cpu is not None else 1.0
    config = GlobalConfig(
        e_cpu=e_cpu,
        n_pops=len(topology.pops),
        total_mc=sum(p.mc_cpu for p in topology.pops.values()),
    )
    ledgers = {}
    models = {}
    for name, pop in topology.pops.items():
        ledgers[name] = PoPLedger(name, pop.mc_cpu, pop.mem_capacity_mb,
                                  pop.storage_capacity_gb, pop.model)
        models[name] = registry.MODELS.get(pop.model.kind)(dict(pop.model.params), config)
    return PlatformState(config=config, topology=topology, ledgers=ledgers, models=models)


def ledger_snapshot(state: PlatformState) -> Dict[str, Any]:
    """Plain-data view of ledgers and instance limits, for rollback checks."""
    return {
        "ledgers": {p: l.to_dict() for p, l in state.ledgers.items()},
        "instances": {i: c.to_dict() for i, c in state.instances.items()},
    }


def check_invariants(state: PlatformState) -> None:
    """Raise InvariantViolation if the state breaks a platform invariant."""
    cfg = state.config
    per_pop = {p: [0, 0, 0] for p in state.ledgers}
    for c in state.instances.values():
        if c.pop not in per_pop:
            raise InvariantViolation(f"instance {c.id} homed in unknown PoP {c.pop!r}")
        acc = per_pop[c.pop]
        acc[0] += c.request.cpu_cu
        acc[1] += c.request.memory_mb
        acc[2] += c.request.storage_gb
    for pop, ledger in state.ledgers.items():
        cpu, mem, disk = per_pop[pop]
        if (ledger.ac_cpu, ledger.mem_allocated_mb, ledger.storage_allocated_gb) != (cpu, mem, disk):
            raise InvariantViolation(f"ledger of {pop} out of sync with its instances")
        if mem > ledger.mem_capacity_mb or disk > ledger.storage_capacity_gb:
            raise InvariantViolation(f"memory/storage over capacity in {pop}")
        if getattr(state.models[pop], "hard_cpu_limit", False) and cpu > ledger.mc_cpu:
            raise InvariantViolation(f"fixed-limit PoP {pop} over-allocated")
    # the unmanaged baseline divides physical capacity over every instance on
    # the platform, so its cap only holds when no other model shares the budget
    kinds = {m.kind for m in state.models.values()}
    mixed_none = "none" in kinds and len(kinds) > 1
    if not mixed_none and all(getattr(m, "capped", True) for m in state.models.values()):
        total = math.fsum(c.cpu_fraction for c in state.instances.values())
        if total > cfg.e_cpu:
            raise InvariantViolation(f"sum of CPU fractions {total!r} exceeds e_cpu {cfg.e_cpu!r}")
        for c in state.instances.values():
            if c.cpu_fraction > cfg.e_cpu:
                raise InvariantViolation(f"instance {c.id} above e_cpu")
    for chain in state.chains.values():
        for hop in chain.hops:
            if hop not in state.instances:
                raise InvariantViolation(f"chain {chain.id} references dead instance {hop}")
