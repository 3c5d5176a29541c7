"""Deterministic discrete-time workload simulation and scenario replay.

Every live instance consumes ``min(demand, limit)`` of a physical CPU per
tick; there is no scheduler noise unless a scenario asks for it with a
seeded ``noise`` amplitude.
"""

from __future__ import annotations

import csv
import io
import math
import random
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from yaml.nodes import MappingNode

from .core import PlatformState, PopnetError, ResourceRequest, new_platform
from .models import allocate, recompute_pop_limits, release
from .topology import (
    LinkDecl,
    PoPDecl,
    ResourceModelRef,
    TopologyDoc,
    TopologyError,
    build,
    doc_from_node,
    load_topology,
)
from .yamldoc import DocumentError, Fields, compose, join, scalar, sequence

CSV_HEADER = ("t", "instance_id", "pop", "usage", "limit", "expected")
AGGREGATE_ID = "__pop_aggregate__"
EVENT_HEADER = ("t", "kind", "label", "instance_id", "accepted", "reason")


class ScenarioError(PopnetError):
    def __init__(self, message: str, t: Optional[float] = None):
        self.t = t
        super().__init__(message if t is None else f"t={_fmt_time(t)}: {message}")


@dataclass(frozen=True)
class Allocate:
    pop: str
    request: ResourceRequest
    demand: float = 1.0
    label: Optional[str] = None
    image: str = "stress"


@dataclass(frozen=True)
class Release:
    label: str


@dataclass(frozen=True)
class Action:
    t: float
    op: Union[Allocate, Release]


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: TopologyDoc
    actions: Tuple[Action, ...]
    duration: float
    tick_s: float = 1.0
    model: Optional[ResourceModelRef] = None
    e_cpu: Optional[float] = None
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.tick_s > 0:
            raise ScenarioError("tick_s must be positive")
        if self.duration < 0:
            raise ScenarioError("duration must be non-negative")
        last = -math.inf
        labels = set()
        for a in self.actions:
            if a.t < last:
                raise ScenarioError("actions are not time-ordered", a.t)
            if a.t < 0:
                raise ScenarioError("negative action time", a.t)
            last = a.t
            if isinstance(a.op, Allocate) and a.op.label is not None:
                if a.op.label in labels:
                    raise ScenarioError(f"duplicate label {a.op.label!r}", a.t)
                labels.add(a.op.label)
        if self.actions and self.duration < last:
            raise ScenarioError("duration ends before the last action")
        if self.noise < 0:
            raise ScenarioError("noise must be non-negative")


@dataclass(frozen=True)
class InstanceSample:
    instance_id: str
    pop: str
    usage: float
    limit: float
    expected: float


@dataclass(frozen=True)
class PopAggregate:
    pop: str
    usage: float
    limit: float
    expected: float


@dataclass(frozen=True)
class TickRecord:
    t: float
    samples: Tuple[InstanceSample, ...]
    aggregates: Tuple[PopAggregate, ...]

    def aggregate(self, pop: str) -> PopAggregate:
        return next(a for a in self.aggregates if a.pop == pop)

    def in_pop(self, pop: str) -> List[InstanceSample]:
        return [s for s in self.samples if s.pop == pop]


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    label: str
    instance_id: Optional[str]
    accepted: bool
    reason: Optional[str] = None


@dataclass
class UsageSeries:
    scenario: str
    pops: Tuple[str, ...]
    ticks: List[TickRecord] = field(default_factory=list)
    events: List[Event] = field(default_factory=list)

    def rejected(self) -> List[Event]:
        return [e for e in self.events if e.kind == "allocate" and not e.accepted]

    def accepted(self) -> List[Event]:
        return [e for e in self.events if e.kind == "allocate" and e.accepted]


def tick(state: PlatformState, dt: float = 1.0, rng: Optional[random.Random] = None,
         noise: float = 0.0) -> Dict[str, float]:
    """Advance the clock by ``dt`` and record one usage sample per instance.

    The sample is stamped with the clock at the start of the interval.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    with state.lock:
        out = {}
        for iid, inst in state.instances.items():
            want = inst.demand
            if noise and rng is not None:
                want = min(1.0, max(0.0, want * (1.0 + noise * rng.gauss(0.0, 1.0))))
            usage = min(want, inst.cpu_fraction)
            state.usage.setdefault(iid, []).append((state.clock, usage))
            out[iid] = usage
        state.clock += dt
        return out


def _apply(state: PlatformState, action: Action, labels: Dict[str, Optional[str]],
           series: UsageSeries, counter: List[int]) -> None:
    op = action.op
    if isinstance(op, Allocate):
        counter[0] += 1
        label = op.label or f"a{counter[0]}"
        if op.pop not in state.ledgers:
            raise ScenarioError(f"allocate references unknown PoP {op.pop!r}", action.t)
        inst, outcome = allocate(state, op.pop, op.request, op.image, op.demand, name=label)
        labels[label] = inst.id if inst else None
        series.events.append(Event(action.t, "allocate", label, inst.id if inst else None,
                                   outcome.accepted, outcome.reason))
        return
    if op.label not in labels:
        raise ScenarioError(f"release references unknown instance {op.label!r}", action.t)
    iid = labels[op.label]
    if iid is None:
        # the allocation was rejected (or already released): nothing to stop
        series.events.append(Event(action.t, "release", op.label, None, False, "not_running"))
        return
    release(state, iid)
    labels[op.label] = None
    series.events.append(Event(action.t, "release", op.label, iid, True))


def run_scenario(scenario: Scenario) -> UsageSeries:
    doc = scenario.topology
    if scenario.model is not None:
        doc = doc.with_model(scenario.model)
    try:
        topo = build(doc)
    except TopologyError as exc:
        raise ScenarioError(f"bad topology: {exc}") from None
    state = new_platform(topo, scenario.e_cpu)
    rng = random.Random(scenario.seed) if scenario.noise else None
    series = UsageSeries(scenario.name, topo.pop_names)
    labels: Dict[str, Optional[str]] = {}
    counter = [0]
    pending = deque(scenario.actions)
    n_ticks = int(round(scenario.duration / scenario.tick_s))
    for step in range(n_ticks):
        t = step * scenario.tick_s
        while pending and pending[0].t <= t:
            _apply(state, pending.popleft(), labels, series, counter)
        state.clock = t
        expected = {}
        for pop in topo.pop_names:
            expected.update(recompute_pop_limits(state, pop))
        usage = tick(state, scenario.tick_s, rng, scenario.noise)
        samples = []
        aggregates = []
        for pop in topo.pop_names:
            here = [InstanceSample(c.id, pop, usage[c.id], c.cpu_fraction, expected[c.id])
                    for c in state.instances_in(pop)]
            samples += here
            aggregates.append(PopAggregate(
                pop,
                math.fsum(s.usage for s in here),
                math.fsum(s.limit for s in here),
                math.fsum(s.expected for s in here),
            ))
        series.ticks.append(TickRecord(t, tuple(samples), tuple(aggregates)))
    while pending:
        _apply(state, pending.popleft(), labels, series, counter)
    return series


# -- export ------------------------------------------------------------------

def _fmt_time(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def export_series(series: UsageSeries, sink) -> int:
    """Write the series as CSV to a path or text stream; returns data rows."""
    if isinstance(sink, (str, Path)):
        with open(sink, "w", newline="") as fh:
            return export_series(series, fh)
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    rows = 0
    for rec in series.ticks:
        t = _fmt_time(rec.t)
        for s in rec.samples:
            writer.writerow((t, s.instance_id, s.pop, repr(s.usage), repr(s.limit), repr(s.expected)))
            rows += 1
        for a in rec.aggregates:
            writer.writerow((t, AGGREGATE_ID, a.pop, repr(a.usage), repr(a.limit), repr(a.expected)))
            rows += 1
    return rows


def series_to_csv(series: UsageSeries) -> str:
    buf = io.StringIO()
    export_series(series, buf)
    return buf.getvalue()


def export_events(series: UsageSeries, sink) -> int:
    if isinstance(sink, (str, Path)):
        with open(sink, "w", newline="") as fh:
            return export_events(series, fh)
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(EVENT_HEADER)
    for e in series.events:
        writer.writerow((_fmt_time(e.t), e.kind, e.label, e.instance_id or "",
                         int(e.accepted), e.reason or ""))
    return len(series.events)


# -- scenario files ----------------------------------------------------------

def _allocate(node, path) -> Allocate:
    f = Fields(node, path)
    op = Allocate(
        pop=f.get("pop", str),
        request=ResourceRequest(
            cpu_cu=f.get("cpu_cu", int, 1),
            memory_mb=f.get("memory_mb", int, 0),
            storage_gb=f.get("storage_gb", int, 0),
        ),
        demand=f.get("demand", float, 1.0),
        label=f.get("label", str, None),
        image=f.get("image", str, "stress"),
    )
    f.finish()
    if not 0 <= op.demand <= 1:
        raise DocumentError("demand out of [0,1]", f.line, join(path, "demand"))
    return op


def _action(node, path) -> Action:
    f = Fields(node, path)
    t = f.get("t", float)
    has_alloc, has_release = f.has("allocate"), f.has("release")
    if has_alloc == has_release:
        raise DocumentError("exactly one of 'allocate' or 'release' is required", f.line, path)
    if has_alloc:
        op = _allocate(f.node_of("allocate"), join(path, "allocate"))
    else:
        op = Release(f.get("release", str))
    f.finish()
    return Action(t, op)


def parse_scenario(text: str, base_dir: Optional[Path] = None) -> Scenario:
    """Parse a scenario document; relative topology paths resolve against ``base_dir``."""
    root = compose(text)
    f = Fields(root)
    version = f.get("format_version", int, 1)
    if version != 1:
        raise DocumentError(f"unsupported format_version {version}", f.line, "format_version")
    topo_node = f.raw("topology")
    if isinstance(topo_node, MappingNode):
        topology = doc_from_node(topo_node)
    else:
        rel = Path(scalar(topo_node, "topology", str))
        topology = load_topology(rel if rel.is_absolute() or base_dir is None else base_dir / rel)
    model = f.raw("model", None)
    try:
        actions_node = f.raw("actions", None)
        actions = ()
        if actions_node is not None:
            actions = tuple(_action(n, join("actions", i))
                            for i, n in enumerate(sequence(actions_node, "actions")))
        scenario = Scenario(
            name=f.get("name", str, "scenario"),
            topology=topology,
            actions=actions,
            duration=f.get("duration", float),
            tick_s=f.get("tick_s", float, 1.0),
            model=None if model is None else _model_ref(scalar(model, "model", str)),
            e_cpu=f.get("e_cpu", float, None),
            noise=f.get("noise", float, 0.0),
            seed=f.get("seed", int, 0),
        )
    except ValueError as exc:
        if isinstance(exc, DocumentError):
            raise
        raise DocumentError(str(exc)) from None
    f.finish()
    return scenario


def load_scenario(path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), base_dir=path.parent)


# -- built-in experiments ----------------------------------------------------

MODEL_ALIASES = {
    "modelA": "fixed_limit_A",
    "modelB": "over_provisioning_B",
    "none": "none",
    "shared_pool": "shared_pool",
}
SWEEP_POINTS = (0, 1, 2, 4, 8, 16, 32)
STRESS = ResourceRequest(cpu_cu=1)


def _model_ref(model: str) -> ResourceModelRef:
    return ResourceModelRef(MODEL_ALIASES.get(model, model))


def single_pop_topology(mc_cpu: int = 4) -> TopologyDoc:
    return TopologyDoc(pops=(PoPDecl("pop1", mc_cpu),), e_cpu=0.5)


def two_pop_topology(mc_cpu: int = 2) -> TopologyDoc:
    return TopologyDoc(
        pops=(PoPDecl("pop1", mc_cpu), PoPDecl("pop2", mc_cpu)),
        switches=("s1",),
        links=(LinkDecl("pop1", "s1"), LinkDecl("pop2", "s1")),
        e_cpu=0.5,
    )


def experiment1(model: str, containers: int = 8, spacing: float = 20.0) -> Scenario:
    """Single PoP with 4 CUs: one 1-CU stress container every ``spacing``
    seconds until ``containers`` were requested, then teardown one by one
    (oldest first) at the same pace, with an idle ``spacing`` at both ends."""
    allocs = [Action(spacing * k, Allocate("pop1", STRESS, label=f"c{k}"))
              for k in range(1, containers + 1)]
    start = spacing * containers
    releases = [Action(start + spacing * k, Release(f"c{k}")) for k in range(1, containers + 1)]
    return Scenario(
        name=f"experiment1_{model}",
        topology=single_pop_topology(),
        actions=tuple(allocs + releases),
        duration=start + spacing * (containers + 1),
        model=_model_ref(model),
    )


def experiment2_point(model: str, k: int, duration: float = 5.0) -> Scenario:
    """Two PoPs with 2 CUs each; PoP2 runs two stress containers, PoP1 ``k``."""
    actions = [Action(0.0, Allocate("pop2", STRESS, label=f"p2c{i}")) for i in (1, 2)]
    actions += [Action(0.0, Allocate("pop1", STRESS, label=f"p1c{i}")) for i in range(1, k + 1)]
    return Scenario(
        name=f"experiment2_{model}_k{k}",
        topology=two_pop_topology(),
        actions=tuple(actions),
        duration=duration,
        model=_model_ref(model),
    )


@dataclass(frozen=True)
class SweepPoint:
    k: int
    pop1_accepted: int
    pop1_per_instance: Optional[float]
    pop2_per_instance: float


def _per_instance(rec: TickRecord, pop: str) -> Optional[float]:
    here = rec.in_pop(pop)
    if not here:
        return None
    return math.fsum(s.usage for s in here) / len(here)


def experiment2_sweep(model: str, points: Sequence[int] = SWEEP_POINTS) -> List[SweepPoint]:
    out = []
    for k in points:
        series = run_scenario(experiment2_point(model, k))
        last = series.ticks[-1]
        accepted = sum(1 for e in series.accepted() if e.label.startswith("p1"))
        out.append(SweepPoint(k, accepted, _per_instance(last, "pop1"), _per_instance(last, "pop2")))
    return out


def builtin_names() -> List[str]:
    names = ["experiment1_modelA", "experiment1_modelB"]
    for model in MODEL_ALIASES:
        names += [f"experiment2_{model}_k{k}" for k in SWEEP_POINTS]
    return names


def builtin_scenario(name: str) -> Scenario:
    if name.startswith("experiment1_"):
        model = name[len("experiment1_"):]
        if model in ("modelA", "modelB"):
            return experiment1(model)
    elif name.startswith("experiment2_") and "_k" in name:
        model, _, k = name[len("experiment2_"):].rpartition("_k")
        if model in MODEL_ALIASES and k.isdigit():
            return experiment2_point(model, int(k))
    raise KeyError(f"unknown built-in scenario {name!r}")
