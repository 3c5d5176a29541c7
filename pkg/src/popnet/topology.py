"""Multi-PoP topology documents: parsing, validation and the built graph.

Each PoP is collapsed into a single "big switch" node; inter-PoP switches
are plain nodes. The document format is YAML (see docs/topology-format.md).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml
from yaml.nodes import ScalarNode

from . import registry
from .yamldoc import DocumentError, Fields, compose, join, line_of, scalar, sequence, to_python

FORMAT_VERSION = 1
DEFAULT_MODEL = "over_provisioning_B"
DEFAULT_ENDPOINT = "heat-like"


class TopologyError(DocumentError):
    pass


@dataclass(frozen=True)
class ResourceModelRef:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class EndpointDecl:
    port: int
    type_name: str = DEFAULT_ENDPOINT
    bind: str = "127.0.0.1"


@dataclass(frozen=True)
class PoPDecl:
    name: str
    mc_cpu: int
    mem_capacity_mb: int = 0
    storage_capacity_gb: int = 0
    model: Optional[ResourceModelRef] = None
    endpoint: Optional[EndpointDecl] = None


@dataclass(frozen=True)
class LinkDecl:
    a: str
    b: str
    delay_ms: Optional[float] = None
    bandwidth_mbps: Optional[float] = None
    loss: Optional[float] = None


@dataclass(frozen=True)
class Defaults:
    delay_ms: float = 0.0
    bandwidth_mbps: float = 1000.0
    loss: float = 0.0
    internal_bandwidth_mbps: float = 10000.0
    model: Optional[ResourceModelRef] = None


@dataclass(frozen=True)
class TopologyDoc:
    pops: Tuple[PoPDecl, ...]
    switches: Tuple[str, ...] = ()
    links: Tuple[LinkDecl, ...] = ()
    defaults: Defaults = Defaults()
    e_cpu: Optional[float] = None
    format_version: int = FORMAT_VERSION

    def with_model(self, model: ResourceModelRef) -> "TopologyDoc":
        """Copy of the document with every PoP switched to ``model``."""
        return replace(self, pops=tuple(replace(p, model=model) for p in self.pops))


@dataclass(frozen=True)
class LinkAttrs:
    delay_ms: float
    bandwidth_mbps: float
    loss: float


def edge_key(a: str, b: str) -> Tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class Topology:
    nodes: Tuple[str, ...]
    pops: Mapping[str, PoPDecl]
    switches: Tuple[str, ...]
    links: Mapping[Tuple[str, str], LinkAttrs]
    adjacency: Mapping[str, Tuple[str, ...]]
    internal_bandwidth_mbps: float
    e_cpu: Optional[float] = None

    @property
    def pop_names(self) -> Tuple[str, ...]:
        return tuple(self.pops)

    def is_pop(self, node: str) -> bool:
        return node in self.pops

    def neighbors(self, node: str) -> Tuple[str, ...]:
        return self.adjacency[node]

    def link(self, a: str, b: str) -> LinkAttrs:
        return self.links[edge_key(a, b)]


# -- parsing -----------------------------------------------------------------

def _model_ref(node, path) -> ResourceModelRef:
    if isinstance(node, ScalarNode):
        return ResourceModelRef(scalar(node, path, str))
    f = Fields(node, path)
    kind = f.get("kind", str)
    params_node = f.raw("params", None)
    params = {}
    if params_node is not None:
        params = to_python(params_node)
        if not isinstance(params, dict):
            raise TopologyError("params must be a mapping", line_of(params_node), join(path, "params"))
    f.finish()
    return ResourceModelRef(kind, params)


def _endpoint(node, path) -> EndpointDecl:
    f = Fields(node, path)
    decl = EndpointDecl(
        port=f.get("port", int),
        type_name=f.get("type", str, DEFAULT_ENDPOINT),
        bind=f.get("bind", str, "127.0.0.1"),
    )
    f.finish()
    return decl


def _pop(node, path) -> PoPDecl:
    f = Fields(node, path)
    model = f.raw("model", None)
    endpoint = f.raw("endpoint", None)
    decl = PoPDecl(
        name=f.get("name", str),
        mc_cpu=f.get("mc_cpu", int),
        mem_capacity_mb=f.get("mem_capacity_mb", int, 0),
        storage_capacity_gb=f.get("storage_capacity_gb", int, 0),
        model=None if model is None else _model_ref(model, join(path, "model")),
        endpoint=None if endpoint is None else _endpoint(endpoint, join(path, "endpoint")),
    )
    f.finish()
    return decl


def _link(node, path) -> LinkDecl:
    f = Fields(node, path)
    decl = LinkDecl(
        a=f.get("a", str),
        b=f.get("b", str),
        delay_ms=f.get("delay_ms", float, None),
        bandwidth_mbps=f.get("bandwidth_mbps", float, None),
        loss=f.get("loss", float, None),
    )
    f.finish()
    return decl


def _defaults(node, path) -> Defaults:
    f = Fields(node, path)
    base = Defaults()
    model = f.raw("model", None)
    d = Defaults(
        delay_ms=f.get("delay_ms", float, base.delay_ms),
        bandwidth_mbps=f.get("bandwidth_mbps", float, base.bandwidth_mbps),
        loss=f.get("loss", float, base.loss),
        internal_bandwidth_mbps=f.get("internal_bandwidth_mbps", float, base.internal_bandwidth_mbps),
        model=None if model is None else _model_ref(model, join(path, "model")),
    )
    f.finish()
    return d


def doc_from_node(node) -> TopologyDoc:
    """Build a TopologyDoc from an already composed YAML node."""
    try:
        f = Fields(node)
        version = f.get("format_version", int, FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise TopologyError(f"unsupported format_version {version}", f.line, "format_version")
        pop_nodes = sequence(f.raw("pops"), "pops")
        if not pop_nodes:
            raise TopologyError("at least one PoP is required", line_of(f.node_of("pops")), "pops")
        pops = tuple(_pop(n, join("pops", i)) for i, n in enumerate(pop_nodes))
        sw_node = f.raw("switches", None)
        switches = ()
        if sw_node is not None:
            switches = tuple(scalar(n, join("switches", i), str)
                             for i, n in enumerate(sequence(sw_node, "switches")))
        link_node = f.raw("links", None)
        links = ()
        if link_node is not None:
            items = sequence(link_node, "links")
            declared = {p.name for p in pops} | set(switches)
            parsed = []
            for i, n in enumerate(items):
                link = _link(n, join("links", i))
                for end in (link.a, link.b):
                    if end not in declared:
                        raise TopologyError(f"link references undeclared node {end!r}",
                                            line_of(n), join("links", i))
                parsed.append(link)
            links = tuple(parsed)
        defaults_node = f.raw("defaults", None)
        defaults = Defaults() if defaults_node is None else _defaults(defaults_node, "defaults")
        e_cpu = f.get("e_cpu", float, None)
        f.finish()
    except TopologyError:
        raise
    except DocumentError as exc:
        raise TopologyError(exc.message, exc.line, exc.field) from None
    return TopologyDoc(pops, switches, links, defaults, e_cpu, version)


def parse_topology(text: str) -> TopologyDoc:
    try:
        node = compose(text)
    except DocumentError as exc:
        raise TopologyError(exc.message, exc.line, exc.field) from None
    return doc_from_node(node)


def load_topology(path) -> TopologyDoc:
    return parse_topology(Path(path).read_text())


# -- serialization -----------------------------------------------------------

def _ref_to_data(ref: ResourceModelRef):
    if not ref.params:
        return ref.kind
    return {"kind": ref.kind, "params": dict(ref.params)}


def doc_to_data(doc: TopologyDoc) -> Dict[str, Any]:
    data: Dict[str, Any] = {"format_version": doc.format_version}
    if doc.e_cpu is not None:
        data["e_cpu"] = doc.e_cpu
    d = doc.defaults
    defaults = {
        "delay_ms": d.delay_ms,
        "bandwidth_mbps": d.bandwidth_mbps,
        "loss": d.loss,
        "internal_bandwidth_mbps": d.internal_bandwidth_mbps,
    }
    if d.model is not None:
        defaults["model"] = _ref_to_data(d.model)
    data["defaults"] = defaults
    pops = []
    for p in doc.pops:
        item: Dict[str, Any] = {
            "name": p.name,
            "mc_cpu": p.mc_cpu,
            "mem_capacity_mb": p.mem_capacity_mb,
            "storage_capacity_gb": p.storage_capacity_gb,
        }
        if p.model is not None:
            item["model"] = _ref_to_data(p.model)
        if p.endpoint is not None:
            item["endpoint"] = {"type": p.endpoint.type_name, "port": p.endpoint.port,
                                "bind": p.endpoint.bind}
        pops.append(item)
    data["pops"] = pops
    data["switches"] = list(doc.switches)
    links = []
    for link in doc.links:
        item = {"a": link.a, "b": link.b}
        for name in ("delay_ms", "bandwidth_mbps", "loss"):
            value = getattr(link, name)
            if value is not None:
                item[name] = value
        links.append(item)
    data["links"] = links
    return data


def dump_topology(doc: TopologyDoc) -> str:
    return yaml.safe_dump(doc_to_data(doc), sort_keys=False)


# -- validation --------------------------------------------------------------

def resolved_model(pop: PoPDecl, defaults: Defaults) -> ResourceModelRef:
    return pop.model or defaults.model or ResourceModelRef(DEFAULT_MODEL)


def resolved_link(link: LinkDecl, defaults: Defaults) -> LinkAttrs:
    return LinkAttrs(
        delay_ms=defaults.delay_ms if link.delay_ms is None else link.delay_ms,
        bandwidth_mbps=defaults.bandwidth_mbps if link.bandwidth_mbps is None else link.bandwidth_mbps,
        loss=defaults.loss if link.loss is None else link.loss,
    )


def _finite(x: float) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x)


def _link_violations(label: str, attrs: LinkAttrs) -> List[str]:
    out = []
    if not _finite(attrs.delay_ms) or attrs.delay_ms < 0:
        out.append(f"delay_ms must be >= 0 on {label}")
    if not _finite(attrs.bandwidth_mbps) or attrs.bandwidth_mbps <= 0:
        out.append(f"bandwidth_mbps must be > 0 on {label}")
    if not _finite(attrs.loss) or not 0 <= attrs.loss <= 1:
        out.append(f"loss out of [0,1] on {label}")
    return out


def validate(doc: TopologyDoc) -> List[str]:
    """Return every problem found in ``doc``; an empty list means valid."""
    problems: List[str] = []
    if not doc.pops:
        problems.append("at least one PoP is required")
    if doc.e_cpu is not None and not (_finite(doc.e_cpu) and 0 < doc.e_cpu <= 1):
        problems.append("e_cpu out of (0,1]")

    names = [p.name for p in doc.pops] + list(doc.switches)
    seen = set()
    for name in names:
        if name in seen:
            problems.append(f"duplicate node name {name!r}")
        seen.add(name)

    ports: Dict[int, str] = {}
    for p in doc.pops:
        if p.mc_cpu < 1:
            problems.append(f"mc_cpu must be >= 1 for PoP {p.name!r}")
        if p.mem_capacity_mb < 0 or p.storage_capacity_gb < 0:
            problems.append(f"negative capacity for PoP {p.name!r}")
        kind = resolved_model(p, doc.defaults).kind
        if kind not in registry.MODELS:
            problems.append(f"unknown resource model {kind!r} for PoP {p.name!r}")
        ep = p.endpoint
        if ep is not None:
            if ep.type_name not in registry.ENDPOINTS:
                problems.append(f"unknown endpoint type {ep.type_name!r} for PoP {p.name!r}")
            if not 0 <= ep.port <= 65535:
                problems.append(f"port {ep.port} out of range for PoP {p.name!r}")
            elif ep.port != 0:
                # port 0 asks the OS for a free port and never collides
                if ep.port in ports:
                    problems.append(f"duplicate port {ep.port} for PoPs {ports[ep.port]!r} and {p.name!r}")
                ports[ep.port] = p.name

    d = doc.defaults
    problems += _link_violations("defaults", LinkAttrs(d.delay_ms, d.bandwidth_mbps, d.loss))
    if not _finite(d.internal_bandwidth_mbps) or d.internal_bandwidth_mbps <= 0:
        problems.append("internal_bandwidth_mbps must be > 0")

    adjacency: Dict[str, set] = {n: set() for n in names}
    for link in doc.links:
        label = f"link {link.a}-{link.b}"
        ok = True
        for end in (link.a, link.b):
            if end not in adjacency:
                problems.append(f"{label} references undeclared node {end!r}")
                ok = False
        if link.a == link.b:
            problems.append(f"self-loop on {link.a!r}")
            ok = False
        if ok:
            if link.b in adjacency[link.a]:
                problems.append(f"duplicate {label}")
            adjacency[link.a].add(link.b)
            adjacency[link.b].add(link.a)
        problems += _link_violations(label, resolved_link(link, d))

    if names and not _connected(adjacency):
        problems.append("graph not connected")
    return problems


def _connected(adjacency: Mapping[str, set]) -> bool:
    start = next(iter(adjacency))
    seen = {start}
    queue = deque([start])
    while queue:
        for nxt in adjacency[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(adjacency)


def build(doc: TopologyDoc) -> Topology:
    problems = validate(doc)
    if problems:
        raise TopologyError("invalid topology: " + "; ".join(problems))
    pops = {p.name: replace(p, model=resolved_model(p, doc.defaults))
            for p in sorted(doc.pops, key=lambda p: p.name)}
    links = {}
    adjacency: Dict[str, List[str]] = {n: [] for n in list(pops) + list(doc.switches)}
    for link in doc.links:
        links[edge_key(link.a, link.b)] = resolved_link(link, doc.defaults)
        adjacency[link.a].append(link.b)
        adjacency[link.b].append(link.a)
    nodes = tuple(sorted(adjacency))
    return Topology(
        nodes=nodes,
        pops=pops,
        switches=tuple(sorted(doc.switches)),
        links=dict(sorted(links.items())),
        adjacency={n: tuple(sorted(adjacency[n])) for n in nodes},
        internal_bandwidth_mbps=doc.defaults.internal_bandwidth_mbps,
        e_cpu=doc.e_cpu,
    )
