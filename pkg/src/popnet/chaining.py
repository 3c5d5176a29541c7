"""Service chains over the switch graph, identified by VLAN tags.

Ports are named rather than numbered: ``to:<neighbor>`` for the link towards
a neighbouring node and ``vnf:<instance id>`` for an instance attached to a
PoP's big switch.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import yaml

from .core import PlatformState, PopnetError
from .topology import Topology

FEWEST_HOPS = "fewest_hops"
SMALLEST_DELAY = "smallest_delay"
METRICS = (FEWEST_HOPS, SMALLEST_DELAY)
METRIC_ALIASES = {"hops": FEWEST_HOPS, "delay": SMALLEST_DELAY}
VLAN_MIN, VLAN_MAX = 1, 4094


class ChainError(PopnetError):
    def __init__(self, reason: str, message: str):
        self.reason = reason
        super().__init__(message)


class UnknownChain(PopnetError, LookupError):
    pass


@dataclass(frozen=True)
class FlowEntry:
    switch: str
    in_port: str
    vlan_tag: int
    out_port: str
    vlan_ops: Tuple[str, ...] = ()

    @property
    def key(self) -> Tuple[str, str, int]:
        return (self.switch, self.in_port, self.vlan_tag)

    def to_dict(self):
        return {"switch": self.switch, "in_port": self.in_port, "vlan": self.vlan_tag,
                "out_port": self.out_port, "vlan_ops": list(self.vlan_ops)}


@dataclass
class Chain:
    id: str
    vlan_tag: int
    hops: Tuple[str, ...]
    segments: Tuple[Tuple[str, ...], ...]
    metric: str
    entries: Tuple[FlowEntry, ...] = ()

    def to_dict(self):
        return {"id": self.id, "vlan": self.vlan_tag, "metric": self.metric,
                "hops": list(self.hops), "segments": [list(s) for s in self.segments],
                "flow_entries": [e.to_dict() for e in self.entries]}


@dataclass(frozen=True)
class TrafficReport:
    end_to_end_delay_ms: float
    bottleneck_bandwidth_mbps: float
    delivery_probability: float
    hop_count: int
    payload_mbits: float = 0.0
    transfer_time_ms: float = 0.0

    def to_dict(self):
        return dict(self.__dict__)


def link_port(neighbor: str) -> str:
    return f"to:{neighbor}"


def vnf_port(instance_id: str) -> str:
    return f"vnf:{instance_id}"


def normalize_metric(metric: str) -> str:
    metric = METRIC_ALIASES.get(metric, metric)
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return metric


def edge_weight(topology: Topology, a: str, b: str, metric: str) -> float:
    if metric == FEWEST_HOPS:
        return 1
    return topology.link(a, b).delay_ms


def path_cost(topology: Topology, path: Sequence[str], metric: str) -> float:
    cost = 0
    for a, b in zip(path, path[1:]):
        cost = cost + edge_weight(topology, a, b, metric)
    return cost


def compute_path(topology: Topology, src: str, dst: str, metric: str = FEWEST_HOPS) -> Tuple[str, ...]:
    """Cheapest node path from ``src`` to ``dst``.

    Among equally cheap paths the lexicographically smallest node sequence
    wins, which makes the result independent of insertion order.
    """
    metric = normalize_metric(metric)
    for node in (src, dst):
        if node not in topology.adjacency:
            raise ChainError("unknown_node", f"node {node!r} is not in the topology")
    heap: List[Tuple[float, Tuple[str, ...]]] = [(0, (src,))]
    done = set()
    while heap:
        cost, path = heapq.heappop(heap)
        node = path[-1]
        if node in done:
            continue
        done.add(node)
        if node == dst:
            return path
        for nxt in topology.neighbors(node):
            if nxt not in done:
                heapq.heappush(heap, (cost + edge_weight(topology, node, nxt, metric), path + (nxt,)))
    raise ChainError("no_path", f"no path from {src!r} to {dst!r}")


def _segment_entries(seg: Sequence[str], src_iid: str, dst_iid: str, tag: int) -> List[FlowEntry]:
    if len(seg) == 1:
        return [FlowEntry(seg[0], vnf_port(src_iid), tag, vnf_port(dst_iid))]
    entries = [FlowEntry(seg[0], vnf_port(src_iid), tag, link_port(seg[1]))]
    for prev, node, nxt in zip(seg, seg[1:], seg[2:]):
        entries.append(FlowEntry(node, link_port(prev), tag, link_port(nxt)))
    entries.append(FlowEntry(seg[-1], link_port(seg[-2]), tag, vnf_port(dst_iid)))
    return entries


def _free_vlan(state: PlatformState) -> int:
    used = {c.vlan_tag for c in state.chains.values()}
    for tag in range(VLAN_MIN, VLAN_MAX + 1):
        if tag not in used:
            return tag
    raise ChainError("vlan_exhausted", "all VLAN tags are in use")


def set_chain(state: PlatformState, instance_ids: Iterable[str], metric: str = FEWEST_HOPS) -> Chain:
    """Steer traffic through ``instance_ids`` in order; all-or-nothing."""
    hops = tuple(instance_ids)
    metric = normalize_metric(metric)
    with state.lock:
        if len(hops) < 2:
            raise ChainError("too_few_hops", "a chain needs at least two instances")
        for iid in hops:
            if iid not in state.instances:
                raise ChainError("unknown_instance", f"unknown instance {iid!r}")
        if len(set(hops)) != len(hops):
            # a revisited instance would make the tagged traffic loop forever
            raise ChainError("repeated_instance", "an instance may appear only once in a chain")
        tag = _free_vlan(state)
        topo = state.topology
        segments = []
        entries: List[FlowEntry] = []
        for a, b in zip(hops, hops[1:]):
            seg = compute_path(topo, state.instances[a].pop, state.instances[b].pop, metric)
            segments.append(seg)
            entries += _segment_entries(seg, a, b, tag)
        keys = set()
        for e in entries:
            if e.key in keys:
                raise ChainError("flow_conflict",
                                 f"chain revisits port {e.in_port} on {e.switch}; "
                                 "a single VLAN tag cannot disambiguate it")
            keys.add(e.key)
        first, last = entries[0], entries[-1]
        if first is last:
            entries[0] = FlowEntry(*first.key, first.out_port, ("push", "pop"))
        else:
            entries[0] = FlowEntry(*first.key, first.out_port, ("push",))
            entries[-1] = FlowEntry(*last.key, last.out_port, ("pop",))
        chain = Chain(state.new_id("chain"), tag, hops, tuple(segments), metric, tuple(entries))
        state.chains[chain.id] = chain
        return chain


def get_chain(state: PlatformState, chain_id: str) -> Chain:
    try:
        return state.chains[chain_id]
    except KeyError:
        raise UnknownChain(f"unknown chain {chain_id!r}") from None


def remove_chain(state: PlatformState, chain_id: str) -> List[FlowEntry]:
    with state.lock:
        chain = get_chain(state, chain_id)
        del state.chains[chain_id]
        return list(chain.entries)


def flow_table(state: PlatformState) -> Dict[Tuple[str, str, int], FlowEntry]:
    """All installed entries keyed by (switch, in_port, vlan)."""
    table = {}
    for chain in state.chains.values():
        for e in chain.entries:
            table[e.key] = e
    return table


def simulate_traffic(state: PlatformState, chain_id: str, payload_mbits: float = 0.0) -> TrafficReport:
    chain = get_chain(state, chain_id)
    topo = state.topology
    delays, bandwidths, keep = [], [topo.internal_bandwidth_mbps], []
    for seg in chain.segments:
        for a, b in zip(seg, seg[1:]):
            link = topo.link(a, b)
            delays.append(link.delay_ms)
            bandwidths.append(link.bandwidth_mbps)
            keep.append(1.0 - link.loss)
    delay = sum(delays)
    bottleneck = min(bandwidths)
    return TrafficReport(
        end_to_end_delay_ms=delay,
        bottleneck_bandwidth_mbps=bottleneck,
        delivery_probability=math.prod(keep),
        hop_count=len(delays),
        payload_mbits=payload_mbits,
        transfer_time_ms=delay + payload_mbits / bottleneck * 1000.0,
    )


def render_flow_dump(chains: Sequence[dict]) -> str:
    """YAML listing of chains plus their merged flow table.

    Takes the ``Chain.to_dict`` form so clients can render what an endpoint
    returned without access to the platform state.
    """
    entries = [e for c in chains for e in c["flow_entries"]]
    entries.sort(key=lambda e: (e["switch"], e["vlan"], e["in_port"]))
    data = {
        "chains": [{k: v for k, v in c.items() if k != "flow_entries"} for c in chains],
        "flow_table": entries,
    }
    return yaml.safe_dump(data, sort_keys=False)


def dump_flow_tables(state: PlatformState) -> str:
    with state.lock:
        return render_flow_dump([c.to_dict() for c in state.chains.values()])
