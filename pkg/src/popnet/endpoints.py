"""Per-PoP management endpoints with Heat-like stack semantics.

Every PoP with an ``endpoint`` declaration gets its own HTTP listener. A
listener only ever sees its own PoP's stacks and instances; the
``/platform/...`` routes are served identically by every listener.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
from urllib.parse import parse_qsl, urlsplit

from . import registry
from .chaining import (
    ChainError,
    UnknownChain,
    normalize_metric,
    remove_chain,
    set_chain,
    simulate_traffic,
)
from .core import (
    InstanceInUse,
    PlatformState,
    PopnetError,
    ResourceRequest,
    Stack,
    UnknownInstance,
    UnknownPoP,
)
from .models import allocate, release

logger = logging.getLogger(__name__)


class BadRequest(PopnetError):
    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(message if field is None else f"{field}: {message}")


class StackRejected(PopnetError):
    def __init__(self, reason: str, message: str, resource: Optional[str] = None):
        self.reason = reason
        self.resource = resource
        super().__init__(message)


class UnknownStack(PopnetError, LookupError):
    pass


class EndpointStartupError(PopnetError):
    pass


# -- templates ---------------------------------------------------------------

@dataclass(frozen=True)
class ResourceSpec:
    name: str
    request: ResourceRequest
    image: str = ""
    demand: float = 1.0


@dataclass(frozen=True)
class StackTemplate:
    name: str
    resources: Tuple[ResourceSpec, ...]
    chain: Optional[Tuple[str, ...]] = None
    chain_metric: str = "fewest_hops"


def _take(data: Dict[str, Any], key: str, kind, path: str, default: Any = ...) -> Any:
    field = f"{path}.{key}" if path else key
    if key not in data:
        if default is ...:
            raise BadRequest("missing required field", field)
        return default
    value = data[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind in (int, float) and isinstance(value, bool)):
        raise BadRequest(f"expected {getattr(kind, '__name__', kind)}", field)
    return value


def _no_extra(data: Dict[str, Any], allowed: Sequence[str], path: str) -> None:
    for key in data:
        if key not in allowed:
            raise BadRequest("unknown field", f"{path}.{key}" if path else str(key))


def parse_template(data: Any) -> StackTemplate:
    """Validate a decoded JSON stack template; errors carry the field path."""
    if not isinstance(data, dict):
        raise BadRequest("template must be an object")
    _no_extra(data, ("name", "resources", "chain"), "")
    name = _take(data, "name", str, "")
    raw = _take(data, "resources", list, "")
    if not raw:
        raise BadRequest("at least one resource is required", "resources")
    resources = []
    seen = set()
    for i, item in enumerate(raw):
        path = f"resources[{i}]"
        if not isinstance(item, dict):
            raise BadRequest("expected object", path)
        _no_extra(item, ("name", "image", "cpu_cu", "memory_mb", "storage_gb", "demand"), path)
        rname = _take(item, "name", str, path)
        if rname in seen:
            raise BadRequest(f"duplicate resource name {rname!r}", f"{path}.name")
        seen.add(rname)
        try:
            req = ResourceRequest(
                cpu_cu=_take(item, "cpu_cu", int, path),
                memory_mb=_take(item, "memory_mb", int, path, 0),
                storage_gb=_take(item, "storage_gb", int, path, 0),
            )
        except ValueError as exc:
            raise BadRequest(str(exc), path) from None
        demand = _take(item, "demand", float, path, 1.0)
        if not 0 <= demand <= 1:
            raise BadRequest("demand out of [0,1]", f"{path}.demand")
        resources.append(ResourceSpec(rname, req, _take(item, "image", str, path, ""), demand))
    chain = None
    metric = "fewest_hops"
    if "chain" in data:
        c = data["chain"]
        if not isinstance(c, dict):
            raise BadRequest("expected object", "chain")
        _no_extra(c, ("hops", "metric"), "chain")
        hops = _take(c, "hops", list, "chain")
        for j, hop in enumerate(hops):
            if not isinstance(hop, str) or hop not in seen:
                raise BadRequest(f"chain references unknown resource {hop!r}", f"chain.hops[{j}]")
        chain = tuple(hops)
        try:
            metric = normalize_metric(_take(c, "metric", str, "chain", metric))
        except ValueError as exc:
            raise BadRequest(str(exc), "chain.metric") from None
    return StackTemplate(name, tuple(resources), chain, metric)


# -- stack operations ----------------------------------------------------------

def stack_view(state: PlatformState, stack: Stack) -> Dict[str, Any]:
    return {
        "id": stack.id,
        "name": stack.name,
        "pop": stack.pop,
        "instances": [dict(state.instances[iid].to_dict(), name=name)
                      for name, iid in stack.instances.items()],
        "chain": stack.chain,
    }


def create_stack(state: PlatformState, pop: str, template: StackTemplate) -> Stack:
    """Allocate every resource of ``template`` in ``pop`` or none of them."""
    with state.lock:
        state.ledger(pop)
        stack_id = state.new_id("stack")
        made: List[str] = []
        try:
            names = {}
            for res in template.resources:
                inst, outcome = allocate(state, pop, res.request, res.image, res.demand,
                                         name=res.name, stack=stack_id)
                if not outcome.accepted:
                    raise StackRejected(outcome.reason, f"resource {res.name!r} rejected: {outcome.reason}",
                                        res.name)
                made.append(inst.id)
                names[res.name] = inst.id
            chain_id = None
            if template.chain:
                chain = set_chain(state, [names[n] for n in template.chain], template.chain_metric)
                chain_id = chain.id
        except (StackRejected, ChainError, ValueError):
            for iid in reversed(made):
                release(state, iid)
            raise
        stack = Stack(stack_id, pop, template.name, names, chain_id)
        state.stacks[stack_id] = stack
        return stack


def get_stack(state: PlatformState, pop: str, stack_id: str) -> Stack:
    stack = state.stacks.get(stack_id)
    if stack is None or stack.pop != pop:
        raise UnknownStack(f"unknown stack {stack_id!r} on {pop}")
    return stack


def delete_stack(state: PlatformState, pop: str, stack_id: str) -> List[str]:
    """Remove the stack's chains, then release its instances."""
    with state.lock:
        stack = get_stack(state, pop, stack_id)
        ids = list(stack.instances.values())
        for chain in list(state.chains.values()):
            if any(h in ids for h in chain.hops):
                remove_chain(state, chain.id)
        for iid in ids:
            release(state, iid)
        state.stacks.pop(stack_id, None)
        return ids


def release_instance(state: PlatformState, pop: str, instance_id: str) -> None:
    with state.lock:
        inst = state.instances.get(instance_id)
        if inst is None or inst.pop != pop:
            raise UnknownInstance(f"unknown instance {instance_id!r} on {pop}")
        release(state, instance_id)


def _latest(state: PlatformState, iid: str) -> float:
    series = state.usage.get(iid) or []
    return series[-1][1] if series else 0.0


def pop_usage(state: PlatformState, pop: str) -> float:
    return math.fsum(_latest(state, c.id) for c in state.instances_in(pop))


def instance_stats(state: PlatformState, pop: str, instance_id: str) -> Dict[str, Any]:
    inst = state.instances.get(instance_id)
    if inst is None or inst.pop != pop:
        raise UnknownInstance(f"unknown instance {instance_id!r} on {pop}")
    return {
        "instance_id": inst.id,
        "pop": pop,
        "cpu_fraction": inst.cpu_fraction,
        "demand": inst.demand,
        "usage": [list(s) for s in state.usage.get(inst.id, [])],
        "pop_usage": pop_usage(state, pop),
    }


def get_stats(state: PlatformState, pop: str, instance_id: str = "all"):
    """Stats for one instance, or a list for every instance of the PoP."""
    with state.lock:
        state.ledger(pop)
        if instance_id == "all":
            return [instance_stats(state, pop, c.id) for c in state.instances_in(pop)]
        return instance_stats(state, pop, instance_id)


def platform_stats(state: PlatformState) -> Dict[str, Any]:
    with state.lock:
        pops = []
        for name, ledger in state.ledgers.items():
            decl = state.topology.pops[name]
            here = state.instances_in(name)
            entry = ledger.to_dict()
            entry.update(
                instances=len(here),
                cpu_fraction_sum=math.fsum(c.cpu_fraction for c in here),
                usage_sum=pop_usage(state, name),
                endpoint=None if decl.endpoint is None else {
                    "type": decl.endpoint.type_name,
                    "port": state.endpoint_ports.get(name, decl.endpoint.port),
                },
            )
            pops.append(entry)
        return {
            "clock": state.clock,
            "e_cpu": state.config.e_cpu,
            "total_mc": state.config.total_mc,
            "n_pops": state.config.n_pops,
            "cpu_fraction_sum": math.fsum(c.cpu_fraction for c in state.instances.values()),
            "chains": len(state.chains),
            "pops": pops,
        }


# -- endpoint types ------------------------------------------------------------

@dataclass
class Response:
    status: int
    body: Any = None

    def encode(self) -> bytes:
        if self.body is None:
            return b""
        return json.dumps(self.body, sort_keys=True).encode()


def _error(status: int, reason: str, message: str, **extra) -> Response:
    return Response(status, dict(error=message, reason=reason, **extra))


_CHAIN_STATUS = {"unknown_instance": 404, "too_few_hops": 400, "unknown_node": 400,
                 "repeated_instance": 400}


class Endpoint:
    """Base for endpoint types: maps (method, path, body) to a Response."""

    type_name = ""

    def __init__(self, state: PlatformState, pop: str):
        self.state = state
        self.pop = pop

    def handle(self, method: str, path: str, body: Optional[bytes] = None,
               query: Optional[Dict[str, str]] = None) -> Response:
        raise NotImplementedError


class HeatLikeEndpoint(Endpoint):
    type_name = "heat-like"

    def handle(self, method, path, body=None, query=None):
        parts = [p for p in path.split("/") if p]
        query = query or {}
        try:
            data = None
            if body:
                try:
                    data = json.loads(body)
                except ValueError as exc:
                    raise BadRequest(f"invalid JSON: {exc}") from None
            with self.state.lock:
                return self._route(method, parts, data, query)
        except BadRequest as exc:
            return _error(400, "malformed", str(exc), field=exc.field)
        except StackRejected as exc:
            return _error(409, exc.reason, str(exc), resource=exc.resource)
        except ChainError as exc:
            return _error(_CHAIN_STATUS.get(exc.reason, 409), exc.reason, str(exc))
        except InstanceInUse as exc:
            return _error(409, exc.reason, str(exc))
        except (UnknownStack, UnknownInstance, UnknownChain, UnknownPoP) as exc:
            return _error(404, "not_found", str(exc))

    def _route(self, method, parts, data, query) -> Response:
        state, pop = self.state, self.pop
        match (method, parts):
            case ("GET", []):
                return Response(200, {"pop": pop, "type": self.type_name})
            case ("POST", ["stacks"]):
                stack = create_stack(state, pop, parse_template(data))
                return Response(201, stack_view(state, stack))
            case ("GET", ["stacks"]):
                stacks = [stack_view(state, s) for s in state.stacks.values() if s.pop == pop]
                return Response(200, {"stacks": stacks})
            case ("GET", ["stacks", sid]):
                return Response(200, stack_view(state, get_stack(state, pop, sid)))
            case ("DELETE", ["stacks", sid]):
                delete_stack(state, pop, sid)
                return Response(204)
            case ("GET", ["instances"]):
                return Response(200, {"instances": [c.to_dict() for c in state.instances_in(pop)]})
            case ("DELETE", ["instances", iid]):
                release_instance(state, pop, iid)
                return Response(204)
            case ("GET", ["instances", iid, "stats"]):
                stats = get_stats(state, pop, iid)
                return Response(200, {"instances": stats} if iid == "all" else stats)
            case ("GET", ["platform", "stats"]):
                return Response(200, platform_stats(state))
            case ("GET", ["platform", "chains"]):
                return Response(200, {"chains": [c.to_dict() for c in state.chains.values()]})
            case ("POST", ["platform", "chains"]):
                if not isinstance(data, dict):
                    raise BadRequest("expected object")
                _no_extra(data, ("hops", "metric"), "")
                hops = _take(data, "hops", list, "")
                for j, hop in enumerate(hops):
                    if not isinstance(hop, str):
                        raise BadRequest("expected str", f"hops[{j}]")
                metric = _take(data, "metric", str, "", "fewest_hops")
                try:
                    chain = set_chain(state, hops, metric)
                except ValueError as exc:
                    raise BadRequest(str(exc), "metric") from None
                return Response(201, chain.to_dict())
            case ("GET", ["platform", "chains", cid]):
                if cid not in state.chains:
                    raise UnknownChain(f"unknown chain {cid!r}")
                return Response(200, state.chains[cid].to_dict())
            case ("DELETE", ["platform", "chains", cid]):
                remove_chain(state, cid)
                return Response(204)
            case ("GET", ["platform", "chains", cid, "traffic"]):
                try:
                    mbits = float(query.get("mbits", 0.0))
                except ValueError:
                    raise BadRequest("mbits must be a number", "mbits") from None
                return Response(200, simulate_traffic(state, cid, mbits).to_dict())
        return _error(404, "not_found", f"no route for {method} /{'/'.join(parts)}")


def register_endpoint(name: str, factory: Callable[[PlatformState, str], Endpoint]):
    return registry.ENDPOINTS.register(name, factory)


register_endpoint(HeatLikeEndpoint.type_name, HeatLikeEndpoint)


# -- HTTP listeners ------------------------------------------------------------

def _handler_for(endpoint: Endpoint):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _serve(self, method):
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length) if length else None
            url = urlsplit(self.path)
            resp = endpoint.handle(method, url.path, body, dict(parse_qsl(url.query)))
            payload = resp.encode()
            self.send_response(resp.status)
            if payload:
                self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            if payload:
                self.wfile.write(payload)

        def do_GET(self):
            self._serve("GET")

        def do_POST(self):
            self._serve("POST")

        def do_DELETE(self):
            self._serve("DELETE")

        def log_message(self, fmt, *args):
            logger.debug("%s %s", endpoint.pop, fmt % args)

    return Handler


class BoundEndpoint:
    def __init__(self, pop: str, endpoint: Endpoint, server: ThreadingHTTPServer):
        self.pop = pop
        self.endpoint = endpoint
        self.server = server
        self.thread = threading.Thread(target=server.serve_forever, name=f"endpoint-{pop}",
                                       daemon=True)

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    @property
    def url(self) -> str:
        host = self.server.server_address[0]
        return f"http://{host}:{self.port}"

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()


def start_endpoints(state: PlatformState, base_port: Optional[int] = None) -> List[BoundEndpoint]:
    """Bind one listener per PoP that declares an endpoint.

    ``base_port`` renumbers the listeners consecutively from that port in
    PoP order.
    """
    bound: List[BoundEndpoint] = []
    decls = [(name, p.endpoint) for name, p in state.topology.pops.items() if p.endpoint]
    try:
        for i, (name, decl) in enumerate(decls):
            port = decl.port if base_port is None else base_port + i
            endpoint = registry.ENDPOINTS.get(decl.type_name)(state, name)
            try:
                server = ThreadingHTTPServer((decl.bind, port), _handler_for(endpoint))
            except OSError as exc:
                raise EndpointStartupError(
                    f"PoP {name}: cannot listen on {decl.bind}:{port}: {exc.strerror or exc}") from None
            server.daemon_threads = True
            bound.append(BoundEndpoint(name, endpoint, server))
    except Exception:
        for b in bound:
            b.server.server_close()
        raise
    with state.lock:
        for b in bound:
            state.endpoint_ports[b.pop] = b.port
    for b in bound:
        b.thread.start()
    return bound


def stop_endpoints(bound: Sequence[BoundEndpoint]) -> None:
    for b in bound:
        b.close()
