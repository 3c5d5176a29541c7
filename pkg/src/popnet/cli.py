"""Command-line entry point.

``popnet up`` runs the per-PoP endpoints in the foreground. Every other
operational verb is a client of those endpoints, so the CLI exercises the
same surface an orchestrator would.

Exit codes: 0 success, 1 domain rejection or unknown object, 2 usage error
(including "platform not running").
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading
import urllib.error
import urllib.request
from typing import Any, Dict, List, Optional, Tuple
from urllib.parse import urlsplit

from .chaining import render_flow_dump
from .core import new_platform
from .endpoints import EndpointStartupError, start_endpoints, stop_endpoints
from .sim import ScenarioError, builtin_names, builtin_scenario, export_events, export_series, load_scenario, run_scenario, tick
from .topology import build, load_topology
from .yamldoc import DocumentError

DEFAULT_PORT = 8081


class UsageError(Exception):
    pass


class Rejected(Exception):
    pass


# -- client plumbing ---------------------------------------------------------

def base_url(args) -> str:
    if args.endpoint:
        return args.endpoint.rstrip("/")
    if os.environ.get("POPNET_ENDPOINT"):
        return os.environ["POPNET_ENDPOINT"].rstrip("/")
    port = int(os.environ.get("POPNET_BASE_PORT", DEFAULT_PORT))
    return f"http://127.0.0.1:{port}"


def http(method: str, url: str, body: Any = None) -> Tuple[int, Any]:
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method=method)
    if data is not None:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            status, raw = resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        status, raw = exc.code, exc.read()
    except (urllib.error.URLError, ConnectionError) as exc:
        raise UsageError(f"platform is not running at {url} ({exc}); start it with `popnet up`") from None
    return status, (json.loads(raw) if raw else None)


class Client:
    def __init__(self, url: str):
        self.url = url
        self._stats = None

    def call(self, method: str, path: str, body: Any = None, base: Optional[str] = None) -> Any:
        status, data = http(method, (base or self.url) + path, body)
        if status >= 400:
            reason = (data or {}).get("reason", "error")
            message = (data or {}).get("error", "")
            if status == 400:
                raise UsageError(f"{reason}: {message}")
            raise Rejected(f"{reason}: {message}")
        return data

    def platform(self) -> Dict[str, Any]:
        if self._stats is None:
            self._stats = self.call("GET", "/platform/stats")
        return self._stats

    def pop_url(self, pop: str) -> str:
        for entry in self.platform()["pops"]:
            if entry["pop"] == pop:
                if entry["endpoint"] is None:
                    raise Rejected(f"unknown_pop: PoP {pop!r} has no endpoint")
                host = urlsplit(self.url).hostname
                return f"http://{host}:{entry['endpoint']['port']}"
        raise Rejected(f"unknown_pop: no PoP named {pop!r}")

    def pops_with_endpoints(self) -> List[str]:
        return [p["pop"] for p in self.platform()["pops"] if p["endpoint"] is not None]

    def find_instance(self, iid: str) -> str:
        for pop in self.pops_with_endpoints():
            data = self.call("GET", "/instances", base=self.pop_url(pop))
            if any(i["id"] == iid for i in data["instances"]):
                return pop
        raise Rejected(f"not_found: unknown instance {iid!r}")


def _emit(args, data: Any, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(data, indent=2, sort_keys=True))
    else:
        print(text, end="" if text.endswith("\n") else "\n")


def _table(rows: List[List[Any]], header: List[str]) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells)


# -- verbs -------------------------------------------------------------------

def cmd_up(args) -> int:
    try:
        topo = build(load_topology(args.topology))
    except (OSError, DocumentError) as exc:
        raise UsageError(f"cannot load topology: {exc}") from None
    state = new_platform(topo, args.e_cpu)
    base = args.base_port
    if base is None and os.environ.get("POPNET_BASE_PORT"):
        base = int(os.environ["POPNET_BASE_PORT"])
    try:
        bound = start_endpoints(state, base_port=base)
    except EndpointStartupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for b in bound:
        print(f"{b.pop} {b.endpoint.type_name} {b.url}", flush=True)
    print(f"platform up: {len(bound)} endpoint(s), e_cpu={state.config.e_cpu}, "
          f"total_mc={state.config.total_mc}", flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.wait(args.tick if args.tick > 0 else None):
            tick(state, args.tick)
    except KeyboardInterrupt:
        pass
    finally:
        stop_endpoints(bound)
    return 0


def cmd_pops(args, client: Client) -> int:
    data = client.platform()
    rows = [[p["pop"], p["model"]["kind"], p["mc_cpu"], p["ac_cpu"], p["instances"],
             f"{p['cpu_fraction_sum']:.6g}", p["endpoint"]["port"] if p["endpoint"] else "-"]
            for p in data["pops"]]
    _emit(args, data["pops"], _table(rows, ["pop", "model", "mc", "ac", "instances", "cpu", "port"]))
    return 0


def cmd_instances(args, client: Client) -> int:
    pops = [args.pop] if args.pop else client.pops_with_endpoints()
    items = []
    for pop in pops:
        items += client.call("GET", "/instances", base=client.pop_url(pop))["instances"]
    rows = [[i["id"], i["pop"], i["name"] or "", i["cpu_cu"], f"{i['cpu_fraction']:.6g}", i["demand"]]
            for i in items]
    _emit(args, items, _table(rows, ["id", "pop", "name", "cu", "fraction", "demand"]))
    return 0


def cmd_alloc(args, client: Client) -> int:
    resource = {"name": args.name or args.image or "vnf", "cpu_cu": args.cu, "memory_mb": args.mem,
                "storage_gb": args.storage, "demand": args.demand}
    if args.image:
        resource["image"] = args.image
    template = {"name": args.name or "cli", "resources": [resource]}
    stack = client.call("POST", "/stacks", template, base=client.pop_url(args.pop))
    inst = stack["instances"][0]
    print(f"{inst['id']} pop={inst['pop']} cpu_fraction={inst['cpu_fraction']!r} stack={stack['id']}")
    return 0


def cmd_release(args, client: Client) -> int:
    pop = client.find_instance(args.id)
    client.call("DELETE", f"/instances/{args.id}", base=client.pop_url(pop))
    print(f"released {args.id}")
    return 0


def cmd_chain_set(args, client: Client) -> int:
    chain = client.call("POST", "/platform/chains", {"hops": args.ids, "metric": args.metric})
    print(f"{chain['id']} vlan={chain['vlan']} hops={','.join(chain['hops'])}")
    return 0


def cmd_chain_del(args, client: Client) -> int:
    client.call("DELETE", f"/platform/chains/{args.cid}")
    print(f"removed {args.cid}")
    return 0


def cmd_chains_dump(args, client: Client) -> int:
    chains = client.call("GET", "/platform/chains")["chains"]
    _emit(args, chains, render_flow_dump(chains))
    return 0


def cmd_stats(args, client: Client) -> int:
    if args.id is None:
        data = client.platform()
        lines = [f"clock={data['clock']} e_cpu={data['e_cpu']} total_mc={data['total_mc']} "
                 f"cpu_fraction_sum={data['cpu_fraction_sum']!r}"]
        lines += [f"{p['pop']}: instances={p['instances']} ac={p['ac_cpu']}/{p['mc_cpu']} "
                  f"cpu={p['cpu_fraction_sum']!r} usage={p['usage_sum']!r}" for p in data["pops"]]
        _emit(args, data, "\n".join(lines))
        return 0
    pop = client.find_instance(args.id)
    data = client.call("GET", f"/instances/{args.id}/stats", base=client.pop_url(pop))
    latest = data["usage"][-1][1] if data["usage"] else None
    _emit(args, data, f"{data['instance_id']} pop={pop} cpu_fraction={data['cpu_fraction']!r} "
                      f"latest_usage={latest!r} samples={len(data['usage'])}")
    return 0


def cmd_traffic(args, client: Client) -> int:
    r = client.call("GET", f"/platform/chains/{args.cid}/traffic?mbits={args.mbits}")
    _emit(args, r, "\n".join(f"{k}: {r[k]!r}" for k in sorted(r)))
    return 0


def cmd_scenario_run(args) -> int:
    source = args.scenario
    try:
        if source in builtin_names():
            scenario = builtin_scenario(source)
        elif os.path.exists(source):
            scenario = load_scenario(source)
        else:
            raise UsageError(f"no scenario file or built-in named {source!r}")
        series = run_scenario(scenario)
    except (DocumentError, ScenarioError, ValueError) as exc:
        raise UsageError(f"bad scenario: {exc}") from None
    if args.out in (None, "-"):
        export_series(series, sys.stdout)
    else:
        rows = export_series(series, args.out)
        print(f"{scenario.name}: {len(series.ticks)} ticks, {rows} rows -> {args.out}", file=sys.stderr)
    if args.events:
        export_events(series, args.events)
    return 0


def cmd_scenario_list(args) -> int:
    print("\n".join(builtin_names()))
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="popnet", description="Multi-PoP network-service emulation")
    p.add_argument("--endpoint", help="URL of any running PoP endpoint "
                   "(default: $POPNET_ENDPOINT or http://127.0.0.1:$POPNET_BASE_PORT)")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")

    up = sub.add_parser("up", help="start the platform and serve the PoP endpoints")
    up.add_argument("--topology", required=True)
    up.add_argument("--e-cpu", type=float, default=None)
    up.add_argument("--base-port", type=int, default=None)
    up.add_argument("--tick", type=float, default=1.0,
                    help="wall-clock seconds per simulated tick (0 disables ticking)")
    up.set_defaults(func=cmd_up, client=False)

    pops = sub.add_parser("pops", help="list PoPs and their ledgers")
    pops.add_argument("--json", action="store_true")
    pops.set_defaults(func=cmd_pops, client=True)

    inst = sub.add_parser("instances", help="list instances")
    inst.add_argument("--pop")
    inst.add_argument("--json", action="store_true")
    inst.set_defaults(func=cmd_instances, client=True)

    alloc = sub.add_parser("alloc", help="allocate one instance")
    alloc.add_argument("--pop", required=True)
    alloc.add_argument("--cu", type=int, required=True)
    alloc.add_argument("--mem", type=int, default=0)
    alloc.add_argument("--storage", type=int, default=0)
    alloc.add_argument("--image", default="")
    alloc.add_argument("--demand", type=float, default=1.0)
    alloc.add_argument("--name")
    alloc.set_defaults(func=cmd_alloc, client=True)

    rel = sub.add_parser("release", help="release an instance")
    rel.add_argument("id")
    rel.set_defaults(func=cmd_release, client=True)

    chain = sub.add_parser("chain", help="manage service chains")
    chain_sub = chain.add_subparsers(dest="chain_verb", required=True, metavar="ACTION")
    cset = chain_sub.add_parser("set")
    cset.add_argument("ids", nargs="+")
    cset.add_argument("--metric", choices=["hops", "delay"], default="hops")
    cset.set_defaults(func=cmd_chain_set, client=True)
    cdel = chain_sub.add_parser("del")
    cdel.add_argument("cid")
    cdel.set_defaults(func=cmd_chain_del, client=True)

    chains = sub.add_parser("chains", help="inspect service chains")
    chains_sub = chains.add_subparsers(dest="chains_verb", required=True, metavar="ACTION")
    dump = chains_sub.add_parser("dump")
    dump.add_argument("--json", action="store_true")
    dump.set_defaults(func=cmd_chains_dump, client=True)

    stats = sub.add_parser("stats", help="platform or instance statistics")
    stats.add_argument("id", nargs="?")
    stats.add_argument("--json", action="store_true")
    stats.set_defaults(func=cmd_stats, client=True)

    traffic = sub.add_parser("traffic", help="send emulated traffic through a chain")
    traffic.add_argument("cid")
    traffic.add_argument("--mbits", type=float, required=True)
    traffic.add_argument("--json", action="store_true")
    traffic.set_defaults(func=cmd_traffic, client=True)

    scen = sub.add_parser("scenario", help="run workload scenarios")
    scen_sub = scen.add_subparsers(dest="scenario_verb", required=True, metavar="ACTION")
    run = scen_sub.add_parser("run")
    run.add_argument("scenario", help="scenario file or built-in name")
    run.add_argument("--out", help="CSV output path (default: stdout)")
    run.add_argument("--events", help="optional CSV of allocate/release events")
    run.set_defaults(func=cmd_scenario_run, client=False)
    lst = scen_sub.add_parser("list")
    lst.set_defaults(func=cmd_scenario_list, client=False)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.client:
            return args.func(args, Client(base_url(args)))
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Rejected as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
