import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from popnet.core import new_platform
from popnet.topology import EndpointDecl, LinkDecl, PoPDecl, ResourceModelRef, TopologyDoc, build

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", parent=settings.get_profile("default"), max_examples=400)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_doc(pops, links=(), switches=(), e_cpu=0.5, **defaults):
    """``pops`` is a list of (name, mc, model kind) or PoPDecl."""
    decls = []
    for p in pops:
        if isinstance(p, PoPDecl):
            decls.append(p)
        else:
            name, mc, kind = p
            decls.append(PoPDecl(name, mc, mem_capacity_mb=4096, storage_capacity_gb=100,
                                 model=ResourceModelRef(kind)))
    link_decls = tuple(l if isinstance(l, LinkDecl) else LinkDecl(*l) for l in links)
    doc = TopologyDoc(pops=tuple(decls), switches=tuple(switches), links=link_decls, e_cpu=e_cpu)
    return doc


def make_state(pops, links=(), switches=(), e_cpu=0.5):
    return new_platform(build(make_doc(pops, links, switches, e_cpu)))


@pytest.fixture
def single_pop_a():
    return make_state([("pop1", 4, "fixed_limit_A")])


@pytest.fixture
def single_pop_b():
    return make_state([("pop1", 4, "over_provisioning_B")])


@pytest.fixture
def two_pops_b():
    return make_state([("pop1", 2, "over_provisioning_B"), ("pop2", 2, "over_provisioning_B")],
                      links=[("pop1", "s1"), ("pop2", "s1")], switches=["s1"])


def served_doc(kinds=("fixed_limit_A", "over_provisioning_B"), mc=4, e_cpu=0.5):
    """Topology whose PoPs all declare an endpoint on an OS-chosen port."""
    pops = tuple(
        PoPDecl(f"pop{i}", mc, mem_capacity_mb=2048, storage_capacity_gb=50,
                model=ResourceModelRef(kind), endpoint=EndpointDecl(port=0))
        for i, kind in enumerate(kinds, start=1)
    )
    links = tuple(LinkDecl(p.name, "s1", delay_ms=5.0) for p in pops)
    return TopologyDoc(pops=pops, switches=("s1",), links=links, e_cpu=e_cpu)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(results):
        terminalreporter.write_line(f"{results[label]}  {label}")
