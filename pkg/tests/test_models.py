import math
import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from popnet import registry
from popnet.core import GlobalConfig, PoPLedger, ResourceRequest, ledger_snapshot, new_platform
from popnet.models import (
    ResourceModel,
    allocate,
    baseline_none_usage,
    cpu_limit_model_a,
    cpu_limit_model_b,
    floor_float,
    recompute_pop_limits,
    register_model,
    release,
    shared_pool_limit,
)
from popnet.topology import PoPDecl, ResourceModelRef, build, validate

from conftest import make_doc, make_state
from oracles import round_down
from sequences import KINDS, run_sequence

ONE = ResourceRequest(1)


def ledger(mc, ac, kind="fixed_limit_A"):
    return PoPLedger("pop1", mc, 0, 0, ResourceModelRef(kind), ac_cpu=ac)


# -- pure limit functions ------------------------------------------------------

def test_model_a_single_cu():
    assert cpu_limit_model_a(1, ledger(4, 0), GlobalConfig(0.5, 1, 4)) == 0.125


def test_model_a_rejects_when_full():
    assert cpu_limit_model_a(1, ledger(4, 4), GlobalConfig(0.5, 1, 4)) is None


def test_model_a_full_pop_request():
    assert cpu_limit_model_a(4, ledger(4, 0), GlobalConfig(0.5, 1, 4)) == 0.5


@pytest.mark.parametrize("nc", [0, -1])
def test_limits_reject_non_positive_nc(nc):
    with pytest.raises(ValueError):
        cpu_limit_model_a(nc, ledger(4, 0), GlobalConfig(0.5, 1, 4))
    with pytest.raises(ValueError):
        cpu_limit_model_b(nc, ledger(4, 1), GlobalConfig(0.5, 1, 4))


def test_model_b_over_provisioned_pop():
    # 8 one-CU instances on 4 CUs: factor 4/8
    frac = cpu_limit_model_b(1, ledger(4, 8), GlobalConfig(0.5, 1, 4))
    assert frac == 0.0625
    assert 8 * frac == 0.5


def test_model_b_matches_model_a_without_over_use():
    cfg = GlobalConfig(0.5, 1, 4)
    assert cpu_limit_model_b(1, ledger(4, 3), cfg) == cpu_limit_model_a(1, ledger(4, 2), cfg)


def test_model_b_depends_only_on_local_ledger():
    cfg = GlobalConfig(0.5, 2, 4)
    pop2 = PoPLedger("pop2", 2, 0, 0, ResourceModelRef("over_provisioning_B"), ac_cpu=2)
    assert cpu_limit_model_b(1, pop2, cfg) == 0.125


def test_floor_float_never_rounds_up():
    for q in (Fraction(1, 10), Fraction(1, 3), Fraction(2, 3), Fraction(1, 7), Fraction(5, 1)):
        f = floor_float(q)
        assert Fraction(f) <= q
        assert Fraction(math.nextafter(f, math.inf)) > q


# -- allocate / release ------------------------------------------------------------

def test_model_a_ramp_accepts_four(single_pop_a):
    outcomes = [allocate(single_pop_a, "pop1", ONE)[1] for _ in range(5)]
    assert [o.accepted for o in outcomes] == [True] * 4 + [False]
    assert [o.cpu_fraction for o in outcomes[:4]] == [0.125] * 4
    assert outcomes[4].reason == "cpu_exhausted"
    assert all(o.updated_fractions == {} for o in outcomes)


def test_model_b_ramp_accepts_all(single_pop_b):
    outcomes = [allocate(single_pop_b, "pop1", ONE)[1] for _ in range(5)]
    assert all(o.accepted for o in outcomes)
    for inst in single_pop_b.instances.values():
        assert inst.cpu_fraction == pytest.approx(0.1, rel=1e-9)
    # 5th allocation lowered the four peers
    assert len(outcomes[4].updated_fractions) == 4


def test_memory_exhaustion_rejects_without_side_effects():
    state = make_state([PoPDecl("pop1", 4, mem_capacity_mb=1000, storage_capacity_gb=10,
                                model=ResourceModelRef("over_provisioning_B"))])
    allocate(state, "pop1", ResourceRequest(1, memory_mb=600))
    before = ledger_snapshot(state)
    inst, outcome = allocate(state, "pop1", ResourceRequest(1, memory_mb=500))
    assert inst is None
    assert (outcome.accepted, outcome.reason, outcome.cpu_fraction) == (False, "memory_exhausted", 0)
    assert ledger_snapshot(state) == before


def test_storage_exhaustion():
    state = make_state([PoPDecl("pop1", 4, mem_capacity_mb=1000, storage_capacity_gb=10,
                                model=ResourceModelRef("none"))])
    _, outcome = allocate(state, "pop1", ResourceRequest(1, storage_gb=11))
    assert outcome.reason == "storage_exhausted"


def test_unknown_pop_is_a_rejection(single_pop_a):
    inst, outcome = allocate(single_pop_a, "elsewhere", ONE)
    assert inst is None and outcome.reason == "unknown_pop"


def test_demand_out_of_range(single_pop_a):
    with pytest.raises(ValueError):
        allocate(single_pop_a, "pop1", ONE, demand=1.5)


def test_model_b_release_raises_peers(single_pop_b):
    ids = [allocate(single_pop_b, "pop1", ONE)[0].id for _ in range(8)]
    assert all(single_pop_b.instances[i].cpu_fraction == 0.0625 for i in ids)
    outcome = release(single_pop_b, ids[0])
    expected = round_down(Fraction(1, 2) / 4 * Fraction(4, 7))
    assert set(outcome.updated_fractions) == set(ids[1:])
    for i in ids[1:]:
        assert single_pop_b.instances[i].cpu_fraction == expected
        assert single_pop_b.instances[i].cpu_fraction == pytest.approx(0.0714286, rel=1e-6)


def test_model_a_release_leaves_peers(single_pop_a):
    ids = [allocate(single_pop_a, "pop1", ONE)[0].id for _ in range(3)]
    outcome = release(single_pop_a, ids[1])
    assert outcome.updated_fractions == {}
    assert [single_pop_a.instances[i].cpu_fraction for i in (ids[0], ids[2])] == [0.125, 0.125]


def test_release_last_instance_empties_ledger(single_pop_b):
    inst, _ = allocate(single_pop_b, "pop1", ONE)
    outcome = release(single_pop_b, inst.id)
    assert single_pop_b.ledgers["pop1"].ac_cpu == 0
    assert outcome.updated_fractions == {}


# -- recompute -----------------------------------------------------------------------

def test_recompute_proportional_to_cus(single_pop_b):
    ids = [allocate(single_pop_b, "pop1", ResourceRequest(n))[0].id for n in (1, 1, 2)]
    limits = recompute_pop_limits(single_pop_b, "pop1")
    assert [limits[i] for i in ids] == [0.125, 0.125, 0.25]


def test_recompute_over_provisioned_large_requests(single_pop_b):
    ids = [allocate(single_pop_b, "pop1", ResourceRequest(4))[0].id for _ in range(2)]
    assert recompute_pop_limits(single_pop_b, "pop1") == {ids[0]: 0.25, ids[1]: 0.25}


def test_recompute_empty_pop(single_pop_b):
    assert recompute_pop_limits(single_pop_b, "pop1") == {}


def test_recompute_only_touches_own_pop(two_pops_b):
    a = allocate(two_pops_b, "pop1", ONE)[0].id
    b = allocate(two_pops_b, "pop2", ONE)[0].id
    assert set(recompute_pop_limits(two_pops_b, "pop1")) == {a}
    assert set(recompute_pop_limits(two_pops_b, "pop2")) == {b}


# -- baselines ---------------------------------------------------------------------------

def _state(kind, pops=(("pop1", 2), ("pop2", 2))):
    return make_state([(n, mc, kind) for n, mc in pops],
                      links=[("pop1", "pop2")] if len(pops) > 1 else ())


def test_none_equal_share():
    state = _state("none", (("pop1", 4),))
    for _ in range(4):
        allocate(state, "pop1", ONE)
    assert set(baseline_none_usage(state).values()) == {0.25}


def test_none_single_instance_gets_whole_cpu():
    state = _state("none", (("pop1", 4),))
    allocate(state, "pop1", ONE)
    assert list(baseline_none_usage(state).values()) == [1.0]


def test_none_demand_bound():
    state = _state("none", (("pop1", 4),))
    light = allocate(state, "pop1", ONE, demand=0.1)[0].id
    allocate(state, "pop1", ONE)
    assert baseline_none_usage(state)[light] == 0.1


def test_none_is_never_rejected():
    state = _state("none", (("pop1", 1),))
    assert all(allocate(state, "pop1", ResourceRequest(3))[1].accepted for _ in range(10))


def test_shared_pool_at_boundary():
    state = _state("shared_pool")
    for pop in ("pop1", "pop1", "pop2", "pop2"):
        allocate(state, pop, ONE)
    assert {c.cpu_fraction for c in state.instances.values()} == {0.125}


def test_shared_pool_over_use_hits_other_pop():
    state = _state("shared_pool")
    for _ in range(2):
        allocate(state, "pop2", ONE)
    for _ in range(6):
        allocate(state, "pop1", ONE)
    assert {c.cpu_fraction for c in state.instances.values()} == {0.0625}
    assert shared_pool_limit(1, state) == 0.0625


def test_shared_pool_empty():
    state = _state("shared_pool")
    assert shared_pool_limit(1, state) == 0.125


# -- registry ------------------------------------------------------------------------------

def test_builtin_models_registered():
    for kind in KINDS:
        assert kind in registry.MODELS
    doc = make_doc([("pop1", 4, "fixed_limit_A")])
    assert validate(doc) == []


def test_duplicate_registration_rejected():
    with pytest.raises(ValueError):
        register_model("fixed_limit_A", ResourceModel)


def test_custom_model_round_trip():
    seen = {}

    class Priced(ResourceModel):
        kind = "priced"
        accepted_params = ("rate",)

        def __init__(self, params, config):
            super().__init__(params, config)
            seen["params"] = dict(params)
            seen["config"] = config

        def limits(self, state, pop):
            return {c.id: 0.01 * c.request.cpu_cu for c in state.instances_in(pop)}

    register_model("priced", Priced)
    try:
        doc = make_doc([PoPDecl("pop1", 4, model=ResourceModelRef("priced", {"rate": 2.0}))])
        assert validate(doc) == []
        state = new_platform(build(doc))
        assert seen["params"] == {"rate": 2.0}
        assert seen["config"].total_mc == 4
        inst, outcome = allocate(state, "pop1", ResourceRequest(3))
        assert outcome.cpu_fraction == pytest.approx(0.03)
    finally:
        registry.MODELS.unregister("priced")


def test_unknown_model_params_rejected():
    with pytest.raises(ValueError):
        new_platform(build(make_doc([PoPDecl("p", 1, model=ResourceModelRef("fixed_limit_A", {"x": 1}))])))


# -- properties --------------------------------------------------------------------------------

pop_specs = st.lists(st.tuples(st.integers(1, 6), st.sampled_from(KINDS)), min_size=1, max_size=4)
ops = st.lists(st.one_of(
    st.tuples(st.just("alloc"), st.integers(0, 3), st.integers(1, 4)),
    st.tuples(st.just("release"), st.integers(0, 63)),
), max_size=20)
e_cpus = st.sampled_from([0.1, 0.25, 0.3, 0.5, 0.6, 0.75, 1.0])


@given(pop_specs, e_cpus, ops)
def test_budget_and_oracle_agreement(pops, e_cpu, seq):
    # budget cap, ledger consistency, rejection atomicity and exact
    # agreement with the from-scratch oracle after every step
    run_sequence(pops, e_cpu, seq)


@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from(["fixed_limit_A", "over_provisioning_B"]),
       st.lists(st.tuples(st.booleans(), st.integers(1, 3), st.integers(0, 30)), max_size=25))
def test_cross_pop_isolation(mc1, mc2, kind, seq):
    state = make_state([("pop1", mc1, kind), ("pop2", mc2, kind)], links=[("pop1", "pop2")])
    for _ in range(3):
        allocate(state, "pop2", ONE)
    for is_alloc, nc, idx in seq:
        pop2 = {i: c.cpu_fraction for i, c in state.instances.items() if c.pop == "pop2"}
        if is_alloc:
            allocate(state, "pop1", ResourceRequest(nc))
        else:
            pop1 = [c.id for c in state.instances.values() if c.pop == "pop1"]
            if pop1:
                release(state, pop1[idx % len(pop1)])
        after = {i: c.cpu_fraction for i, c in state.instances.items() if c.pop == "pop2"}
        assert after == pop2


@given(st.integers(1, 8), st.lists(st.integers(1, 4), min_size=1, max_size=10))
def test_model_b_equals_model_a_until_over_used(mc, requests):
    a = make_state([("pop1", mc, "fixed_limit_A")])
    b = make_state([("pop1", mc, "over_provisioning_B")])
    for nc in requests:
        ia, oa = allocate(a, "pop1", ResourceRequest(nc))
        if not oa.accepted:
            break
        ib, ob = allocate(b, "pop1", ResourceRequest(nc))
        assert b.ledgers["pop1"].ac_cpu <= mc
        assert ob.cpu_fraction == oa.cpu_fraction


@given(st.integers(1, 6), st.lists(st.integers(1, 4), min_size=1, max_size=12), st.data())
def test_model_b_monotonicity(mc, requests, data):
    state = make_state([("pop1", mc, "over_provisioning_B")])
    for nc in requests:
        before = {i: c.cpu_fraction for i, c in state.instances.items()}
        allocate(state, "pop1", ResourceRequest(nc))
        assert all(state.instances[i].cpu_fraction <= f for i, f in before.items())
    while state.instances:
        iid = data.draw(st.sampled_from(sorted(state.instances)))
        before = {i: c.cpu_fraction for i, c in state.instances.items() if i != iid}
        release(state, iid)
        assert all(state.instances[i].cpu_fraction >= f for i, f in before.items())


@given(st.lists(st.integers(1, 5), min_size=1, max_size=3),
       st.lists(st.tuples(st.integers(0, 2), st.integers(1, 4)), max_size=10),
       st.integers(2, 5), st.sampled_from(["fixed_limit_A", "over_provisioning_B"]))
def test_cu_scale_invariance(mcs, requests, k, kind):
    names = [f"pop{i}" for i in range(len(mcs))]
    links = list(zip(names, names[1:]))
    base = make_state([(n, mc, kind) for n, mc in zip(names, mcs)], links=links)
    scaled = make_state([(n, mc * k, kind) for n, mc in zip(names, mcs)], links=links)
    for idx, nc in requests:
        pop = names[idx % len(names)]
        i1, o1 = allocate(base, pop, ResourceRequest(nc))
        i2, o2 = allocate(scaled, pop, ResourceRequest(nc * k))
        assert o1.accepted == o2.accepted
    assert [c.cpu_fraction for c in base.instances.values()] == \
           [c.cpu_fraction for c in scaled.instances.values()]


@given(st.integers(1, 8), st.lists(st.integers(1, 4), min_size=2, max_size=10),
       st.sampled_from(["fixed_limit_A", "over_provisioning_B"]))
def test_proportionality_within_pop(mc, requests, kind):
    state = make_state([("pop1", mc, kind)])
    for nc in requests:
        allocate(state, "pop1", ResourceRequest(nc))
    insts = list(state.instances.values())
    for x in insts:
        for y in insts:
            # exact ratios hold on the rational values; the stored floats
            # are those values rounded down, so compare within one ulp
            assert x.cpu_fraction * y.request.cpu_cu == pytest.approx(
                y.cpu_fraction * x.request.cpu_cu, rel=1e-12)


def test_four_cus_get_twice_two_cus(single_pop_a):
    big = allocate(single_pop_a, "pop1", ResourceRequest(2))[0]
    small = allocate(single_pop_a, "pop1", ResourceRequest(1))[0]
    assert big.cpu_fraction == 2 * small.cpu_fraction


def test_random_sequences_smoke():
    rng = random.Random(7)
    from sequences import random_sequence
    for _ in range(200):
        run_sequence(*random_sequence(rng))
