import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bendml.cases import random_instance
from bendml.instance import ancestors, build_tree, from_dict, replace_tree
from bendml.linsolve import solve_lp
from bendml.subproblem import (BASE_MVA, CUT_CHECK_TOL, InvestmentVector, SubproblemSet, build_operation_lp,
                               effective_capacity, investment_layout, operation_weight, solve_subproblem)


def _bus(i, d):
    return {"id": i, "base_demand_peak": d}


def _gen(i, bus, cap, cost):
    return {"id": i, "bus": bus, "capacity": cap, "marginal_cost": cost, "is_renewable": False,
            "profile_key": None}


def _line(i, a, b, cap, sus=10.0, reinf=False, extra=0.0):
    return {"id": i, "from_bus": a, "to_bus": b, "susceptance": sus, "capacity0": cap, "length": 10.0,
            "reinforceable": reinf, "max_added_capacity": extra}


def make(buses, lines, gens, steps=1, profile=None, storage=()):
    return from_dict({
        "schema": 1, "name": "fixture", "buses": buses, "lines": lines, "generators": gens,
        "storage_candidates": list(storage),
        "costs": {"line_fixed_annual": 1.0, "line_variable_annual": 1.0, "bes_annual": 1.0, "voll": 1000.0,
                  "line_lead_stages": 1, "bes_lead_stages": 0},
        "tree": [{"id": 0, "stage": 0, "parent": None, "probability": 1.0, "demand_scale": 1.0,
                  "stage_years": 1.0, "generator_scale": 1.0}],
        "blocks": [{"id": 0, "hours_per_year": float(steps), "steps": steps, "step_hours": 1.0,
                    "demand_profile": profile or [1.0] * steps, "renewable_profiles": {}}],
    })


def objective(inst, m=0, b=0):
    op = build_operation_lp(inst, m, b)
    sol = solve_lp(op.lp)
    assert sol.optimal
    return sol, op


# ---------------------------------------------------------------------------
# effective capacity

def test_no_investment_baseline(tiny):
    lay = investment_layout(tiny)
    for m in range(len(tiny.tree_nodes)):
        cap = effective_capacity(tiny, InvestmentVector.zeros(lay), m)
        np.testing.assert_array_equal(cap.line_capacity, [ln.capacity0 for ln in tiny.lines])
        np.testing.assert_array_equal(cap.storage_power, 0.0)
        np.testing.assert_array_equal(cap.storage_energy, 0.0)


def test_line_lead_time(tiny):
    lay = investment_layout(tiny)
    lid = lay.line_ids[0]
    x = InvestmentVector.zeros(lay)
    x.line_build[0, 0] = 1.0
    x.line_added[0, 0] = 30.0
    base = tiny.lines[lid].capacity0
    assert effective_capacity(tiny, x, 0).line_capacity[lid] == base
    for node in tiny.tree_nodes:
        if node.stage == 1:
            assert effective_capacity(tiny, x, node.id).line_capacity[lid] == pytest.approx(base + 30.0)


def test_storage_same_stage(tiny):
    lay = investment_layout(tiny)
    x = InvestmentVector.zeros(lay)
    x.bes_build[1, 0] = 1.0
    x.bes_power[1, 0] = 20.0
    cap = effective_capacity(tiny, x, 1)
    assert cap.storage_power[0] == 20.0
    assert cap.storage_energy[0] == 20.0 * tiny.storage_candidates[0].duration_hours
    # siblings do not see it
    assert effective_capacity(tiny, x, 2).storage_power[0] == 0.0
    assert effective_capacity(tiny, x, 0).storage_power[0] == 0.0


def test_flat_round_trip(tiny):
    lay = investment_layout(tiny)
    flat = np.arange(lay.size, dtype=float)
    np.testing.assert_array_equal(InvestmentVector.from_flat(lay, flat).to_flat(), flat)


# ---------------------------------------------------------------------------
# operation LP

def test_single_bus_dispatch():
    inst = make([_bus(0, 40.0)], [], [_gen(0, 0, 100.0, 20.0)], steps=2, profile=[1.0, 0.5])
    sol, op = objective(inst)
    energy = 40.0 * 1.5
    assert sol.objective == pytest.approx(operation_weight(inst, 0, 0) * 20.0 * energy)
    assert sol.x[op.curtail_vars].sum() == pytest.approx(0.0, abs=1e-9)


def test_zero_generation_curtails_everything():
    inst = make([_bus(0, 40.0)], [], [_gen(0, 0, 0.0, 20.0)], steps=2, profile=[1.0, 0.5])
    sol, op = objective(inst)
    assert sol.objective == pytest.approx(operation_weight(inst, 0, 0) * 1000.0 * 60.0)
    np.testing.assert_allclose(sol.x[op.curtail_vars], [40.0, 20.0])


def _grid_oracle(inst, step=0.5):
    """Cheapest dispatch of the two generators by enumeration; flows from the DC equations."""
    nb = inst.n_buses
    B = np.zeros((nb, nb))
    for ln in inst.lines:
        k = BASE_MVA * ln.susceptance
        a, c = ln.from_bus, ln.to_bus
        B[a, a] += k
        B[c, c] += k
        B[a, c] -= k
        B[c, a] -= k
    demand = inst.demand(0, 0)[:, 0]
    load = int(np.argmax(demand))
    g0, g1 = np.meshgrid(np.arange(0.0, inst.generators[0].capacity + 1e-9, step),
                         np.arange(0.0, inst.generators[1].capacity + 1e-9, step))
    g0, g1 = g0.ravel(), g1.ravel()
    shed = demand.sum() - g0 - g1
    inj = np.tile(-demand, (g0.size, 1))
    inj[:, inst.generators[0].bus] += g0
    inj[:, inst.generators[1].bus] += g1
    inj[:, load] += shed
    theta = np.zeros_like(inj)
    theta[:, 1:] = np.linalg.solve(B[1:, 1:], inj[:, 1:].T).T
    ok = shed >= -1e-9
    for ln in inst.lines:
        flow = BASE_MVA * ln.susceptance * (theta[:, ln.from_bus] - theta[:, ln.to_bus])
        ok &= np.abs(flow) <= ln.capacity0 + 1e-9
    cost = inst.generators[0].marginal_cost * g0 + inst.generators[1].marginal_cost * g1 + 1000.0 * shed
    return cost[ok].min() * operation_weight(inst, 0, 0)


@pytest.mark.parametrize("cap01", [60.0, 45.0, 200.0])
def test_triangle_against_grid_search(cap01):
    inst = make([_bus(0, 0.0), _bus(1, 120.0), _bus(2, 0.0)],
                [_line(0, 0, 1, cap01), _line(1, 1, 2, 200.0), _line(2, 0, 2, 200.0)],
                [_gen(0, 0, 200.0, 10.0), _gen(1, 2, 100.0, 30.0)])
    sol, _ = objective(inst)
    assert sol.objective == pytest.approx(_grid_oracle(inst), rel=1e-9)


def test_storage_shifts_energy():
    # cheap supply limited in the second step, storage at the load bus can shift it
    stor = [{"id": 0, "bus": 1, "duration_hours": 2.0, "efficiency": 0.9, "max_power": 50.0}]
    inst = make([_bus(0, 0.0), _bus(1, 60.0)], [_line(0, 0, 1, 60.0, reinf=True, extra=10.0)],
                [_gen(0, 0, 100.0, 10.0)], steps=2, profile=[0.5, 1.0], storage=stor)
    lay = investment_layout(inst)
    x = InvestmentVector.zeros(lay)
    without, _ = objective(inst)
    x.bes_build[0, 0] = 1.0
    x.bes_power[0, 0] = 50.0
    op = build_operation_lp(inst, 0, 0).at_investment(x.to_flat())
    assert solve_lp(op.lp).objective <= without.objective + 1e-9


# ---------------------------------------------------------------------------
# cuts

def _random_x(inst, rng):
    """Random investment respecting build-once along every path."""
    lay = investment_layout(inst)
    x = InvestmentVector.zeros(lay)
    lines = [inst.lines[i] for i in lay.line_ids]
    for node in inst.tree_nodes:
        m, above = node.id, ancestors(inst, node.id)[:-1]
        for i, ln in enumerate(lines):
            if rng.random() < 0.4 and not x.line_build[above, i].any():
                x.line_build[m, i] = 1.0
                x.line_added[m, i] = rng.uniform(0, ln.max_added_capacity)
        for j, s in enumerate(inst.storage_candidates):
            if rng.random() < 0.4 and not x.bes_build[above, j].any():
                x.bes_build[m, j] = 1.0
                x.bes_power[m, j] = rng.uniform(0, s.max_power)
    return x.to_flat()


def test_cut_without_parametric_rows_is_constant():
    inst = make([_bus(0, 40.0)], [], [_gen(0, 0, 100.0, 20.0)], steps=2)
    op = build_operation_lp(inst, 0, 0)
    cut = solve_subproblem(op, 0, 0, 1, np.zeros(0))
    assert cut.coef_index.size == 0
    assert cut.constant == pytest.approx(cut.sp_objective)


def test_cut_reproduces_objective_at_generating_point(tiny, rng):
    sps = SubproblemSet(tiny)
    for _ in range(5):
        x = _random_x(tiny, rng)
        for cut in sps.solve_all(x, 1):
            assert abs(cut.value(x) - cut.sp_objective) <= CUT_CHECK_TOL * (1 + abs(cut.sp_objective))
            assert cut.curtailment >= 0


@pytest.mark.parametrize("seed", range(20))
def test_cut_validity_against_resolve(seed):
    inst = random_instance(seed)
    rng = np.random.default_rng(seed)
    sps = SubproblemSet(inst)
    x0 = _random_x(inst, rng)
    x1 = _random_x(inst, rng)
    for m, b in list(sps.templates)[:4]:
        cut = sps.solve(m, b, x0, 1)
        true = sps.objective(m, b, x1)
        assert cut.value(x1) <= true + 1e-5 * (1 + abs(true))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_monotone_capacity(seed):
    inst = random_instance(seed % 6)
    rng = np.random.default_rng(seed)
    sps = SubproblemSet(inst)
    lo = _random_x(inst, rng)
    # more of every asset already built, never a new build flag
    hi = lo.copy()
    cont = sps.layout.continuous_mask()
    hi[cont] = np.where(lo[cont] > 0, lo[cont] + rng.uniform(0, 5.0, cont.sum()), 0.0)
    for m, b in list(sps.templates)[:3]:
        assert sps.objective(m, b, hi) <= sps.objective(m, b, lo) + 1e-6 * (1 + abs(sps.objective(m, b, lo)))


def test_complete_recourse_at_zero(small_instances):
    for inst in small_instances:
        sps = SubproblemSet(inst)
        cuts = sps.solve_all(np.zeros(sps.layout.size), 1)
        assert len(cuts) == len(inst.tree_nodes) * len(inst.blocks)


def test_parallel_matches_serial(tiny, rng):
    sps = SubproblemSet(tiny)
    x = _random_x(tiny, rng)
    a = sps.solve_all(x, 1)
    b = sps.solve_all(x, 1, parallel=True)
    for u, v in zip(a, b):
        assert u.origin == v.origin
        assert u.sp_objective == v.sp_objective


def test_lead_time_visible_in_cut(tiny):
    # root cuts may not depend on root line additions
    chain = replace_tree(tiny, build_tree([1, 1]))
    sps = SubproblemSet(chain)
    lay = sps.layout
    cut = sps.solve(0, 0, np.zeros(lay.size), 1)
    assert lay.line_added(0, 0) not in set(cut.coef_index.tolist())
