"""Operation subproblems at fixed investments and the optimality cuts they yield.

Each (node m, block b) pair owns one LP: DC power flow with storage and
penalized load curtailment over the T steps of the block.  Rows whose
right-hand side depends on investments are tagged with the *capacity item*
they read (a reinforceable line's rating, a candidate line's built status,
a storage unit's power) so that duals can be folded back onto the master
variables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .instance import Instance, ancestors
from .linsolve import EQ, LE, LinearProgram, LpBuilder, SolverError, dual_objective, solve_lp

BASE_MVA = 100.0
ANGLE_LIMIT = math.pi
CUT_CHECK_TOL = 1e-5


# ---------------------------------------------------------------------------
# investment layout

@dataclass(frozen=True)
class InvestmentLayout:
    """Flat indexing of the investment vector, node-major.

    Per node the order is: line build flags, line added capacities, storage
    build flags, storage powers.
    """

    n_nodes: int
    n_lines: int  # reinforceable lines only
    n_storage: int
    line_ids: tuple[int, ...]

    @property
    def per_node(self) -> int:
        return 2 * self.n_lines + 2 * self.n_storage

    @property
    def size(self) -> int:
        return self.n_nodes * self.per_node

    def line_build(self, m: int, i: int) -> int:
        return m * self.per_node + i

    def line_added(self, m: int, i: int) -> int:
        return m * self.per_node + self.n_lines + i

    def bes_build(self, m: int, j: int) -> int:
        return m * self.per_node + 2 * self.n_lines + j

    def bes_power(self, m: int, j: int) -> int:
        return m * self.per_node + 2 * self.n_lines + self.n_storage + j

    def binary_indices(self) -> np.ndarray:
        idx = [self.line_build(m, i) for m in range(self.n_nodes) for i in range(self.n_lines)]
        idx += [self.bes_build(m, j) for m in range(self.n_nodes) for j in range(self.n_storage)]
        return np.array(sorted(idx), dtype=int)

    def continuous_mask(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        mask[self.binary_indices()] = False
        return mask


def investment_layout(instance: Instance) -> InvestmentLayout:
    return InvestmentLayout(len(instance.tree_nodes), len(instance.reinforceable_lines),
                            len(instance.storage_candidates), tuple(instance.reinforceable_lines))


@dataclass
class InvestmentVector:
    """Investments per tree node; arrays are indexed [node, asset]."""

    line_build: np.ndarray
    line_added: np.ndarray
    bes_build: np.ndarray
    bes_power: np.ndarray

    @classmethod
    def zeros(cls, layout: InvestmentLayout) -> "InvestmentVector":
        return cls(np.zeros((layout.n_nodes, layout.n_lines)), np.zeros((layout.n_nodes, layout.n_lines)),
                   np.zeros((layout.n_nodes, layout.n_storage)), np.zeros((layout.n_nodes, layout.n_storage)))

    @classmethod
    def from_flat(cls, layout: InvestmentLayout, x) -> "InvestmentVector":
        x = np.asarray(x, dtype=float)[:layout.size].reshape(layout.n_nodes, layout.per_node)
        nl, ns = layout.n_lines, layout.n_storage
        return cls(x[:, :nl].copy(), x[:, nl:2 * nl].copy(), x[:, 2 * nl:2 * nl + ns].copy(),
                   x[:, 2 * nl + ns:].copy())

    def to_flat(self) -> np.ndarray:
        return np.hstack([self.line_build, self.line_added, self.bes_build, self.bes_power]).ravel()


# ---------------------------------------------------------------------------
# effective capacity

@dataclass
class CapacityMap:
    """Capacity items at one node as an affine function of the flat investments."""

    kinds: list[tuple[str, int]]  # ("line_cap", line id) | ("line_built", line id) | ("bes_power", j)
    const: np.ndarray
    D: sp.csr_matrix

    def evaluate(self, x) -> np.ndarray:
        return self.const + self.D @ np.asarray(x, dtype=float)


def _eligible(instance: Instance, m: int, lead: int) -> list[int]:
    stage = instance.tree_nodes[m].stage
    return [a for a in ancestors(instance, m) if instance.tree_nodes[a].stage + lead <= stage]


def capacity_map(instance: Instance, m: int, layout: InvestmentLayout | None = None) -> CapacityMap:
    layout = layout or investment_layout(instance)
    line_anc = _eligible(instance, m, instance.cost_data.line_lead_stages)
    bes_anc = _eligible(instance, m, instance.cost_data.bes_lead_stages)
    kinds, const, rows, cols, vals = [], [], [], [], []
    for i, lid in enumerate(layout.line_ids):
        r = len(kinds)
        kinds.append(("line_cap", lid))
        const.append(instance.lines[lid].capacity0)
        for a in line_anc:
            rows.append(r), cols.append(layout.line_added(a, i)), vals.append(1.0)
    for i, lid in enumerate(layout.line_ids):
        if instance.lines[lid].is_candidate:
            r = len(kinds)
            kinds.append(("line_built", lid))
            const.append(0.0)
            for a in line_anc:
                rows.append(r), cols.append(layout.line_build(a, i)), vals.append(1.0)
    for j in range(layout.n_storage):
        r = len(kinds)
        kinds.append(("bes_power", j))
        const.append(0.0)
        for a in bes_anc:
            rows.append(r), cols.append(layout.bes_power(a, j)), vals.append(1.0)
    D = sp.csr_matrix((vals, (rows, cols)), shape=(len(kinds), layout.size))
    return CapacityMap(kinds, np.array(const, dtype=float), D)


@dataclass
class EffectiveCapacity:
    line_capacity: np.ndarray  # MW, every line
    line_built: np.ndarray  # 1 where the corridor is in service
    storage_power: np.ndarray  # MW per storage candidate
    storage_energy: np.ndarray  # MWh per storage candidate

    def items(self, cmap: CapacityMap) -> np.ndarray:
        out = np.empty(len(cmap.kinds))
        for r, (kind, idx) in enumerate(cmap.kinds):
            if kind == "line_cap":
                out[r] = self.line_capacity[idx]
            elif kind == "line_built":
                out[r] = self.line_built[idx]
            else:
                out[r] = self.storage_power[idx]
        return out


def effective_capacity(instance: Instance, x, m: int) -> EffectiveCapacity:
    """Capacities seen by operation at node ``m`` given investments ``x``.

    ``x`` is an :class:`InvestmentVector` or its flat form.  Line additions
    count once their commissioning lead has elapsed; storage obeys its own
    lead (zero means usable in the stage it is built).
    """
    layout = investment_layout(instance)
    flat = x.to_flat() if isinstance(x, InvestmentVector) else np.asarray(x, dtype=float)
    cmap = capacity_map(instance, m, layout)
    vals = cmap.evaluate(flat)
    cap = np.array([ln.capacity0 for ln in instance.lines])
    built = np.array([0.0 if ln.is_candidate else 1.0 for ln in instance.lines])
    power = np.zeros(len(instance.storage_candidates))
    for r, (kind, idx) in enumerate(cmap.kinds):
        if kind == "line_cap":
            cap[idx] = vals[r]
        elif kind == "line_built":
            built[idx] = vals[r]
        else:
            power[idx] = vals[r]
    energy = power * np.array([s.duration_hours for s in instance.storage_candidates])
    return EffectiveCapacity(cap, built, power, energy)


# ---------------------------------------------------------------------------
# operation LP

@dataclass
class OperationLP:
    lp: LinearProgram
    m: int
    b: int
    cmap: CapacityMap
    param_rows: np.ndarray
    param_item: np.ndarray
    param_scale: np.ndarray
    param_const: np.ndarray
    curtail_vars: np.ndarray
    step_hours: float
    weight: float
    var_index: dict = field(default_factory=dict)

    def rhs_for_items(self, items: np.ndarray) -> np.ndarray:
        rhs = self.lp.rhs.copy()
        rhs[self.param_rows] = self.param_const + self.param_scale * items[self.param_item]
        return rhs

    def at_items(self, items: np.ndarray) -> "OperationLP":
        new = OperationLP(**{**self.__dict__})
        new.lp = self.lp.with_rhs(self.rhs_for_items(items))
        return new

    def at_investment(self, x_flat) -> "OperationLP":
        return self.at_items(self.cmap.evaluate(x_flat))


def operation_weight(instance: Instance, m: int, b: int) -> float:
    """Objective multiplier turning per-step cost rates into stage totals."""
    blk = instance.blocks[b]
    return instance.tree_nodes[m].stage_years * blk.hours_per_year / blk.steps


def build_operation_lp(instance: Instance, m: int, b: int, cap: EffectiveCapacity | None = None
                       ) -> OperationLP:
    """Operation LP of node ``m`` and block ``b`` at capacities ``cap``.

    With ``cap=None`` the LP is built at zero investment.
    """
    layout = investment_layout(instance)
    cmap = capacity_map(instance, m, layout)
    node = instance.tree_nodes[m]
    blk = instance.blocks[b]
    T = blk.steps
    dt = blk.step_hours
    w = operation_weight(instance, m, b)
    demand = instance.demand(m, b)
    voll = instance.cost_data.voll
    item_of = {k: r for r, k in enumerate(cmap.kinds)}

    bld = LpBuilder()
    prow, pitem, pscale, pconst = [], [], [], []

    def param(coefs, rhs_const, item, scale, name):
        r = bld.add_row(coefs, LE, rhs_const, name)
        prow.append(r), pitem.append(item), pscale.append(scale), pconst.append(rhs_const)
        return r

    gens = instance.generators
    lines = instance.lines
    stor = instance.storage_candidates
    nb = instance.n_buses
    g_idx = np.zeros((len(gens), T), dtype=int)
    th_idx = np.zeros((nb, T), dtype=int)
    f_idx = np.zeros((len(lines), T), dtype=int)
    ch_idx = np.zeros((len(stor), T), dtype=int)
    dis_idx = np.zeros((len(stor), T), dtype=int)
    e_idx = np.zeros((len(stor), T), dtype=int)
    y_idx = -np.ones((nb, T), dtype=int)
    curtail = []

    for t in range(T):
        for gi, g in enumerate(gens):
            ub = g.capacity * node.generator_scale * float(instance.capacity_factor(g, b)[t])
            g_idx[gi, t] = bld.add_var(0.0, ub, w * g.marginal_cost, f"g[{gi},{t}]")
        for n in range(nb):
            lim = 0.0 if n == 0 else ANGLE_LIMIT
            th_idx[n, t] = bld.add_var(-lim, lim, 0.0, f"theta[{n},{t}]")
        for ln in lines:
            if ln.reinforceable:
                lo, hi = -np.inf, np.inf
            else:
                lo, hi = -ln.capacity0, ln.capacity0
            f_idx[ln.id, t] = bld.add_var(lo, hi, 0.0, f"f[{ln.id},{t}]")
        for j in range(len(stor)):
            ch_idx[j, t] = bld.add_var(0.0, np.inf, 0.0, f"pch[{j},{t}]")
            dis_idx[j, t] = bld.add_var(0.0, np.inf, 0.0, f"pdis[{j},{t}]")
            e_idx[j, t] = bld.add_var(0.0, np.inf, 0.0, f"e[{j},{t}]")
        for n in range(nb):
            if demand[n, t] > 0:
                y_idx[n, t] = bld.add_var(0.0, demand[n, t], w * voll, f"curt[{n},{t}]")
                curtail.append(y_idx[n, t])

    for t in range(T):
        for n in range(nb):
            coefs: dict[int, float] = {}
            for gi, g in enumerate(gens):
                if g.bus == n:
                    coefs[g_idx[gi, t]] = 1.0
            for ln in lines:
                if ln.to_bus == n:
                    coefs[f_idx[ln.id, t]] = coefs.get(f_idx[ln.id, t], 0.0) + 1.0
                if ln.from_bus == n:
                    coefs[f_idx[ln.id, t]] = coefs.get(f_idx[ln.id, t], 0.0) - 1.0
            for j, s in enumerate(stor):
                if s.bus == n:
                    coefs[dis_idx[j, t]] = 1.0
                    coefs[ch_idx[j, t]] = -1.0
            if y_idx[n, t] >= 0:
                coefs[y_idx[n, t]] = 1.0
            bld.add_row(coefs, EQ, demand[n, t], f"balance[{n},{t}]")
        for ln in lines:
            k = BASE_MVA * ln.susceptance
            f, a, c = f_idx[ln.id, t], th_idx[ln.from_bus, t], th_idx[ln.to_bus, t]
            if ln.is_candidate:
                big_m = k * 2.0 * ANGLE_LIMIT
                item = item_of[("line_built", ln.id)]
                param({f: 1.0, a: -k, c: k}, big_m, item, -big_m, f"kvl+[{ln.id},{t}]")
                param({f: -1.0, a: k, c: -k}, big_m, item, -big_m, f"kvl-[{ln.id},{t}]")
            else:
                bld.add_row({f: 1.0, a: -k, c: k}, EQ, 0.0, f"kvl[{ln.id},{t}]")
            if ln.reinforceable:
                item = item_of[("line_cap", ln.id)]
                param({f: 1.0}, 0.0, item, 1.0, f"cap+[{ln.id},{t}]")
                param({f: -1.0}, 0.0, item, 1.0, f"cap-[{ln.id},{t}]")
        for j, s in enumerate(stor):
            item = item_of[("bes_power", j)]
            param({ch_idx[j, t]: 1.0}, 0.0, item, 1.0, f"pch_max[{j},{t}]")
            param({dis_idx[j, t]: 1.0}, 0.0, item, 1.0, f"pdis_max[{j},{t}]")
            param({e_idx[j, t]: 1.0}, 0.0, item, s.duration_hours, f"e_max[{j},{t}]")
            prev = e_idx[j, (t - 1) % T]
            coefs = {e_idx[j, t]: 1.0, ch_idx[j, t]: -s.efficiency * dt, dis_idx[j, t]: dt}
            if prev != e_idx[j, t]:
                coefs[prev] = -1.0
            else:
                coefs[e_idx[j, t]] = 0.0
            bld.add_row(coefs, EQ, 0.0, f"soc[{j},{t}]")

    lp = bld.build()
    op = OperationLP(lp, m, b, cmap, np.array(prow, dtype=int), np.array(pitem, dtype=int),
                     np.array(pscale, dtype=float), np.array(pconst, dtype=float),
                     np.array(curtail, dtype=int), dt, w,
                     {"g": g_idx, "theta": th_idx, "f": f_idx, "pch": ch_idx, "pdis": dis_idx,
                      "e": e_idx, "curt": y_idx})
    items = cap.items(cmap) if cap is not None else cmap.const.copy()
    return op.at_items(items)


# ---------------------------------------------------------------------------
# cuts

@dataclass
class CutData:
    """Optimality cut ``alpha[m,b] >= constant + coefs . x``."""

    m: int
    b: int
    k: int
    constant: float
    coef_index: np.ndarray
    coef_value: np.ndarray
    sp_objective: float
    duals: np.ndarray
    curtailment: float  # MWh over one occurrence of the block

    @property
    def origin(self) -> tuple[int, int]:
        return (self.m, self.b)

    def value(self, x_flat) -> float:
        x = np.asarray(x_flat, dtype=float)
        return float(self.constant + self.coef_value @ x[self.coef_index])

    def dense_coefs(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        out[self.coef_index] = self.coef_value
        return out


def solve_subproblem(op: OperationLP, m: int, b: int, k: int, x_flat=None, method: str = "highs",
                     check: bool = True) -> CutData:
    """Solve ``op`` and turn its duals into an optimality cut.

    ``x_flat`` is the investment the LP was built at; when given and ``check``
    is set, the cut is verified to reproduce the LP objective there.
    """
    sol = solve_lp(op.lp, method)
    if not sol.optimal:
        raise SolverError(f"subproblem ({m},{b}) returned status {sol.status}")
    lam = sol.duals
    g_items = np.bincount(op.param_item, weights=lam[op.param_rows] * op.param_scale,
                          minlength=len(op.cmap.kinds))
    coefs = op.cmap.D.T @ g_items
    nz = np.flatnonzero(coefs)
    lp0 = op.lp.with_rhs(op.rhs_for_items(op.cmap.const))
    constant = dual_objective(lp0, lam, sol.reduced_costs)
    y = sol.x[op.curtail_vars].sum() * op.step_hours if op.curtail_vars.size else 0.0
    cut = CutData(m, b, k, float(constant), nz.astype(int), coefs[nz].astype(float), float(sol.objective),
                  lam.copy(), float(y))
    if check and x_flat is not None:
        at = cut.value(x_flat)
        if abs(at - sol.objective) > CUT_CHECK_TOL * (1.0 + abs(sol.objective)):
            raise SolverError(f"cut ({m},{b}) at generating point gives {at!r}, "
                              f"subproblem objective {sol.objective!r}")
    return cut


class SubproblemSet:
    """Operation LP templates for every (m, b) pair, rebuilt only on rhs."""

    def __init__(self, instance: Instance, method: str = "highs"):
        self.instance = instance
        self.method = method
        self.layout = investment_layout(instance)
        self.templates = {(m, b): build_operation_lp(instance, m, b)
                          for m in range(len(instance.tree_nodes)) for b in range(len(instance.blocks))}

    def solve(self, m: int, b: int, x_flat, k: int) -> CutData:
        op = self.templates[(m, b)].at_investment(x_flat)
        return solve_subproblem(op, m, b, k, x_flat, self.method)

    def solve_all(self, x_flat, k: int, parallel: bool = False) -> list[CutData]:
        pairs = list(self.templates)
        if parallel:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor() as pool:
                return list(pool.map(lambda mb: self.solve(mb[0], mb[1], x_flat, k), pairs))
        return [self.solve(m, b, x_flat, k) for m, b in pairs]

    def objective(self, m: int, b: int, x_flat) -> float:
        op = self.templates[(m, b)].at_investment(x_flat)
        sol = solve_lp(op.lp, self.method)
        if not sol.optimal:
            raise SolverError(f"subproblem ({m},{b}) returned status {sol.status}")
        return float(sol.objective)
