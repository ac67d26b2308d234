"""Master investment MILP with its growing pool of optimality cuts."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .instance import Instance, ancestors, subproblem_index
from .linsolve import (GE, LE, MIP_GAP, LinearProgram, MixedIntegerProgram, SolverError, solve_mip)
from .subproblem import CutData, InvestmentLayout, investment_layout, operation_weight

DUPLICATE_TOL = 1e-9


def investment_costs(instance: Instance, layout: InvestmentLayout | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Undiscounted cost per unit of each investment variable and its upper bound.

    An asset decided at node m pays its annualized cost for every year from
    commissioning (stage of m plus lead) to the end of the horizon.  Assets
    that could only come online after the horizon are fixed at zero.
    """
    layout = layout or investment_layout(instance)
    cd = instance.cost_data
    starts = instance.stage_start_years
    horizon = instance.horizon_years
    n_stages = instance.n_stages
    cost = np.zeros(layout.size)
    ub = np.zeros(layout.size)
    for node in instance.tree_nodes:
        m = node.id
        line_stage = node.stage + cd.line_lead_stages
        if line_stage < n_stages:
            years = horizon - starts[line_stage]
            for i, lid in enumerate(layout.line_ids):
                ln = instance.lines[lid]
                cost[layout.line_build(m, i)] = cd.line_fixed_annual * ln.length * years
                cost[layout.line_added(m, i)] = cd.line_variable_annual * ln.length * years
                ub[layout.line_build(m, i)] = 1.0
                ub[layout.line_added(m, i)] = ln.max_added_capacity
        bes_stage = node.stage + cd.bes_lead_stages
        if bes_stage < n_stages:
            years = horizon - starts[bes_stage]
            for j, st in enumerate(instance.storage_candidates):
                cost[layout.bes_power(m, j)] = cd.bes_annual * years
                ub[layout.bes_build(m, j)] = 1.0
                ub[layout.bes_power(m, j)] = st.max_power
    return cost, ub


@dataclass
class MasterSolution:
    x: np.ndarray  # flat investments, see InvestmentLayout
    alpha: np.ndarray  # one entry per (m, b) in subproblem_index order
    objective: float
    investment_cost: float  # probability-weighted c.x part of the objective
    gap: float = 0.0


@dataclass
class MasterProblem:
    instance: Instance
    layout: InvestmentLayout
    pairs: list[tuple[int, int]]
    c: np.ndarray  # objective over [x, alpha]
    lb: np.ndarray
    ub: np.ndarray
    base_A: sp.csr_matrix
    base_rhs: np.ndarray
    binaries: np.ndarray
    gap_tol: float = MIP_GAP
    method: str = "highs"
    scale: float = 1.0  # currency units per unit of the solver's objective
    cuts: list[CutData] = field(default_factory=list)
    _seen: dict = field(default_factory=dict)

    @property
    def n_x(self) -> int:
        return self.layout.size

    @property
    def n_vars(self) -> int:
        return self.layout.size + len(self.pairs)

    def pair_index(self, m: int, b: int) -> int:
        return m * len(self.instance.blocks) + b

    def alpha_index(self, m: int, b: int) -> int:
        return self.n_x + self.pair_index(m, b)

    def is_duplicate(self, cut: CutData) -> bool:
        for old in self._seen.get(cut.origin, ()):
            if _same_cut(old, cut):
                return True
        return False

    def _cut_rows(self, cuts: Sequence[CutData]):
        rows, cols, vals, rhs = [], [], [], []
        for r, cut in enumerate(cuts):
            rows.append(r), cols.append(self.alpha_index(cut.m, cut.b)), vals.append(1.0)
            rows.extend([r] * cut.coef_index.size)
            cols.extend(cut.coef_index.tolist())
            vals.extend((-cut.coef_value / self.scale).tolist())
            rhs.append(cut.constant / self.scale)
        A = sp.csr_matrix((vals, (rows, cols)), shape=(len(cuts), self.n_vars))
        return A, np.array(rhs, dtype=float)

    def to_mip(self, extra_cuts: Sequence[CutData] = (), pool_size: int | None = None
               ) -> MixedIntegerProgram:
        """MILP in scaled units: alpha and the objective are divided by ``scale``."""
        pool = self.cuts if pool_size is None else self.cuts[:pool_size]
        cuts = list(pool) + list(extra_cuts)
        A_cut, rhs_cut = self._cut_rows(cuts)
        A = sp.vstack([self.base_A, A_cut], format="csr")
        rhs = np.concatenate([self.base_rhs, rhs_cut])
        sense = np.array([LE] * self.base_A.shape[0] + [GE] * len(cuts), dtype=object)
        c = np.concatenate([self.c[:self.n_x] / self.scale, self.c[self.n_x:]])
        lp = LinearProgram(c, A, sense, rhs, self.lb, self.ub)
        return MixedIntegerProgram(lp, self.binaries)


def _same_cut(a: CutData, b: CutData) -> bool:
    if a.coef_index.size != b.coef_index.size or not np.array_equal(a.coef_index, b.coef_index):
        return False
    scale = 1.0 + max(abs(a.constant), np.abs(a.coef_value).max(initial=0.0))
    if abs(a.constant - b.constant) > DUPLICATE_TOL * scale:
        return False
    return bool(np.all(np.abs(a.coef_value - b.coef_value) <= DUPLICATE_TOL * scale))


def build_master(instance: Instance, gap_tol: float = MIP_GAP, method: str = "highs") -> MasterProblem:
    """Investment MILP with build-once and capacity-link rows, no cuts yet."""
    layout = investment_layout(instance)
    pairs = subproblem_index(instance)
    cost, x_ub = investment_costs(instance, layout)
    prob = np.array([instance.tree_nodes[m].probability for m in range(layout.n_nodes)])
    node_of = np.repeat(np.arange(layout.n_nodes), layout.per_node)
    c = np.concatenate([cost * prob[node_of], [prob[m] for m, _ in pairs]])
    lb = np.zeros(layout.size + len(pairs))
    ub = np.concatenate([x_ub, np.full(len(pairs), np.inf)])

    rows, cols, vals, rhs = [], [], [], []

    def add(coefs, bound):
        r = len(rhs)
        for j, v in coefs:
            rows.append(r), cols.append(j), vals.append(v)
        rhs.append(bound)

    for leaf in instance.leaves:
        path = ancestors(instance, leaf)
        for i in range(layout.n_lines):
            add([(layout.line_build(a, i), 1.0) for a in path], 1.0)
        for j in range(layout.n_storage):
            add([(layout.bes_build(a, j), 1.0) for a in path], 1.0)
    for m in range(layout.n_nodes):
        for i, lid in enumerate(layout.line_ids):
            cap = instance.lines[lid].max_added_capacity
            add([(layout.line_added(m, i), 1.0), (layout.line_build(m, i), -cap)], 0.0)
        for j, st in enumerate(instance.storage_candidates):
            add([(layout.bes_power(m, j), 1.0), (layout.bes_build(m, j), -st.max_power)], 0.0)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(rhs), layout.size + len(pairs)))
    return MasterProblem(instance, layout, pairs, c, lb, ub, A, np.array(rhs, dtype=float),
                         layout.binary_indices(), gap_tol, method, cost_scale(instance))


def cost_scale(instance: Instance) -> float:
    """Power of ten that brings expected costs to the order of a thousand.

    The bound used is the cost of curtailing all load everywhere; solving in
    these units keeps cut coefficients and right-hand sides well scaled.
    """
    worst = 0.0
    for m, b in subproblem_index(instance):
        w = operation_weight(instance, m, b)
        worst += instance.tree_nodes[m].probability * w * instance.cost_data.voll * instance.demand(m, b).sum()
    if worst <= 1e3:
        return 1.0
    return float(10.0 ** math.floor(math.log10(worst / 1e3)))


def append_cuts(mp: MasterProblem, cuts: Iterable[CutData]) -> int:
    """Append cuts to the pool, skipping duplicates; returns how many were added."""
    added = 0
    for cut in cuts:
        if mp.is_duplicate(cut):
            continue
        mp.cuts.append(cut)
        mp._seen.setdefault(cut.origin, []).append(cut)
        added += 1
    return added


def solve_master(mp: MasterProblem, extra_cuts: Sequence[CutData] = (), pool_size: int | None = None
                 ) -> MasterSolution:
    """Solve the master with its pool plus ``extra_cuts``; the pool is left unchanged.

    ``pool_size`` restricts the pool to its first entries (cuts in append order).
    """
    sol = solve_mip(mp.to_mip(extra_cuts, pool_size), mp.gap_tol, mp.method)
    if sol.status not in ("optimal", "node_limit") or sol.x is None:
        raise SolverError(f"master problem returned status {sol.status}")
    x = sol.x[:mp.n_x].copy()
    alpha = sol.x[mp.n_x:] * mp.scale
    inv = float(mp.c[:mp.n_x] @ x)
    return MasterSolution(x, alpha, inv + float(mp.c[mp.n_x:] @ alpha), inv, float(sol.gap))


def export_cut_pool(cuts: Sequence[CutData], path: str | Path):
    """One row per cut: origin, iteration, constant, nonzero coefficients as idx:value."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "b", "iteration", "constant", "coefficients"])
        for cut in cuts:
            coefs = " ".join(f"{i}:{v!r}" for i, v in zip(cut.coef_index.tolist(), cut.coef_value.tolist()))
            w.writerow([cut.m, cut.b, cut.k, repr(cut.constant), coefs])


def read_cut_pool(path: str | Path) -> list[dict]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pairs = [p.split(":") for p in row["coefficients"].split()]
            out.append({"m": int(row["m"]), "b": int(row["b"]), "iteration": int(row["iteration"]),
                        "constant": float(row["constant"]),
                        "coefficients": {int(i): float(v) for i, v in pairs}})
    return out
