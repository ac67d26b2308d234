"""LP and MIP solves through the HiGHS solver shipped with SciPy."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

from .model import (EQ, GE, LE, FEAS_TOL, INT_TOL, LinearProgram, LpSolution, MipSolution,
                    MixedIntegerProgram)

_LP_OPTIONS = {"presolve": True, "dual_feasibility_tolerance": 1e-7,
               "primal_feasibility_tolerance": FEAS_TOL}


def solve_lp_highs(lp: LinearProgram) -> LpSolution:
    le = np.flatnonzero(lp.sense == LE)
    ge = np.flatnonzero(lp.sense == GE)
    eq = np.flatnonzero(lp.sense == EQ)
    ub_rows = np.concatenate([le, ge])
    sign = np.concatenate([np.ones(le.size), -np.ones(ge.size)])
    A_ub = b_ub = A_eq = b_eq = None
    if ub_rows.size:
        A_ub = sp.diags(sign) @ lp.A[ub_rows]
        b_ub = sign * lp.rhs[ub_rows]
    if eq.size:
        A_eq = lp.A[eq]
        b_eq = lp.rhs[eq]
    bounds = np.column_stack([lp.lb, lp.ub])
    res = linprog(lp.c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
                  method="highs-ds", options=_LP_OPTIONS)
    if res.status == 2:
        return LpSolution("infeasible", iterations=res.nit)
    if res.status == 3:
        return LpSolution("unbounded", iterations=res.nit)
    if res.status != 0:
        return LpSolution("stalled", iterations=res.nit)
    duals = np.zeros(lp.n_rows)
    if ub_rows.size:
        duals[ub_rows] = sign * res.ineqlin.marginals
    if eq.size:
        duals[eq] = res.eqlin.marginals
    rc = res.lower.marginals + res.upper.marginals
    return LpSolution("optimal", float(res.fun), np.asarray(res.x, dtype=float), duals,
                      np.asarray(rc, dtype=float), int(res.nit))


def solve_mip_highs(mip: MixedIntegerProgram, gap_tol: float, time_limit: float | None = None,
                    node_limit: int | None = None) -> MipSolution:
    lp = mip.lp
    integrality = np.zeros(lp.n_vars)
    integrality[mip.binaries] = 1
    lo = np.where(lp.sense == GE, lp.rhs, np.where(lp.sense == EQ, lp.rhs, -np.inf))
    hi = np.where(lp.sense == LE, lp.rhs, np.where(lp.sense == EQ, lp.rhs, np.inf))
    constraints = [LinearConstraint(lp.A, lo, hi)] if lp.n_rows else []
    options = {"mip_rel_gap": gap_tol, "presolve": True}
    if time_limit is not None:
        options["time_limit"] = time_limit
    if node_limit is not None:
        options["node_limit"] = node_limit
    res = milp(lp.c, integrality=integrality, bounds=Bounds(lp.lb, lp.ub),
               constraints=constraints, options=options)
    if res.status == 2:
        return MipSolution("infeasible")
    if res.status == 3:
        return MipSolution("unbounded")
    if res.x is None:
        return MipSolution("stalled")
    x = np.asarray(res.x, dtype=float)
    if mip.binaries.size:
        xb = x[mip.binaries]
        if np.all(np.abs(xb - np.round(xb)) <= INT_TOL):
            x[mip.binaries] = np.round(xb)
    np.clip(x, lp.lb, lp.ub, out=x)
    gap = float(getattr(res, "mip_gap", 0.0) or 0.0)
    bound = getattr(res, "mip_dual_bound", None)
    bound = float(res.fun if bound is None else bound)
    status = "optimal" if res.status == 0 else "node_limit"
    return MipSolution(status, float(lp.c @ x), x, gap, bound, int(getattr(res, "mip_node_count", 0) or 0))
