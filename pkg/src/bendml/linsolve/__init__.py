"""LP and mixed-binary MIP kernels.

Two interchangeable back ends are provided: ``"simplex"`` (the in-house
bounded revised simplex plus best-bound branch and bound) and ``"highs"``
(SciPy's HiGHS build).  Both honour the same dual-sign convention: the dual of
a row is the marginal change of the optimum per unit increase of its rhs.
"""

from __future__ import annotations

from functools import partial

from .bnb import branch_and_bound
from .highs import solve_lp_highs, solve_mip_highs
from .model import (EQ, FEAS_TOL, GE, INT_TOL, LE, MIP_GAP, OPT_TOL, LinearProgram, LpBuilder,
                    LpSolution, MipSolution, MixedIntegerProgram, dual_objective, dump_lp)
from .simplex import solve_lp_simplex

METHODS = ("highs", "simplex")


class SolverError(RuntimeError):
    """Raised when a kernel stalls or returns an unusable status."""


def solve_lp(lp: LinearProgram, method: str = "highs") -> LpSolution:
    if method == "highs":
        return solve_lp_highs(lp)
    if method == "simplex":
        return solve_lp_simplex(lp)
    raise ValueError(f"unknown LP method {method!r}; expected one of {METHODS}")


def solve_mip(mip: MixedIntegerProgram, gap_tol: float = MIP_GAP, method: str = "highs",
              node_limit: int | None = None) -> MipSolution:
    if method == "highs":
        return solve_mip_highs(mip, gap_tol, node_limit=node_limit)
    if method == "simplex":
        return branch_and_bound(mip, partial(solve_lp, method="simplex"), gap_tol,
                                node_limit or 100_000)
    raise ValueError(f"unknown MIP method {method!r}; expected one of {METHODS}")


__all__ = [
    "EQ", "GE", "LE", "FEAS_TOL", "OPT_TOL", "INT_TOL", "MIP_GAP", "METHODS",
    "LinearProgram", "LpBuilder", "LpSolution", "MipSolution", "MixedIntegerProgram",
    "SolverError", "branch_and_bound", "dual_objective", "dump_lp", "solve_lp", "solve_mip",
]
