"""Best-bound branch and bound over LP relaxations for mixed-binary programs."""

from __future__ import annotations

import heapq
from typing import Callable

import numpy as np

from .model import INT_TOL, LinearProgram, LpSolution, MipSolution, MixedIntegerProgram


def _relative_gap(incumbent: float, bound: float) -> float:
    if not np.isfinite(incumbent):
        return np.inf
    return max(incumbent - bound, 0.0) / max(abs(incumbent), 1e-10)


def branch_and_bound(mip: MixedIntegerProgram, lp_solver: Callable[[LinearProgram], LpSolution],
                     gap_tol: float, node_limit: int = 100_000) -> MipSolution:
    """Solve ``mip`` by best-bound search.

    Branches on the most fractional binary (lowest index on ties); open nodes
    are ordered by parent bound, then creation order, so the search is fully
    deterministic.
    """
    lp = mip.lp
    bins = mip.binaries
    root = lp_solver(lp)
    if root.status == "infeasible":
        return MipSolution("infeasible")
    if root.status == "unbounded":
        return MipSolution("unbounded")
    if not root.optimal:
        return MipSolution("stalled")

    best_x = None
    best_obj = np.inf
    counter = 0
    heap = [(root.objective, counter, lp.lb.copy(), lp.ub.copy(), root)]
    nodes = 0
    global_bound = root.objective
    while heap:
        bound = heap[0][0]
        global_bound = bound
        if _relative_gap(best_obj, bound) <= gap_tol:
            break
        if nodes >= node_limit:
            status = "node_limit" if best_x is not None else "stalled"
            return MipSolution(status, best_obj, best_x, _relative_gap(best_obj, bound), bound, nodes)
        _, _, lb, ub, sol = heapq.heappop(heap)
        nodes += 1
        if sol is None:
            sol = lp_solver(LinearProgram(lp.c, lp.A, lp.sense, lp.rhs, lb, ub))
            if sol.status == "infeasible":
                continue
            if not sol.optimal:
                return MipSolution("stalled", best_obj, best_x, np.inf, bound, nodes)
            if sol.objective >= best_obj - gap_tol * max(abs(best_obj), 1e-10):
                continue
        xb = sol.x[bins] if bins.size else np.zeros(0)
        frac = np.abs(xb - np.round(xb))
        if not bins.size or frac.max() <= INT_TOL:
            if sol.objective < best_obj:
                best_obj = sol.objective
                best_x = sol.x.copy()
                if bins.size:
                    best_x[bins] = np.round(best_x[bins])
            continue
        # most fractional: distance to 0.5 smallest; argmin returns lowest index
        k = int(np.argmin(np.abs(xb - 0.5)))
        j = int(bins[k])
        for val in (0.0, 1.0):
            clb, cub = lb.copy(), ub.copy()
            clb[j] = cub[j] = val
            counter += 1
            heapq.heappush(heap, (sol.objective, counter, clb, cub, None))
    if best_x is None:
        return MipSolution("infeasible", nodes=nodes)
    if not heap:
        global_bound = best_obj
    return MipSolution("optimal", best_obj, best_x, _relative_gap(best_obj, global_bound),
                       global_bound, nodes)
