"""Bounded-variable revised simplex with a Bland's-rule anti-cycling fallback.

Rows are turned into equalities with one slack per row (slack bounds encode
the sense), so the working problem is ``[A | S] z = b, l <= z <= u``.  Phase 1
drives artificial variables out; phase 2 optimizes the true objective from the
phase-1 basis.  Duals are ``B^-T c_B`` of the final basis, which makes them
the marginals of the row right-hand sides: nonpositive for ``<=`` rows and
nonnegative for ``>=`` rows under minimization.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as la

from .model import FEAS_TOL, OPT_TOL, LE, GE, LinearProgram, LpSolution

PIVOT_TOL = 1e-9
DEGENERATE_TRIP = 30

AT_LOWER, AT_UPPER, AT_ZERO, BASIC = 0, 1, 2, 3


class _Tableau:
    def __init__(self, M: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                 basis: list[int], status: np.ndarray):
        self.M = M
        self.b = b
        self.lo = lo
        self.hi = hi
        self.basis = basis
        self.status = status
        self.m = M.shape[0]
        self.refactor()

    def nonbasic_values(self) -> np.ndarray:
        z = np.zeros(self.M.shape[1])
        st = self.status
        z[st == AT_LOWER] = self.lo[st == AT_LOWER]
        z[st == AT_UPPER] = self.hi[st == AT_UPPER]
        return z

    def refactor(self):
        B = self.M[:, self.basis]
        self.lu = la.lu_factor(B, check_finite=False)
        z = self.nonbasic_values()
        self.xB = la.lu_solve(self.lu, self.b - self.M @ z, check_finite=False)

    def ftran(self, col: np.ndarray) -> np.ndarray:
        return la.lu_solve(self.lu, col, check_finite=False)

    def btran(self, vec: np.ndarray) -> np.ndarray:
        return la.lu_solve(self.lu, vec, trans=1, check_finite=False)

    def values(self) -> np.ndarray:
        z = self.nonbasic_values()
        z[self.basis] = self.xB
        return z


def _iterate(tab: _Tableau, cost: np.ndarray, max_iter: int, counter: list[int]) -> str:
    """Run simplex pivots on ``tab`` minimizing ``cost``; returns status."""
    degenerate_run = 0
    bland = False
    while True:
        if counter[0] >= max_iter:
            return "stalled"
        counter[0] += 1
        y = tab.btran(cost[tab.basis])
        d = cost - tab.M.T @ y
        st = tab.status
        fixed = tab.hi - tab.lo <= 0.0
        elig_up = ((st == AT_LOWER) | (st == AT_ZERO)) & (d < -OPT_TOL) & ~fixed
        elig_dn = ((st == AT_UPPER) | (st == AT_ZERO)) & (d > OPT_TOL) & ~fixed
        elig = elig_up | elig_dn
        if not elig.any():
            return "optimal"
        cand = np.flatnonzero(elig)
        if bland:
            j = int(cand[0])
        else:
            j = int(cand[np.argmax(np.abs(d[cand]))])
        direction = 1.0 if elig_up[j] else -1.0

        alpha = tab.ftran(tab.M[:, j])
        # basic variables move by -direction * alpha * t
        delta = -direction * alpha
        t_best = tab.hi[j] - tab.lo[j]
        leave = -1
        leave_to_upper = False
        best_piv = 0.0
        lo_b = tab.lo[tab.basis]
        hi_b = tab.hi[tab.basis]
        for r in range(tab.m):
            dr = delta[r]
            if dr < -PIVOT_TOL:
                if lo_b[r] == -np.inf:
                    continue
                t = max(tab.xB[r] - lo_b[r], 0.0) / -dr
                to_upper = False
            elif dr > PIVOT_TOL:
                if hi_b[r] == np.inf:
                    continue
                t = max(hi_b[r] - tab.xB[r], 0.0) / dr
                to_upper = True
            else:
                continue
            if leave < 0 and t < t_best:
                better = True
            elif t < t_best - 1e-12:
                better = True
            elif leave >= 0 and t <= t_best + 1e-12:
                if bland:
                    better = tab.basis[r] < tab.basis[leave]
                else:
                    better = abs(dr) > best_piv
            else:
                better = False
            if better:
                t_best = t
                leave = r
                leave_to_upper = to_upper
                best_piv = abs(dr)
        if t_best == np.inf:
            return "unbounded"

        if t_best <= FEAS_TOL:
            degenerate_run += 1
            if degenerate_run >= DEGENERATE_TRIP:
                bland = True
        else:
            degenerate_run = 0

        tab.xB = tab.xB + delta * t_best
        if leave < 0:
            # bound flip: entering variable travels to its other bound
            st[j] = AT_UPPER if direction > 0 else AT_LOWER
            continue

        entering_value = (tab.lo[j] if st[j] == AT_LOWER else
                          tab.hi[j] if st[j] == AT_UPPER else 0.0) + direction * t_best
        out = tab.basis[leave]
        st[out] = AT_UPPER if leave_to_upper else AT_LOWER
        if st[out] == AT_LOWER and tab.lo[out] == -np.inf:
            st[out] = AT_ZERO
        tab.basis[leave] = j
        st[j] = BASIC
        tab.xB[leave] = entering_value
        # a fresh LU each pivot keeps the kernel simple; sizes here are small
        tab.refactor()


def solve_lp_simplex(lp: LinearProgram, max_iter: int | None = None) -> LpSolution:
    n, m = lp.n_vars, lp.n_rows
    A = lp.A.toarray()
    b = lp.rhs.copy()
    slack_lo = np.zeros(m)
    slack_hi = np.full(m, np.inf)
    S = np.zeros(m)
    for i, s in enumerate(lp.sense):
        if s == LE:
            S[i] = 1.0
        elif s == GE:
            S[i] = -1.0
        else:
            S[i] = 1.0
            slack_hi[i] = 0.0
    M = np.hstack([A, np.diag(S)])
    lo = np.concatenate([lp.lb, slack_lo])
    hi = np.concatenate([lp.ub, slack_hi])
    n_struct = n + m

    status = np.full(n_struct, AT_LOWER, dtype=int)
    for j in range(n):
        if lo[j] == -np.inf:
            status[j] = AT_UPPER if hi[j] < np.inf else AT_ZERO
    z0 = np.where(status == AT_LOWER, lo, np.where(status == AT_UPPER, hi, 0.0))
    z0[n:] = 0.0
    resid = b - A @ z0[:n]

    # slacks start basic where their implied value respects their bounds
    basis: list[int] = []
    art_rows = []
    for i in range(m):
        val = resid[i] / S[i]
        if slack_lo[i] - FEAS_TOL <= val <= slack_hi[i] + FEAS_TOL and slack_hi[i] > 0:
            basis.append(n + i)
            status[n + i] = BASIC
        else:
            basis.append(-1)
            art_rows.append(i)
    n_art = len(art_rows)
    art_cols = np.zeros((m, n_art))
    for a, i in enumerate(art_rows):
        art_cols[i, a] = 1.0 if resid[i] >= 0 else -1.0
        basis[i] = n_struct + a
    M_full = np.hstack([M, art_cols])
    lo_full = np.concatenate([lo, np.zeros(n_art)])
    hi_full = np.concatenate([hi, np.full(n_art, np.inf)])
    status_full = np.concatenate([status, np.full(n_art, BASIC, dtype=int)])
    n_all = n_struct + n_art
    budget = max_iter if max_iter is not None else 50 * (n_all + m) + 1000
    counter = [0]

    tab = _Tableau(M_full, b, lo_full, hi_full, basis, status_full)
    if n_art:
        c1 = np.zeros(n_all)
        c1[n_struct:] = 1.0
        res = _iterate(tab, c1, budget, counter)
        if res == "stalled":
            return LpSolution("stalled", iterations=counter[0])
        infeas = float(tab.values()[n_struct:].sum())
        if infeas > FEAS_TOL * max(1.0, np.abs(b).max(initial=0.0)):
            return LpSolution("infeasible", iterations=counter[0])
        # artificials are pinned to zero for phase 2
        tab.hi[n_struct:] = 0.0
        for a in range(n_art):
            col = n_struct + a
            if tab.status[col] != BASIC:
                tab.status[col] = AT_LOWER
        tab.refactor()

    c2 = np.concatenate([lp.c, np.zeros(m + n_art)])
    res = _iterate(tab, c2, budget, counter)
    if res != "optimal":
        return LpSolution(res, iterations=counter[0])
    tab.refactor()
    z = tab.values()
    x = z[:n].copy()
    # snap nonbasic values exactly onto their bounds
    np.clip(x, lp.lb, lp.ub, out=x)
    y = tab.btran(c2[tab.basis])
    d = lp.c - A.T @ y
    basic_struct = [j for j in tab.basis if j < n]
    d[basic_struct] = 0.0
    return LpSolution("optimal", float(lp.c @ x), x, y, d, counter[0])
