"""Problem and solution containers shared by the LP and MIP kernels."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
import scipy.sparse as sp

FEAS_TOL = 1e-7
OPT_TOL = 1e-7
INT_TOL = 1e-6
MIP_GAP = 1e-6

LE, EQ, GE = "<=", "==", ">="
_SENSES = (LE, EQ, GE)


@dataclass
class LinearProgram:
    """min c.x  s.t.  A x (sense) rhs,  lb <= x <= ub.

    ``A`` is stored as CSR; ``sense`` holds one of ``"<="``, ``"=="``, ``">="``
    per row.
    """

    c: np.ndarray
    A: sp.csr_matrix
    sense: np.ndarray
    rhs: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    var_names: Sequence[str] | None = None
    row_names: Sequence[str] | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.A = sp.csr_matrix(self.A, dtype=float)
        self.sense = np.asarray(self.sense, dtype=object)
        self.rhs = np.asarray(self.rhs, dtype=float)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        n = self.c.size
        m = self.rhs.size
        if self.A.shape != (m, n):
            raise ValueError(f"A has shape {self.A.shape}, expected {(m, n)}")
        if self.sense.size != m:
            raise ValueError("one sense per row required")
        if any(s not in _SENSES for s in self.sense):
            raise ValueError(f"row senses must be in {_SENSES}")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("one bound pair per variable required")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.A.data))
                and np.all(np.isfinite(self.rhs))):
            raise ValueError("objective, matrix and rhs must be finite")
        if np.any(self.lb > self.ub):
            j = int(np.argmax(self.lb > self.ub))
            raise ValueError(f"lower bound exceeds upper bound for variable {j}")

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_rows(self) -> int:
        return self.rhs.size

    def with_rhs(self, rhs) -> "LinearProgram":
        """Copy sharing matrix data but with a new right-hand side."""
        return LinearProgram(self.c, self.A, self.sense, rhs, self.lb, self.ub,
                             self.var_names, self.row_names)

    def row_activity(self, x) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float)

    def primal_residual(self, x) -> float:
        """Largest violation of rows and bounds at ``x``."""
        x = np.asarray(x, dtype=float)
        act = self.row_activity(x)
        viol = np.zeros(self.n_rows)
        le = self.sense == LE
        ge = self.sense == GE
        eq = self.sense == EQ
        viol[le] = np.maximum(act[le] - self.rhs[le], 0.0)
        viol[ge] = np.maximum(self.rhs[ge] - act[ge], 0.0)
        viol[eq] = np.abs(act[eq] - self.rhs[eq])
        bviol = np.maximum(np.maximum(self.lb - x, x - self.ub), 0.0)
        return float(max(viol.max(initial=0.0), bviol.max(initial=0.0)))


@dataclass
class LpSolution:
    status: str  # optimal | infeasible | unbounded | stalled
    objective: float = float("nan")
    x: np.ndarray | None = None
    duals: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def dual_objective(lp: LinearProgram, duals: np.ndarray, reduced_costs: np.ndarray) -> float:
    """rhs.y plus the bound terms carried by the reduced costs.

    The active bound is picked by the sign of the reduced cost; reduced costs
    within the optimality tolerance of zero on an infinite side are dropped.
    """
    val = float(lp.rhs @ duals)
    for j in np.flatnonzero(reduced_costs):
        dj = reduced_costs[j]
        bound = lp.lb[j] if dj > 0 else lp.ub[j]
        if np.isfinite(bound):
            val += dj * bound
        elif abs(dj) > OPT_TOL:
            return -np.inf
    return val


@dataclass
class MixedIntegerProgram:
    lp: LinearProgram
    binaries: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.binaries = np.asarray(self.binaries, dtype=int)
        if self.binaries.size:
            if self.binaries.min() < 0 or self.binaries.max() >= self.lp.n_vars:
                raise ValueError("binary index out of range")
            lb = self.lp.lb[self.binaries]
            ub = self.lp.ub[self.binaries]
            if np.any(lb < 0) or np.any(ub > 1):
                raise ValueError("binary variables must have bounds within [0, 1]")


@dataclass
class MipSolution:
    status: str  # optimal | infeasible | unbounded | node_limit | stalled
    objective: float = float("nan")
    x: np.ndarray | None = None
    gap: float = float("nan")
    bound: float = float("nan")
    nodes: int = 0

    @property
    def has_solution(self) -> bool:
        return self.x is not None


class LpBuilder:
    """Incremental row/column assembly into a :class:`LinearProgram`."""

    def __init__(self):
        self._c: list[float] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._names: list[str] = []
        self._rows: list[int] = []
        self._cols: list[int] = []
        self._vals: list[float] = []
        self._sense: list[str] = []
        self._rhs: list[float] = []
        self._row_names: list[str] = []

    @property
    def n_vars(self) -> int:
        return len(self._c)

    @property
    def n_rows(self) -> int:
        return len(self._rhs)

    def add_var(self, lb=0.0, ub=np.inf, cost=0.0, name="") -> int:
        self._c.append(float(cost))
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        self._names.append(name)
        return len(self._c) - 1

    def add_vars(self, count, lb=0.0, ub=np.inf, cost=0.0, name="") -> np.ndarray:
        return np.array([self.add_var(lb, ub, cost, f"{name}[{i}]") for i in range(count)], dtype=int)

    def add_row(self, coefs: dict[int, float] | Sequence[tuple[int, float]], sense: str, rhs: float,
                name="") -> int:
        items = coefs.items() if isinstance(coefs, dict) else coefs
        r = len(self._rhs)
        for j, v in items:
            if v != 0.0:
                self._rows.append(r)
                self._cols.append(int(j))
                self._vals.append(float(v))
        self._sense.append(sense)
        self._rhs.append(float(rhs))
        self._row_names.append(name)
        return r

    def set_cost(self, j: int, cost: float):
        self._c[j] = float(cost)

    def build(self) -> LinearProgram:
        n = len(self._c)
        m = len(self._rhs)
        # duplicate (row, col) entries are summed by the COO -> CSR conversion
        A = sp.coo_matrix((self._vals, (self._rows, self._cols)), shape=(m, n)).tocsr()
        A.sum_duplicates()
        return LinearProgram(np.array(self._c), A, np.array(self._sense, dtype=object),
                             np.array(self._rhs), np.array(self._lb), np.array(self._ub),
                             list(self._names), list(self._row_names))


def _fmt(v: float) -> str:
    if v == np.inf:
        return "+inf"
    if v == -np.inf:
        return "-inf"
    return repr(float(v))


def dump_lp(lp: LinearProgram, out: IO[str], binaries: Sequence[int] = ()):
    """Write a plain-text LP-style listing of ``lp`` for inspection."""
    names = lp.var_names or [f"x{j}" for j in range(lp.n_vars)]
    names = [nm or f"x{j}" for j, nm in enumerate(names)]
    rnames = lp.row_names or [f"r{i}" for i in range(lp.n_rows)]
    out.write("Minimize\n obj:")
    for j in np.flatnonzero(lp.c):
        out.write(f" {lp.c[j]:+.17g} {names[j]}")
    out.write("\nSubject To\n")
    A = lp.A
    for i in range(lp.n_rows):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        terms = " ".join(f"{A.data[p]:+.17g} {names[A.indices[p]]}" for p in range(lo, hi)) or "0"
        out.write(f" {rnames[i] or f'r{i}'}: {terms} {lp.sense[i]} {lp.rhs[i]:.17g}\n")
    out.write("Bounds\n")
    for j in range(lp.n_vars):
        out.write(f" {_fmt(lp.lb[j])} <= {names[j]} <= {_fmt(lp.ub[j])}\n")
    if len(binaries):
        out.write("Binary\n")
        out.write(" " + " ".join(names[j] for j in binaries) + "\n")
    out.write("End\n")
