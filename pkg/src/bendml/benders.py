"""Multicut Benders driver, bound bookkeeping and the extensive-form oracle."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .instance import Instance, subproblem_index
from .linsolve import LE, MIP_GAP, LinearProgram, MixedIntegerProgram, MipSolution, solve_mip
from .master import (MasterProblem, MasterSolution, append_cuts, build_master, investment_costs,
                     solve_master)
from .subproblem import CutData, SubproblemSet, investment_layout

log = logging.getLogger("bendml")

EPS_BD = 0.01
N_BD = 1000
EXTENSIVE_MAX_VARS = 20_000

BASE_COLUMNS = ["k", "lb", "ub", "best_ub", "gap", "cuts_generated", "cuts_appended",
                "mp_seconds", "sp_seconds"]
ML_COLUMNS = ["cascade_index", "cpi_active", "delta_ub"]
TIMING_COLUMNS = ("mp_seconds", "sp_seconds")


class SizeGuardError(ValueError):
    pass


@dataclass
class IterationRecord:
    k: int
    lb: float
    ub: float
    best_ub: float
    gap: float
    cuts_generated: int
    cuts_appended: int
    mp_seconds: float = 0.0
    sp_seconds: float = 0.0
    cascade_index: int | None = None  # -1 marks the fallback
    cpi_active: str | None = None
    delta_ub: float | None = None

    def key(self, columns: Sequence[str] | None = None) -> tuple:
        """Values of ``columns`` (default: every field except wall-clock timings)."""
        names = columns or [f.name for f in fields(self) if f.name not in TIMING_COLUMNS]
        return tuple(getattr(self, n) for n in names)


@dataclass
class RunTrace:
    method: str
    records: list[IterationRecord] = field(default_factory=list)
    x: np.ndarray | None = None  # incumbent of the best upper bound
    objective: float = math.inf
    reason: str = ""
    switch_iteration: int | None = None
    cuts: list[CutData] = field(default_factory=list)
    decisions: list = field(default_factory=list)  # cascade decisions of filtered runs

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def total_cuts(self) -> int:
        return sum(r.cuts_appended for r in self.records)

    @property
    def lb(self) -> float:
        return self.records[-1].lb if self.records else 0.0

    @property
    def gap(self) -> float:
        return self.records[-1].gap if self.records else math.inf

    def mean_mp_seconds(self) -> float:
        return float(np.mean([r.mp_seconds for r in self.records])) if self.records else 0.0

    def same_trajectory(self, other: "RunTrace") -> bool:
        """Trace equality ignoring timings and the method tag."""
        cols = [c for c in BASE_COLUMNS if c not in TIMING_COLUMNS]
        return ([r.key(cols) for r in self.records] == [r.key(cols) for r in other.records]
                and self.reason == other.reason
                and np.array_equal(self.x, other.x) and self.objective == other.objective)


def relative_gap(lb: float, best_ub: float) -> float:
    if lb > 0:
        return (best_ub - lb) / lb
    return 0.0 if best_ub == lb == 0 else math.inf


def upper_bound(instance: Instance, x, sp_objectives: dict) -> float:
    """Expected total cost of investments ``x`` with operation costs ``sp_objectives[(m, b)]``."""
    cost, _ = investment_costs(instance)
    layout = investment_layout(instance)
    x = np.asarray(x, dtype=float)
    total = 0.0
    for node in instance.tree_nodes:
        m = node.id
        sl = slice(m * layout.per_node, (m + 1) * layout.per_node)
        node_cost = float(cost[sl] @ x[sl]) + sum(sp_objectives[(m, blk.id)] for blk in instance.blocks)
        total += node.probability * node_cost
    return total


# Selector: (k, cuts, master solution, trace) -> (cuts to append, extra record fields)
Selector = Callable[[int, list, MasterSolution, RunTrace], tuple]


def _append_all(k, cuts, ms, trace):
    return cuts, {}


class BendersState:
    """One multicut Benders run, advanced an iteration at a time."""

    def __init__(self, instance: Instance, eps_bd: float = EPS_BD, n_bd: int = N_BD,
                 method: str = "highs", parallel_sp: bool = False, method_tag: str = "mbd",
                 selector: Selector | None = None, gap_tol: float = MIP_GAP):
        if not eps_bd > 0:
            raise ValueError("eps_bd must be > 0")
        self.instance = instance
        self.eps_bd = eps_bd
        self.n_bd = n_bd
        self.parallel_sp = parallel_sp
        self.selector = selector or _append_all
        self.mp: MasterProblem = build_master(instance, gap_tol, method)
        self.sps = SubproblemSet(instance, method)
        self.trace = RunTrace(method_tag)
        self.k = 0
        self.done = False
        self.last_master: MasterSolution | None = None
        self.last_cuts: list[CutData] = []
        self.current_ub = math.inf
        # pool size just before each iteration's cuts were appended
        self.pool_marks: list[int] = []

    def pre_master(self):
        """Hook run before each master solve (used by the sampler)."""

    def step(self) -> IterationRecord:
        if self.done:
            raise RuntimeError("run already terminated")
        self.k += 1
        k = self.k
        self.pre_master()
        t1 = time.perf_counter()
        ms = solve_master(self.mp)
        t2 = time.perf_counter()
        cuts = self.sps.solve_all(ms.x, k, self.parallel_sp)
        t3 = time.perf_counter()
        ub = ms.investment_cost + sum(self.instance.tree_nodes[c.m].probability * c.sp_objective
                                      for c in cuts)
        tr = self.trace
        prev_best = tr.records[-1].best_ub if tr.records else math.inf
        if ub < prev_best:
            tr.x = ms.x.copy()
            tr.objective = ub
        best = min(ub, prev_best)
        lb = ms.objective
        gap = relative_gap(lb, best)
        self.current_ub = ub
        chosen, extra = self.selector(k, cuts, ms, tr)
        self.pool_marks.append(len(self.mp.cuts))
        appended = append_cuts(self.mp, chosen)
        rec = IterationRecord(k, lb, ub, best, gap, len(cuts), appended, t2 - t1, t3 - t2, **extra)
        tr.records.append(rec)
        self.last_master = ms
        self.last_cuts = cuts
        log.info("k=%d lb=%.6g ub=%.6g best=%.6g gap=%.4g appended=%d", k, lb, ub, best, gap, appended)
        if gap <= self.eps_bd:
            self._finish("converged")
        elif appended == 0:
            self._finish("stall")
        elif k >= self.n_bd:
            self._finish("iteration limit")
        return rec

    def _finish(self, reason: str):
        self.done = True
        self.trace.reason = reason
        self.trace.cuts = list(self.mp.cuts)

    def run(self) -> RunTrace:
        while not self.done:
            self.step()
        return self.trace


def mbd_solve(instance: Instance, eps_bd: float = EPS_BD, n_bd: int = N_BD, method: str = "highs",
              parallel_sp: bool = False) -> RunTrace:
    """Plain multicut Benders: every non-duplicate cut is appended."""
    return BendersState(instance, eps_bd, n_bd, method, parallel_sp).run()


def evaluate_investment(instance: Instance, x, method: str = "highs") -> float:
    """Expected cost of ``x`` from fresh subproblem solves."""
    sps = SubproblemSet(instance, method)
    obj = {(m, b): sps.objective(m, b, x) for m, b in subproblem_index(instance)}
    return upper_bound(instance, x, obj)


# ---------------------------------------------------------------------------
# extensive form

@dataclass
class ExtensiveSolution:
    mip: MipSolution
    x: np.ndarray
    objective: float


def extensive_form(instance: Instance, max_vars: int = EXTENSIVE_MAX_VARS, gap_tol: float = MIP_GAP,
                   method: str = "highs") -> ExtensiveSolution:
    """Deterministic-equivalent MILP over investments and every operation LP."""
    mp = build_master(instance, gap_tol, method)
    sps = SubproblemSet(instance, method)
    n_x = mp.n_x
    n_total = n_x + sum(op.lp.n_vars for op in sps.templates.values())
    if n_total > max_vars:
        raise SizeGuardError(f"extensive form has {n_total} variables, limit {max_vars}")

    scale = mp.scale  # same cost units as the master
    c_parts = [mp.c[:n_x] / scale]
    lb_parts = [mp.lb[:n_x]]
    ub_parts = [mp.ub[:n_x]]
    base = mp.base_A[:, :n_x]
    blocks_A = [[base] + [None] * len(sps.templates)]
    rhs_parts = [mp.base_rhs]
    sense_parts = [np.array([LE] * base.shape[0], dtype=object)]
    for pos, ((m, b), op) in enumerate(sps.templates.items()):
        lp = op.lp
        prob = instance.tree_nodes[m].probability
        c_parts.append(prob * lp.c / scale)
        lb_parts.append(lp.lb)
        ub_parts.append(lp.ub)
        # a.y <= const + k*(c0 + D x)  ->  a.y - k*D x <= const + k*c0
        coup = sp.lil_matrix((lp.n_rows, n_x))
        D = op.cmap.D.tocsr()
        for r, item, k in zip(op.param_rows, op.param_item, op.param_scale):
            row = D.getrow(item)
            for j, v in zip(row.indices, row.data):
                coup[r, j] -= k * v
        row_blocks = [coup.tocsr()] + [None] * len(sps.templates)
        row_blocks[pos + 1] = lp.A
        blocks_A.append(row_blocks)
        rhs_parts.append(op.rhs_for_items(op.cmap.const))
        sense_parts.append(lp.sense)
    A = sp.bmat(blocks_A, format="csr")
    lp = LinearProgram(np.concatenate(c_parts), A, np.concatenate(sense_parts), np.concatenate(rhs_parts),
                       np.concatenate(lb_parts), np.concatenate(ub_parts))
    sol = solve_mip(MixedIntegerProgram(lp, mp.binaries), gap_tol, method)
    if sol.x is None:
        raise RuntimeError(f"extensive form returned status {sol.status}")
    full_c = np.concatenate(c_parts) * scale
    return ExtensiveSolution(sol, sol.x[:n_x].copy(), float(full_c @ sol.x))


# ---------------------------------------------------------------------------
# trace files

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _comment_line(metadata: dict | None) -> str | None:
    if not metadata:
        return None
    return "# " + json.dumps(metadata, sort_keys=True, separators=(",", ":")) + "\n"


def read_comment(path: str | Path) -> dict:
    """Metadata stored in a leading ``# {json}`` line ({} when absent)."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("# "):
        try:
            return json.loads(first[2:])
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed metadata line") from exc
    return {}


def _data_lines(fh):
    return (line for line in fh if not line.startswith("#"))


def write_trace(trace: RunTrace, path: str | Path, include_timing: bool = True, metadata: dict | None = None):
    ml = any(r.cascade_index is not None or r.cpi_active is not None for r in trace.records)
    cols = BASE_COLUMNS + (ML_COLUMNS if ml else [])
    if not include_timing:
        cols = [c for c in cols if c not in TIMING_COLUMNS]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        head = _comment_line(metadata)
        if head:
            fh.write(head)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in trace.records:
            w.writerow([_fmt(getattr(r, c)) for c in cols])


def write_timing(trace: RunTrace, path: str | Path):
    """Wall-clock columns only, kept apart from the reproducible trace."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", *TIMING_COLUMNS])
        for r in trace.records:
            w.writerow([r.k, repr(r.mp_seconds), repr(r.sp_seconds)])


def read_trace(path: str | Path, method: str = "") -> RunTrace:
    trace = RunTrace(method or read_comment(path).get("method", ""))
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(_data_lines(fh)):
            def num(name, conv=float):
                v = row.get(name, "")
                return None if v in ("", None) else conv(v)
            try:
                trace.records.append(IterationRecord(
                    int(row["k"]), float(row["lb"]), float(row["ub"]), float(row["best_ub"]), float(row["gap"]),
                    int(row["cuts_generated"]), int(row["cuts_appended"]),
                    num("mp_seconds") or 0.0, num("sp_seconds") or 0.0,
                    num("cascade_index", int), row.get("cpi_active") or None, num("delta_ub")))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: malformed trace row {row!r}") from exc
    return trace


def merge_timing(trace: RunTrace, path: str | Path):
    """Fill the timing fields of ``trace`` from a file written by :func:`write_timing`."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = {int(r["k"]): r for r in csv.DictReader(fh)}
    for rec in trace.records:
        if rec.k in rows:
            rec.mp_seconds = float(rows[rec.k]["mp_seconds"])
            rec.sp_seconds = float(rows[rec.k]["sp_seconds"])
