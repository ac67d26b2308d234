"""Cut performance sampling, threshold ladders, features and labeled datasets.

Sampling runs an ordinary multicut Benders loop but, at each iteration k > 1,
first re-solves the master once per cut of iteration k-1 (with that cut on
top of the pool through k-2) to measure how much the cut alone lifts the
lower bound.  The upper-bound metric is shared by all cuts of an iteration.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .benders import EPS_BD, N_BD, BendersState
from .instance import Instance
from .master import MasterSolution, solve_master
from .subproblem import CutData

LB, UB = "LB", "UB"
CPIS = (LB, UB)
N_ZETA = 10
N_S = 20
DATASET_SCHEMA = 1

LB_FEATURES = ("k", "cut_violation", "delta_sp_objective", "delta_duals_l2", "delta_x_continuous_l1",
               "delta_curtailment")
UB_FEATURES = ("k", "cut_violation", "sp_objective", "delta_x_l1", "curtailment")
# evaluated during the feature study but not used by default
DEBUG_FEATURES = ("origin_m", "origin_b", "duals_l2", "raw_sp_objective", "delta_x_binary_l1")


class DegenerateLadderError(ValueError):
    pass


def cpm_lb(lb_before: float, lb_after: float) -> float:
    """Relative lower-bound improvement attributed to a cut."""
    if not lb_after > 0:
        raise ValueError(f"lb_after must be > 0, got {lb_after!r}")
    return (lb_after - lb_before) / lb_after


def cpm_ub(ub_before: float, ub_after: float) -> float:
    """Relative upper-bound change; negative means improvement."""
    if not ub_after > 0:
        raise ValueError(f"ub_after must be > 0, got {ub_after!r}")
    return (ub_after - ub_before) / ub_after


# ---------------------------------------------------------------------------
# features

class FeatureExtractor:
    """Per-cut feature vectors; remembers the previous record of every origin."""

    def __init__(self, continuous_mask: np.ndarray, debug: bool = False):
        self.continuous = np.asarray(continuous_mask, dtype=bool)
        self.debug = debug
        self.prev: dict[tuple[int, int], CutData] = {}
        self.prev_x: np.ndarray | None = None

    @property
    def lb_names(self) -> tuple[str, ...]:
        return LB_FEATURES + (DEBUG_FEATURES if self.debug else ())

    @property
    def ub_names(self) -> tuple[str, ...]:
        return UB_FEATURES + (DEBUG_FEATURES if self.debug else ())

    def extract(self, k: int, cuts: Sequence[CutData], ms: MasterSolution, alpha_pos
                ) -> tuple[np.ndarray, np.ndarray]:
        """Feature rows for ``cuts`` generated at iteration ``k`` from master solution ``ms``.

        ``alpha_pos(m, b)`` gives the position of alpha[m,b] in ``ms.alpha``.
        """
        x = ms.x
        dx = np.zeros_like(x) if self.prev_x is None else x - self.prev_x
        dx_all = float(np.abs(dx).sum())
        dx_cont = float(np.abs(dx[self.continuous]).sum())
        dx_bin = float(np.abs(dx[~self.continuous]).sum())
        lb_rows, ub_rows = [], []
        for cut in cuts:
            viol = cut.value(x) - float(ms.alpha[alpha_pos(cut.m, cut.b)])
            old = self.prev.get(cut.origin)
            if old is None:
                d_psi = d_lam = d_y = 0.0
            else:
                d_psi = cut.sp_objective - old.sp_objective
                d_lam = float(np.linalg.norm(cut.duals - old.duals))
                d_y = cut.curtailment - old.curtailment
            lb = [float(k), viol, d_psi, d_lam, dx_cont, d_y]
            ub = [float(k), viol, cut.sp_objective, dx_all, cut.curtailment]
            if self.debug:
                extra = [float(cut.m), float(cut.b), float(np.linalg.norm(cut.duals)), cut.sp_objective, dx_bin]
                lb += extra
                ub += extra
            lb_rows.append(lb)
            ub_rows.append(ub)
        for cut in cuts:
            self.prev[cut.origin] = cut
        self.prev_x = x.copy()
        return (np.array(lb_rows, dtype=float).reshape(len(cuts), len(self.lb_names)),
                np.array(ub_rows, dtype=float).reshape(len(cuts), len(self.ub_names)))


# ---------------------------------------------------------------------------
# sampling

@dataclass
class CpmSample:
    m: int
    b: int
    k: int  # iteration that generated the cut
    lb_features: np.ndarray
    ub_features: np.ndarray
    cpm_lb: float | None = None
    cpm_ub: float | None = None

    def cpm(self, cpi: str) -> float | None:
        return self.cpm_lb if cpi == LB else self.cpm_ub


class SamplingState(BendersState):
    """Benders run that measures per-cut bound improvements as it goes."""

    def __init__(self, instance: Instance, eps_bd: float = EPS_BD, n_bd: int = N_BD,
                 method: str = "highs", debug_features: bool = False, gap_tol: float = 1e-9):
        super().__init__(instance, eps_bd, n_bd, method, selector=self._record, gap_tol=gap_tol,
                         method_tag="sample")
        self.features = FeatureExtractor(self.mp.layout.continuous_mask(), debug_features)
        self.samples: list[CpmSample] = []
        self._pending: list[CpmSample] = []  # samples of the latest iteration
        self.mp_solves: list[int] = []
        self.iterations_sampled = 0

    def _record(self, k, cuts, ms, trace):
        lb_f, ub_f = self.features.extract(k, cuts, ms, self.mp.pair_index)
        self._pending = [CpmSample(c.m, c.b, k, lb_f[i], ub_f[i]) for i, c in enumerate(cuts)]
        return cuts, {}

    def pre_master(self):
        k = self.k
        if k < 2:
            self.mp_solves.append(1)
            return
        base = self.pool_marks[k - 2]
        lb_prev = self.trace.records[-1].lb
        tol = 10 * self.mp.gap_tol * max(abs(lb_prev), 1.0)
        for cut, smp in zip(self.last_cuts, self._pending):
            psi = solve_master(self.mp, [cut], pool_size=base).objective
            if lb_prev - tol < psi < lb_prev:
                # nested relaxations: a dip within solver tolerance is noise
                psi = lb_prev
            smp.cpm_lb = 0.0 if psi <= 0 and lb_prev <= 0 else cpm_lb(lb_prev, psi)
        self.mp_solves.append(len(self.last_cuts) + 1)

    def step(self):
        prev = self._pending
        rec = super().step()
        if len(self.trace.records) >= 2:
            ub_prev = self.trace.records[-2].ub
            value = cpm_ub(ub_prev, rec.ub)
            for smp in prev:
                smp.cpm_ub = value
            self.samples.extend(prev)
        self.iterations_sampled += 1
        return rec


def sample_modified_mbd(instance: Instance, n_s: int = N_S, state: SamplingState | None = None,
                        **kwargs) -> tuple[list[CpmSample], SamplingState]:
    """Run ``n_s`` more sampling iterations; returns every completed sample so far and the state."""
    if n_s < 1:
        raise ValueError("n_s must be >= 1")
    state = state or SamplingState(instance, **kwargs)
    for _ in range(n_s):
        if state.done:
            break
        state.step()
    return list(state.samples), state


# ---------------------------------------------------------------------------
# ladders and labels

@dataclass(frozen=True)
class ThresholdLadder:
    cpi: str
    thetas: tuple[float, ...]  # strictest first

    @property
    def n(self) -> int:
        return len(self.thetas)

    def label(self, cpm: float, i: int) -> int:
        """Label of a cut with metric ``cpm`` under threshold ``i`` (1-based)."""
        theta = self.thetas[i - 1]
        return int(cpm >= theta) if self.cpi == LB else int(cpm <= theta)


def derive_thresholds(samples: Sequence, cpi: str, n_zeta: int = N_ZETA) -> ThresholdLadder:
    """Uniform ladder between the observed extremes of the metric.

    ``samples`` holds :class:`CpmSample` objects or plain metric values.
    """
    if cpi not in CPIS:
        raise ValueError(f"unknown CPI {cpi!r}")
    if n_zeta < 2:
        raise ValueError("a ladder needs at least two thresholds")
    vals = np.array([s.cpm(cpi) if isinstance(s, CpmSample) else s for s in samples], dtype=object)
    vals = np.array([v for v in vals if v is not None], dtype=float)
    if vals.size == 0 or np.unique(vals).size < 2:
        raise DegenerateLadderError(f"{cpi} metrics are degenerate ({np.unique(vals).size} distinct "
                                    "values); sample more iterations")
    lo, hi = float(vals.min()), float(vals.max())
    if cpi == LB:
        step = (hi - lo) / (n_zeta + 1)
        thetas = tuple(lo + (n_zeta + 1 - i) * step for i in range(1, n_zeta + 1))
    else:
        if not lo < 0:
            raise DegenerateLadderError("no upper-bound improvement observed; sample more iterations")
        grid = [lo + (i - 1) * (0.0 - lo) / (n_zeta - 1) for i in range(1, n_zeta + 1)]
        grid[-1] = 0.0  # inclusive end, free of rounding
        thetas = tuple(grid)
    return ThresholdLadder(cpi, thetas)


@dataclass
class LabeledDataset:
    cpi: str
    index: int  # 1-based threshold index
    threshold: float
    feature_names: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray

    @property
    def n_rows(self) -> int:
        return int(self.y.size)

    def counts(self) -> tuple[int, int]:
        pos = int(self.y.sum())
        return self.n_rows - pos, pos


def label_datasets(samples: Sequence[CpmSample], ladder: ThresholdLadder,
                   feature_names: Sequence[str] | None = None) -> list[LabeledDataset]:
    cpi = ladder.cpi
    rows = [s for s in samples if s.cpm(cpi) is not None]
    names = tuple(feature_names or (LB_FEATURES if cpi == LB else UB_FEATURES))
    width = len(names)
    X = np.array([(s.lb_features if cpi == LB else s.ub_features)[:width] for s in rows],
                 dtype=float).reshape(len(rows), width)
    cpm = np.array([s.cpm(cpi) for s in rows], dtype=float)
    out = []
    for i, theta in enumerate(ladder.thetas, start=1):
        y = (cpm >= theta) if cpi == LB else (cpm <= theta)
        out.append(LabeledDataset(cpi, i, theta, names, X.copy(), y.astype(int)))
    return out


# ---------------------------------------------------------------------------
# dataset files

def dataset_filename(cpi: str, i: int) -> str:
    return f"theta_{cpi.lower()}_{i}.csv"


def write_datasets(datasets: Sequence[LabeledDataset], ladder: ThresholdLadder, out_dir: str | Path,
                   metadata: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for ds in datasets:
        with open(out / dataset_filename(ds.cpi, ds.index), "w", newline="", encoding="utf-8") as fh:
            head = {"schema": DATASET_SCHEMA, "cpi": ds.cpi, "index": ds.index, "threshold": ds.threshold}
            head.update(metadata or {})
            fh.write("# " + json.dumps(head, sort_keys=True, separators=(",", ":")) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(ds.feature_names) + ["label"])
            for row, lab in zip(ds.X, ds.y):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])
    meta = {"schema": DATASET_SCHEMA, "cpi": ladder.cpi, "ladder": list(ladder.thetas),
            "feature_names": list(datasets[0].feature_names) if datasets else []}
    meta.update(metadata or {})
    (out / f"datasets_{ladder.cpi.lower()}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n",
                                                            encoding="utf-8")


def read_datasets(out_dir: str | Path, cpi: str) -> tuple[list[LabeledDataset], ThresholdLadder, dict]:
    out = Path(out_dir)
    meta_path = out / f"datasets_{cpi.lower()}.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read dataset metadata {meta_path}: {exc}") from exc
    if meta.get("schema") != DATASET_SCHEMA:
        raise ValueError(f"{meta_path}: unsupported dataset schema {meta.get('schema')!r}")
    ladder = ThresholdLadder(cpi, tuple(float(t) for t in meta["ladder"]))
    datasets = []
    for i, theta in enumerate(ladder.thetas, start=1):
        with open(out / dataset_filename(cpi, i), newline="", encoding="utf-8") as fh:
            reader = csv.reader(line for line in fh if not line.startswith("#"))
            header = next(reader, None)
            rows = [r for r in reader]
        if not header or header[-1] != "label":
            raise ValueError(f"{dataset_filename(cpi, i)}: missing header")
        X = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=float).reshape(len(rows), len(header) - 1)
        y = np.array([int(r[-1]) for r in rows], dtype=int)
        datasets.append(LabeledDataset(cpi, i, theta, tuple(header[:-1]), X, y))
    return datasets, ladder, meta


def class_balance(datasets: Sequence[LabeledDataset]) -> list[tuple[int, int]]:
    return [ds.counts() for ds in datasets]
