"""Multicut Benders with classifier-filtered cut appending.

After each iteration's subproblems are solved, the new cuts are run through
a cascade of classifiers ordered from strictest to loosest.  The first
classifier that marks at least one cut as effective decides which cuts are
appended; if none does, every cut is appended as in plain multicut Benders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .benders import EPS_BD, N_BD, BendersState, RunTrace
from .cutml import LB, UB, FeatureExtractor, cpm_ub
from .forest import ClassifierEnsemble
from .instance import Instance
from .subproblem import CutData

VARIANTS = ("L", "U", "C")
EPS_UB = 0.002
WINDOW = 10
FALLBACK = -1


@dataclass
class MlMbdConfig:
    variant: str
    eps_bd: float = EPS_BD
    n_bd: int = N_BD
    eps_ub: float = EPS_UB
    window: int = WINDOW
    ensembles: dict = field(default_factory=dict)  # CPI tag -> ClassifierEnsemble
    method: str = "highs"
    parallel_sp: bool = False

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        need = {"L": (LB,), "U": (UB,), "C": (LB, UB)}[self.variant]
        for cpi in need:
            if cpi not in self.ensembles:
                raise ValueError(f"variant {self.variant} requires a {cpi} ensemble")
            if self.ensembles[cpi].cpi != cpi:
                raise ValueError(f"ensemble given for {cpi} was trained for {self.ensembles[cpi].cpi}")
        if not self.eps_ub >= 0:
            raise ValueError("eps_ub must be >= 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass
class CascadeDecision:
    iteration: int
    index: int  # 1-based classifier position, or FALLBACK
    labels: np.ndarray
    kept: int
    discarded: int


def cascade_select(classifiers: Sequence, features: np.ndarray, iteration: int = 0
                   ) -> tuple[np.ndarray, CascadeDecision]:
    """Mask of cuts to append and the decision record.

    ``classifiers`` is a :class:`ClassifierEnsemble` or a sequence of objects
    with ``predict``.
    """
    if isinstance(classifiers, ClassifierEnsemble):
        classifiers = classifiers.classifiers()
    n = features.shape[0]
    for i, clf in enumerate(classifiers, start=1):
        labels = np.asarray(clf.predict(features), dtype=int)
        if labels.any():
            keep = labels.astype(bool)
            return keep, CascadeDecision(iteration, i, labels, int(keep.sum()), n - int(keep.sum()))
    return np.ones(n, dtype=bool), CascadeDecision(iteration, FALLBACK, np.zeros(n, dtype=int), n, 0)


def iteration_cpm_ub(trace: RunTrace) -> list[float]:
    """Per-iteration upper-bound metric for iterations 2..K of ``trace``."""
    ubs = [r.ub for r in trace.records]
    return [cpm_ub(a, b) for a, b in zip(ubs, ubs[1:])]


def delta_ub(trace: RunTrace | Sequence[float], window: int = WINDOW) -> float:
    """Mean upper-bound metric over the trailing ``window`` iterations (fewer if unavailable).

    Accepts a trace or the per-iteration metric series itself; with no metric
    available yet the result is +inf.
    """
    vals = iteration_cpm_ub(trace) if isinstance(trace, RunTrace) else list(trace)
    if not vals:
        return math.inf
    tail = vals[-window:]
    return float(np.mean(tail))


class _CascadeFilter:
    def __init__(self, config: MlMbdConfig):
        self.config = config
        self.cpi = LB if config.variant == "L" else UB
        self.switch_iteration: int | None = None
        self.decisions: list[CascadeDecision] = []
        self.state: BendersState | None = None
        self.features: FeatureExtractor | None = None

    def __call__(self, k: int, cuts: list[CutData], ms, trace: RunTrace):
        cfg = self.config
        lb_f, ub_f = self.features.extract(k, cuts, ms, self.state.mp.pair_index)
        d = math.inf
        if cfg.variant == "C":
            # the upper bound of the iteration in progress is already known here
            ubs = [r.ub for r in trace.records] + [self.state.current_ub]
            d = delta_ub([cpm_ub(a, b) for a, b in zip(ubs, ubs[1:])], cfg.window)
            if self.cpi == UB and abs(d) < cfg.eps_ub:
                self.cpi = LB
                self.switch_iteration = k
        X = lb_f if self.cpi == LB else ub_f
        keep, dec = cascade_select(cfg.ensembles[self.cpi], X, k)
        chosen = [c for c, kp in zip(cuts, keep) if kp]
        mp = self.state.mp
        if all(mp.is_duplicate(c) for c in chosen):
            # kept cuts add nothing new; append the rest so the run keeps moving
            chosen = list(cuts)
        self.decisions.append(dec)
        extra = {"cascade_index": dec.index, "cpi_active": self.cpi,
                 "delta_ub": None if cfg.variant != "C" or math.isinf(d) else d}
        return chosen, extra


def mlmbd_solve(instance: Instance, config: MlMbdConfig) -> RunTrace:
    """ML-filtered multicut Benders; the trace records every cascade decision."""
    filt = _CascadeFilter(config)
    tag = f"ml-mbd-{config.variant.lower()}"
    state = BendersState(instance, config.eps_bd, config.n_bd, config.method, config.parallel_sp,
                         method_tag=tag, selector=filt)
    filt.state = state
    filt.features = FeatureExtractor(state.mp.layout.continuous_mask())
    for cpi, ens in config.ensembles.items():
        if ens.width != len(filt.features.lb_names if cpi == LB else filt.features.ub_names):
            raise ValueError(f"{cpi} ensemble expects {ens.width} features")
    trace = state.run()
    trace.switch_iteration = filt.switch_iteration
    trace.decisions = filt.decisions
    return trace
