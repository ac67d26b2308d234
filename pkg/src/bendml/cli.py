"""Command-line front door: sampling, training, solving, oracle and reports.

Every file written here carries a schema number and a ``producer`` record
(command, package version, instance name and content hash, numeric knobs).
Nothing time-dependent goes into those files; wall-clock timings are kept in
separate ``timing_*.csv`` files so the other artifacts are reproducible.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import __version__
from .benders import (EPS_BD, N_BD, RunTrace, SizeGuardError, extensive_form, mbd_solve, merge_timing,
                      read_comment, read_trace, write_timing, write_trace)
from .cases import BUNDLED, bundled_path
from .cutml import (CPIS, LB, N_S, N_ZETA, UB, DegenerateLadderError, derive_thresholds, label_datasets,
                    read_datasets, sample_modified_mbd, write_datasets)
from .forest import GATE, ForestParams, GateFailure, load_ensemble, save_ensemble, train_ensemble
from .instance import Instance, InstanceError, dumps, load_instance
from .mlmbd import EPS_UB, WINDOW, MlMbdConfig, mlmbd_solve
from .subproblem import InvestmentVector, investment_layout

log = logging.getLogger("bendml")

SOLUTION_SCHEMA = 1
REPORT_SCHEMA = 1

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_INSTANCE = 3
EXIT_GATE = 4
EXIT_NOT_CONVERGED = 5
EXIT_ARTIFACT = 6
EXIT_SIZE = 7


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers

def resolve_instance(source: str) -> Instance:
    """Load a JSON instance file, or a bundled instance by file name or stem."""
    path = Path(source)
    if not path.exists():
        names = {n: n for n in BUNDLED} | {Path(n).stem: n for n in BUNDLED}
        if source in names:
            path = bundled_path(names[source])
    try:
        return load_instance(path)
    except OSError as exc:
        raise CliError(EXIT_INSTANCE, f"cannot read instance {source}: {exc.strerror or exc}") from exc
    except InstanceError as exc:
        raise CliError(EXIT_INSTANCE, f"invalid instance {source}: {exc}") from exc


def instance_digest(instance: Instance) -> str:
    return hashlib.sha256(dumps(instance).encode("utf-8")).hexdigest()


def producer(mode: str, instance: Instance | None, params: dict) -> dict:
    rec = {"command": mode, "version": __version__, "params": params}
    if instance is not None:
        rec["instance"] = instance.name
        rec["instance_sha256"] = instance_digest(instance)
    return rec


def write_json(path: Path, data: dict):
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def forest_params(args) -> ForestParams:
    return ForestParams(args.n_trees, args.max_depth, args.max_features, args.min_leaf)


def _finite(v: float):
    return v if math.isfinite(v) else None


def solution_record(instance: Instance, trace: RunTrace, prod: dict) -> dict:
    layout = investment_layout(instance)
    inv = InvestmentVector.from_flat(layout, trace.x)
    nodes = []
    for m in range(layout.n_nodes):
        nodes.append({
            "node": m,
            "lines_built": [layout.line_ids[i] for i in range(layout.n_lines) if inv.line_build[m, i] > 0.5],
            "line_added_mw": {str(layout.line_ids[i]): float(inv.line_added[m, i])
                              for i in range(layout.n_lines) if inv.line_added[m, i] > 1e-9},
            "storage_built": [s.id for j, s in enumerate(instance.storage_candidates) if inv.bes_build[m, j] > 0.5],
            "storage_power_mw": {str(s.id): float(inv.bes_power[m, j])
                                 for j, s in enumerate(instance.storage_candidates) if inv.bes_power[m, j] > 1e-9},
        })
    return {"schema": SOLUTION_SCHEMA, "kind": "solution", "producer": prod, "method": trace.method,
            "reason": trace.reason, "iterations": trace.iterations, "total_cuts": trace.total_cuts,
            "objective": _finite(trace.objective), "lower_bound": trace.lb, "gap": _finite(trace.gap),
            "switch_iteration": trace.switch_iteration, "investments": nodes,
            "x": [float(v) for v in trace.x]}


def save_run(out: Path, instance: Instance, trace: RunTrace, prod: dict):
    meta = {"schema": SOLUTION_SCHEMA, "kind": "trace", "method": trace.method, "reason": trace.reason,
            "producer": prod}
    write_trace(trace, out / f"trace_{trace.method}.csv", include_timing=False, metadata=meta)
    write_timing(trace, out / f"timing_{trace.method}.csv")
    write_json(out / f"solution_{trace.method}.json", solution_record(instance, trace, prod))


def check_converged(trace: RunTrace):
    if trace.reason != "converged":
        raise CliError(EXIT_NOT_CONVERGED, f"{trace.method} stopped without converging ({trace.reason}) "
                                           f"after {trace.iterations} iterations, gap {trace.gap:.4g}")


# ---------------------------------------------------------------------------
# commands

def _sample_params(args) -> dict:
    return {"n_s": args.n_s, "n_zeta": args.n_zeta, "eps_bd": args.eps_bd, "n_bd": args.n_bd}


def _write_round(out: Path, samples, cpis, n_zeta: int, prod: dict) -> dict:
    """Label and write datasets for every CPI whose ladder can be derived."""
    labeled = {}
    for cpi in cpis:
        try:
            ladder = derive_thresholds(samples, cpi, n_zeta)
        except DegenerateLadderError as exc:
            log.warning("%s", exc)
            continue
        ds = label_datasets(samples, ladder)
        write_datasets(ds, ladder, out, {"producer": prod, "samples": len(ds[0].y)})
        labeled[cpi] = (ds, ladder)
    return labeled


def cmd_sample(args) -> int:
    inst = resolve_instance(args.instance)
    out = Path(args.out)
    prod = producer("sample", inst, _sample_params(args))
    samples, state = sample_modified_mbd(inst, args.n_s, eps_bd=args.eps_bd, n_bd=args.n_bd, method=args.lp_backend)
    labeled = _write_round(out / "datasets", samples, _cpis(args), args.n_zeta, prod)
    write_trace(state.trace, out / "trace_sample.csv", include_timing=False,
                metadata={"schema": SOLUTION_SCHEMA, "kind": "trace", "method": "sample", "producer": prod})
    print(f"sampled {state.k} iterations, {len(samples)} cuts; datasets for {', '.join(labeled) or 'none'}")
    if not labeled:
        raise CliError(EXIT_GATE, "metrics are degenerate for every CPI, resume sampling")
    return EXIT_OK


def _cpis(args) -> tuple[str, ...]:
    return CPIS if args.cpi == "both" else (args.cpi.upper(),)


def _train_once(labeled: dict, args, metrics_rows: list, round_no: int) -> dict:
    models = {}
    for cpi, (ds, ladder) in labeled.items():
        res = train_ensemble(ds, ladder, args.gate_roc, args.gate_pr, args.seed, forest_params(args))
        if isinstance(res, GateFailure):
            log.warning("%s gate failed: %s", cpi, res.reason)
            for i, (roc, pr) in sorted(res.metrics.items()):
                metrics_rows.append([round_no, cpi, i, repr(ds[i - 1].threshold), ds[i - 1].n_rows,
                                     int(ds[i - 1].y.sum()), repr(roc), repr(pr), "fail"])
            continue
        for t in res.members:
            metrics_rows.append([round_no, cpi, t.index, repr(t.threshold), ds[t.index - 1].n_rows,
                                 int(ds[t.index - 1].y.sum()), repr(t.roc_auc), repr(t.pr_auc), "pass"])
        models[cpi] = res
    return models


def _write_metrics(out: Path, rows: list, prod: dict):
    with open(out / "train_metrics.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + json.dumps({"schema": REPORT_SCHEMA, "kind": "train-metrics", "producer": prod},
                                   sort_keys=True, separators=(",", ":")) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "cpi", "index", "threshold", "rows", "positives", "roc_auc", "pr_auc", "gate"])
        w.writerows(rows)


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows: list = []
    wanted = _cpis(args)
    train_params = {"seed": args.seed, "gate_roc": args.gate_roc, "gate_pr": args.gate_pr,
                    "forest": vars(forest_params(args))}
    if args.datasets:
        prod = producer("train", None, train_params | {"datasets": Path(args.datasets).name})
        labeled = {}
        for cpi in wanted:
            try:
                ds, ladder, _ = read_datasets(args.datasets, cpi)
            except (OSError, ValueError) as exc:
                raise CliError(EXIT_ARTIFACT, f"cannot load {cpi} datasets: {exc}") from exc
            labeled[cpi] = (ds, ladder)
        models = _train_once(labeled, args, rows, 1)
    else:
        if not args.instance:
            raise CliError(EXIT_USAGE, "train needs --instance or --datasets")
        inst = resolve_instance(args.instance)
        prod = producer("train", inst, train_params | _sample_params(args))
        models, state, round_no = {}, None, 0
        while True:
            round_no += 1
            samples, state = sample_modified_mbd(inst, args.n_s, state, eps_bd=args.eps_bd, n_bd=args.n_bd,
                                                 method=args.lp_backend)
            todo = [c for c in wanted if c not in models]
            labeled = _write_round(out / "datasets", samples, todo, args.n_zeta, prod)
            models.update(_train_once(labeled, args, rows, round_no))
            if all(c in models for c in wanted):
                break
            if state.done or (args.max_rounds and round_no >= args.max_rounds):
                break
            log.info("round %d: gate not passed for %s, resuming sampling", round_no,
                     [c for c in wanted if c not in models])
    for cpi, ens in models.items():
        save_ensemble(ens, out / f"model_{cpi.lower()}.json", prod)
    _write_metrics(out, rows, prod)
    missing = [c for c in wanted if c not in models]
    if missing:
        raise CliError(EXIT_GATE, f"gate failed for {', '.join(missing)}, resume sampling")
    print(f"trained {', '.join(f'{c} ({models[c].ladder.n} classifiers)' for c in wanted)}")
    return EXIT_OK


def cmd_solve_mbd(args) -> int:
    inst = resolve_instance(args.instance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prod = producer("solve-mbd", inst, {"eps_bd": args.eps_bd, "n_bd": args.n_bd})
    trace = mbd_solve(inst, args.eps_bd, args.n_bd, args.lp_backend, args.parallel_sp)
    save_run(out, inst, trace, prod)
    print(f"{trace.method}: {trace.reason} after {trace.iterations} iterations, cost {trace.objective:.6g}, "
          f"gap {trace.gap:.4g}, {trace.total_cuts} cuts")
    check_converged(trace)
    return EXIT_OK


def _load_models(paths) -> dict:
    models = {}
    for p in paths or []:
        try:
            ens = load_ensemble(p)
        except ValueError as exc:
            raise CliError(EXIT_ARTIFACT, str(exc)) from exc
        if ens.cpi in models:
            raise CliError(EXIT_USAGE, f"two models given for {ens.cpi}")
        models[ens.cpi] = ens
    return models


def cmd_solve_ml(args) -> int:
    variant = (args.variant or "").upper()
    if variant not in ("L", "U", "C"):
        raise CliError(EXIT_USAGE, "solve-ml needs --variant l, u or c")
    inst = resolve_instance(args.instance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = _load_models(args.model)
    need = {"L": (LB,), "U": (UB,), "C": (LB, UB)}[variant]
    missing = [c for c in need if c not in models]
    if missing:
        raise CliError(EXIT_USAGE, f"variant {variant} needs a model for {', '.join(missing)}")
    try:
        cfg = MlMbdConfig(variant, args.eps_bd, args.n_bd, args.eps_ub, args.window,
                          {c: models[c] for c in need}, args.lp_backend, args.parallel_sp)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    models_meta = {c: models[c].width for c in need}
    prod = producer(f"solve-ml-{variant.lower()}", inst,
                    {"eps_bd": args.eps_bd, "n_bd": args.n_bd, "eps_ub": args.eps_ub, "window": args.window,
                     "model_widths": models_meta})
    try:
        trace = mlmbd_solve(inst, cfg)
    except ValueError as exc:
        if "features" in str(exc):
            raise CliError(EXIT_ARTIFACT, str(exc)) from exc
        raise
    save_run(out, inst, trace, prod)
    extra = f", CPI switch at {trace.switch_iteration}" if trace.switch_iteration else ""
    print(f"{trace.method}: {trace.reason} after {trace.iterations} iterations, cost {trace.objective:.6g}, "
          f"gap {trace.gap:.4g}, {trace.total_cuts} cuts{extra}")
    check_converged(trace)
    return EXIT_OK


def cmd_oracle(args) -> int:
    inst = resolve_instance(args.instance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        sol = extensive_form(inst, args.max_vars, method=args.lp_backend)
    except SizeGuardError as exc:
        raise CliError(EXIT_SIZE, str(exc)) from exc
    prod = producer("oracle", inst, {"max_vars": args.max_vars})
    write_json(out / "oracle.json", {"schema": SOLUTION_SCHEMA, "kind": "oracle", "producer": prod,
                                     "objective": sol.objective, "mip_gap": sol.mip.gap,
                                     "x": [float(v) for v in sol.x]})
    print(f"extensive form optimum {sol.objective:.6g}")
    return EXIT_OK


REPORT_COLUMNS = ["method", "iterations", "total_cuts", "cut_reduction_pct", "gap", "best_lb", "best_ub",
                  "mean_mp_seconds", "reason"]


def report_rows(traces: list[RunTrace], reference: str = "mbd") -> list[list]:
    """One summary row per trace; cut reduction is relative to the ``reference`` method."""
    ref = next((t for t in traces if t.method == reference), traces[0] if traces else None)
    rows = []
    for t in traces:
        last = t.records[-1] if t.records else None
        red = None
        if ref is not None and ref.total_cuts > 0:
            red = 100.0 * (1.0 - t.total_cuts / ref.total_cuts)
        rows.append([t.method, t.iterations, t.total_cuts, red, last.gap if last else None,
                     max((r.lb for r in t.records), default=None), last.best_ub if last else None,
                     t.mean_mp_seconds(), t.reason])
    return rows


def cmd_report(args) -> int:
    paths = list(args.traces or [])
    if not paths:
        raise CliError(EXIT_USAGE, "report needs at least one trace file")
    traces = []
    for p in paths:
        p = Path(p)
        try:
            meta = read_comment(p)
            t = read_trace(p, meta.get("method") or p.stem.removeprefix("trace_"))
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(EXIT_ARTIFACT, f"cannot load trace {p}: {exc}") from exc
        timing = p.with_name(p.name.replace("trace_", "timing_", 1))
        if timing != p and timing.exists():
            merge_timing(t, timing)
        t.reason = meta.get("reason", "")
        traces.append(t)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = report_rows(traces, args.reference)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
    for r in rows:
        red = "" if r[3] is None else f", {r[3]:.1f}% fewer cuts"
        print(f"{r[0]}: {r[1]} iterations, {r[2]} cuts{red}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

COMMANDS = {"sample": cmd_sample, "train": cmd_train, "solve-mbd": cmd_solve_mbd, "solve-ml": cmd_solve_ml,
            "oracle": cmd_oracle, "report": cmd_report}
ALIASES = {"solve-ml-l": "l", "solve-ml-u": "u", "solve-ml-c": "c"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bendml", description="Multicut Benders with learned cut filtering.")
    p.add_argument("mode", choices=sorted(COMMANDS) + sorted(ALIASES))
    p.add_argument("--instance", help="instance JSON file or bundled instance name")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps-bd", type=float, default=EPS_BD)
    p.add_argument("--n-bd", type=int, default=N_BD)
    p.add_argument("--n-s", type=int, default=N_S)
    p.add_argument("--n-zeta", type=int, default=N_ZETA)
    p.add_argument("--gate-roc", type=float, default=GATE)
    p.add_argument("--gate-pr", type=float, default=GATE)
    p.add_argument("--eps-ub", type=float, default=EPS_UB)
    p.add_argument("--window", type=int, default=WINDOW)
    p.add_argument("--model", nargs="+", help="classifier ensemble files (one per CPI)")
    p.add_argument("--variant", help="ML variant for solve-ml: l, u or c")
    p.add_argument("--cpi", default="both", choices=["both", "lb", "ub", "LB", "UB"])
    p.add_argument("--datasets", help="train from datasets written by the sample command")
    p.add_argument("--max-rounds", type=int, default=0, help="cap on sample/train rounds (0: until sampling ends)")
    p.add_argument("--traces", nargs="+", help="trace files for report")
    p.add_argument("--reference", default="mbd", help="method used as the cut-count reference in reports")
    p.add_argument("--max-vars", type=int, default=20_000, help="size guard for the extensive form")
    p.add_argument("--n-trees", type=int, default=ForestParams.n_trees)
    p.add_argument("--max-depth", type=int, default=ForestParams.max_depth)
    p.add_argument("--max-features", type=int, default=None)
    p.add_argument("--min-leaf", type=int, default=ForestParams.min_leaf)
    p.add_argument("--parallel-sp", action="store_true")
    p.add_argument("--lp-backend", default="highs", choices=["highs", "simplex"])
    return p


def _validate(args):
    if args.mode not in ("report", "train") and not args.instance:
        raise CliError(EXIT_USAGE, f"{args.mode} needs --instance")
    if not args.eps_bd > 0:
        raise CliError(EXIT_USAGE, "--eps-bd must be > 0")
    for name in ("n_bd", "n_s", "n_trees", "max_depth", "min_leaf", "window"):
        if getattr(args, name) < 1:
            raise CliError(EXIT_USAGE, f"--{name.replace('_', '-')} must be >= 1")
    if args.n_zeta < 2:
        raise CliError(EXIT_USAGE, "--n-zeta must be >= 2")
    if not (0 <= args.gate_roc <= 1 and 0 <= args.gate_pr <= 1):
        raise CliError(EXIT_USAGE, "gate levels must lie in [0, 1]")


def configure_logging():
    level = os.environ.get("BENDML_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.mode in ALIASES:
        args.variant, args.mode = ALIASES[args.mode], "solve-ml"
    try:
        _validate(args)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.mode](args)
    except CliError as exc:
        print(f"bendml: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        return EXIT_UNEXPECTED
    except Exception as exc:  # last resort: one-line diagnostic
        log.debug("unexpected failure", exc_info=True)
        print(f"bendml: unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
