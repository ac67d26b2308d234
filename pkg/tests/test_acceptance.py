"""End-to-end acceptance checks, one group per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints
one pass/fail line per criterion together with the measured values.
"""

import filecmp
import time

import numpy as np
import pytest

from bendml.benders import evaluate_investment, extensive_form, mbd_solve, relative_gap
from bendml.cases import bundled, random_instance, tiny_instance, two_branch_tree, _blocks_ieee
from bendml.cli import EXIT_OK, main
from bendml.cutml import (LB, LB_FEATURES, N_ZETA, UB, UB_FEATURES, CpmSample, LabeledDataset, ThresholdLadder,
                          cpm_lb, cpm_ub, derive_thresholds, label_datasets, read_datasets)
from bendml.forest import (BinaryClassifier, ClassifierEnsemble, ForestParams, GateFailure, TrainedClassifier,
                           Tree, load_ensemble, train_ensemble, train_forest, undersample)
from bendml.instance import ancestors, replace_blocks, replace_tree
from bendml.mlmbd import FALLBACK, MlMbdConfig, cascade_select, mlmbd_solve
from bendml.subproblem import InvestmentVector, SubproblemSet, investment_layout

pytestmark = pytest.mark.slow

IEEE = "ieee24_7node.json"


def leaf(p):
    return Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([p]))


def constant_ensemble(cpi, names, p):
    thetas = tuple(np.linspace(0.3, 0.1, 3)) if cpi == LB else tuple(np.linspace(-0.2, 0.0, 3))
    ladder = ThresholdLadder(cpi, thetas)
    members = [TrainedClassifier(i, thetas[i - 1], BinaryClassifier([leaf(p)], len(names)), 1.0, 1.0)
               for i in range(1, 4)]
    return ClassifierEnsemble(cpi, ladder, tuple(names), members)


def identity_ensembles(p):
    return {LB: constant_ensemble(LB, LB_FEATURES, p), UB: constant_ensemble(UB, UB_FEATURES, p)}


def random_x(inst, rng):
    """Random investment respecting build-once along every path."""
    lay = investment_layout(inst)
    x = InvestmentVector.zeros(lay)
    lines = [inst.lines[i] for i in lay.line_ids]
    for node in inst.tree_nodes:
        m, above = node.id, ancestors(inst, node.id)[:-1]
        for i, ln in enumerate(lines):
            if rng.random() < 0.4 and not x.line_build[above, i].any():
                x.line_build[m, i] = 1.0
                x.line_added[m, i] = rng.uniform(0, ln.max_added_capacity)
        for j, s in enumerate(inst.storage_candidates):
            if rng.random() < 0.4 and not x.bes_build[above, j].any():
                x.bes_build[m, j] = 1.0
                x.bes_power[m, j] = rng.uniform(0, s.max_power)
    return x.to_flat()


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


def ml(inst, variant, models):
    need = {"L": (LB,), "U": (UB,), "C": (LB, UB)}[variant]
    return mlmbd_solve(inst, MlMbdConfig(variant, ensembles={c: models[c] for c in need}))


def deviation(trace, ref):
    return abs(trace.objective - ref.objective) / ref.objective


# ---------------------------------------------------------------------------
# shared runs

ORACLE_SEEDS = range(6)


@pytest.fixture(scope="module")
def oracle_runs():
    out = []
    for s in ORACLE_SEEDS:
        inst = random_instance(s)
        tr, secs = timed(mbd_solve, inst)
        out.append((inst, tr, secs, extensive_form(inst)))
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    """Sample and train on the reduced IEEE 24-bus case through the command line."""
    out = tmp_path_factory.mktemp("ieee_train")
    code = main(["train", "--instance", "ieee24_7node", "--out", str(out)])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def models(trained_dir):
    return {LB: load_ensemble(trained_dir / "model_lb.json"), UB: load_ensemble(trained_dir / "model_ub.json")}


@pytest.fixture(scope="module")
def ieee_runs(models):
    inst = bundled(IEEE)
    runs = {}
    runs["mbd"], secs = timed(mbd_solve, inst)
    times = {"mbd": secs}
    for v in ("L", "U", "C"):
        runs[v], times[v] = timed(ml, inst, v, models)
    return runs, times


@pytest.fixture(scope="module")
def identity_runs():
    out = []
    for inst in (tiny_instance(), random_instance(0), random_instance(3)):
        ref = mbd_solve(inst)
        for p in (1.0, 0.0):
            ens = identity_ensembles(p)
            for v in ("L", "U", "C"):
                out.append((inst, ref, p, v, mlmbd_solve(inst, MlMbdConfig(v, ensembles=ens))))
    return out


# ---------------------------------------------------------------------------
# 1. oracle equivalence

@pytest.mark.criterion(1)
def test_oracle_envelope(oracle_runs):
    assert len(oracle_runs) >= 5
    for inst, *_ in oracle_runs:
        assert len(inst.buses) <= 6 and len(inst.tree_nodes) <= 7 and len(inst.blocks) <= 2
        assert all(b.steps <= 6 for b in inst.blocks)


@pytest.mark.criterion(1)
@pytest.mark.parametrize("i", range(len(ORACLE_SEEDS)))
def test_oracle_equivalence(oracle_runs, i, note):
    inst, tr, secs, ef = oracle_runs[i]
    dev = abs(tr.objective - ef.objective) / ef.objective
    note(f"{inst.name}: gap {tr.gap:.2e}, dev {100 * dev:.3f}%, {secs:.1f} s")
    assert tr.reason == "converged"
    assert tr.gap <= 0.01
    assert dev <= 0.01
    assert secs <= 60.0


# ---------------------------------------------------------------------------
# 2. solution quality on the reduced IEEE 24-bus case

@pytest.mark.criterion(2)
def test_ieee_shape():
    inst = bundled(IEEE)
    assert (len(inst.buses), len(inst.tree_nodes), len(inst.blocks)) == (24, 7, 2)


@pytest.mark.criterion(2)
@pytest.mark.parametrize("variant", ["L", "C"])
def test_solution_quality(ieee_runs, variant, note):
    runs, times = ieee_runs
    tr, ref = runs[variant], runs["mbd"]
    dev = deviation(tr, ref)
    note(f"ML-MBD-{variant} cost deviation {100 * dev:.3f}% in {times[variant]:.0f} s "
         f"(MBD {times['mbd']:.0f} s)")
    assert tr.reason == "converged" and ref.reason == "converged"
    assert dev <= 0.015
    assert times[variant] <= 600.0 and times["mbd"] <= 600.0


# ---------------------------------------------------------------------------
# 3. cut reduction

@pytest.mark.criterion(3)
def test_cut_reduction_u(ieee_runs, note):
    runs, _ = ieee_runs
    u, ref = runs["U"].total_cuts, runs["mbd"].total_cuts
    note(f"U {u} vs MBD {ref} cuts ({100 * (1 - u / ref):.1f}% fewer)")
    assert u < ref


@pytest.mark.criterion(3)
def test_cut_reduction_c(ieee_runs, note):
    runs, _ = ieee_runs
    c, ref = runs["C"].total_cuts, runs["mbd"].total_cuts
    note(f"C {c} vs MBD {ref} cuts ({100 * (1 - c / ref):.1f}% fewer)")
    assert c <= ref


# ---------------------------------------------------------------------------
# 4. identity filters

@pytest.mark.criterion(4)
def test_identity_filters(identity_runs, note):
    for inst, ref, p, v, tr in identity_runs:
        assert tr.same_trajectory(ref), (inst.name, p, v)
        expected = 1 if p == 1.0 else FALLBACK
        assert all(r.cascade_index == expected for r in tr.records)
        assert [(c.m, c.b, c.k, c.constant) for c in tr.cuts] == [(c.m, c.b, c.k, c.constant) for c in ref.cuts]
    note(f"{len(identity_runs)} runs identical to MBD")


@pytest.mark.criterion(4)
def test_identity_deterministic_and_fast(note):
    inst = random_instance(1)
    ens = identity_ensembles(1.0)
    t0 = time.perf_counter()
    a = mlmbd_solve(inst, MlMbdConfig("C", ensembles=ens))
    b = mlmbd_solve(inst, MlMbdConfig("C", ensembles=ens))
    secs = time.perf_counter() - t0
    note(f"repeat run identical, {secs:.1f} s")
    assert a.same_trajectory(b) and a.same_trajectory(mbd_solve(inst))
    assert secs < 60.0


# ---------------------------------------------------------------------------
# 5. bound properties

def check_bounds(tr, opt=None):
    lbs = [r.lb for r in tr.records]
    bests = [r.best_ub for r in tr.records]
    assert all(b >= a - 1e-6 * abs(a) for a, b in zip(lbs, lbs[1:]))
    assert all(b <= a for a, b in zip(bests, bests[1:]))
    for r in tr.records:
        assert r.best_ub == min(rr.ub for rr in tr.records[: r.k])
        if opt is not None:
            assert r.lb <= opt * (1 + 1e-6)
            assert r.best_ub >= opt * (1 - 1e-6)


@pytest.mark.criterion(5)
def test_bounds_oracle_runs(oracle_runs):
    for inst, tr, _, ef in oracle_runs:
        check_bounds(tr, ef.objective)
        # the reported cost is a fresh evaluation of the incumbent
        assert evaluate_investment(inst, tr.x) == pytest.approx(tr.objective, rel=1e-6)
        assert relative_gap(tr.lb, tr.objective) == pytest.approx(tr.gap)


@pytest.mark.criterion(5)
def test_bounds_ieee_runs(ieee_runs):
    runs, _ = ieee_runs
    for tr in runs.values():
        check_bounds(tr)
    # every run's lower bound is below every run's incumbent cost
    assert max(t.lb for t in runs.values()) <= min(t.objective for t in runs.values()) * (1 + 1e-6)


@pytest.mark.criterion(5)
def test_bounds_identity_runs(identity_runs):
    for *_, tr in identity_runs:
        check_bounds(tr)


@pytest.mark.criterion(5)
def test_cut_validity_pairs(note):
    rng = np.random.default_rng(2024)
    pairs, worst = 0, -np.inf
    seed = 0
    while pairs < 100:
        inst = random_instance(seed)
        sps = SubproblemSet(inst)
        for _ in range(5):
            x0, x1 = random_x(inst, rng), random_x(inst, rng)
            for m, b in list(sps.templates)[:4]:
                cut = sps.solve(m, b, x0, 1)
                true = sps.objective(m, b, x1)
                # tight at its own point, below the recourse cost elsewhere
                assert cut.value(x0) == pytest.approx(cut.sp_objective, rel=1e-6, abs=1e-6)
                excess = (cut.value(x1) - true) / (1 + abs(true))
                worst = max(worst, excess)
                assert excess <= 1e-6
                pairs += 1
        seed += 1
    note(f"{pairs} (cut, x') pairs valid, worst relative excess {worst:.1e}")


# ---------------------------------------------------------------------------
# 6. CPM and ladder suite

@pytest.mark.criterion(6)
def test_cpm_arithmetic():
    assert cpm_lb(100.0, 110.0) == (110.0 - 100.0) / 110.0
    assert cpm_lb(50.0, 50.0) == 0.0
    assert cpm_ub(110.0, 100.0) == (100.0 - 110.0) / 100.0
    assert cpm_ub(100.0, 125.0) == 0.2


@pytest.mark.criterion(6)
def test_ladder_fixtures():
    lb = derive_thresholds(np.linspace(0.0, 1.1, 12), LB, N_ZETA)
    assert lb.n == 10
    # the strictest rung comes first
    np.testing.assert_allclose(lb.thetas, [1.1 * (11 - i) / 11 for i in range(1, 11)], rtol=0, atol=1e-15)
    ub = derive_thresholds([-0.9, -0.4, 0.2], UB, N_ZETA)
    np.testing.assert_allclose(ub.thetas, [-0.9 + 0.1 * (i - 1) for i in range(1, 11)], rtol=0, atol=1e-15)
    assert ub.thetas[0] == -0.9 and ub.thetas[-1] == 0.0


@pytest.mark.criterion(6)
def test_label_monotone_across_ladder():
    rng = np.random.default_rng(6)
    vals = rng.exponential(0.05, 300)
    samples = [CpmSample(0, 0, 2, np.zeros(6), np.zeros(5), float(v), float(-v)) for v in vals]
    for cpi in (LB, UB):
        ds = label_datasets(samples, derive_thresholds(samples, cpi, N_ZETA))
        pos = [int(d.y.sum()) for d in ds]
        assert pos == sorted(pos)
        for a, b in zip(ds, ds[1:]):
            assert np.all(a.y <= b.y)


# ---------------------------------------------------------------------------
# 7. learning gate mechanics

def synthetic_sets(rng, noise, n=1000, width=6):
    X = rng.normal(size=(n, width))
    score = X[:, 0] - 0.7 * X[:, 2]
    cuts = np.quantile(score, np.linspace(0.85, 0.15, N_ZETA))
    sets = []
    for i, c in enumerate(cuts, start=1):
        y = rng.integers(0, 2, n) if noise else (score >= c).astype(int)
        # push rows off the boundary so every rung is separable with a margin
        shift = np.zeros(width)
        shift[[0, 2]] = (0.3, -0.21)
        Xi = X if noise else X + np.outer(np.where(y == 1, 1.0, -1.0), shift)
        sets.append(LabeledDataset(LB, i, float(c), tuple(f"f{j}" for j in range(width)), Xi, y))
    return sets, ThresholdLadder(LB, tuple(np.linspace(0.9, 0.1, N_ZETA)))


@pytest.mark.criterion(7)
def test_gate_passes_on_separable(note):
    sets, lad = synthetic_sets(np.random.default_rng(70), noise=False)
    ens = train_ensemble(sets, lad, seed=0)
    assert isinstance(ens, ClassifierEnsemble)
    worst = min(min(m.roc_auc, m.pr_auc) for m in ens.members)
    note(f"separable: worst gated AUC {worst:.3f}")
    assert worst >= 0.92


@pytest.mark.criterion(7)
def test_gate_fails_on_noise(note):
    fails = 0
    for seed in range(20):
        sets, lad = synthetic_sets(np.random.default_rng(1000 + seed), noise=True)
        fails += isinstance(train_ensemble(sets, lad, seed=seed), GateFailure)
    note(f"noise rejected in {fails}/20 seeds")
    assert fails >= 18


@pytest.mark.criterion(7)
def test_training_time_per_classifier(trained_dir, note):
    worst = 0.0
    for cpi in (LB, UB):
        sets, _, _ = read_datasets(trained_dir / "datasets", cpi)
        for ds in sets:
            bal = undersample(ds, 0)
            t0 = time.perf_counter()
            train_forest(bal.X, bal.y, ForestParams(), 0)
            worst = max(worst, time.perf_counter() - t0)
    note(f"slowest classifier {worst:.2f} s")
    assert worst <= 30.0


@pytest.mark.criterion(7)
def test_classification_time_per_iteration(models, note):
    inst = bundled(IEEE)
    n_cuts = len(inst.tree_nodes) * len(inst.blocks)
    worst = 0.0
    rng = np.random.default_rng(7)
    for ens in models.values():
        # features far outside the training range exercise the whole cascade
        for scale in (1.0, 1e6):
            X = scale * rng.normal(size=(n_cuts, ens.width))
            t0 = time.perf_counter()
            cascade_select(ens, X)
            worst = max(worst, time.perf_counter() - t0)
    note(f"{n_cuts} cuts classified in at most {1000 * worst:.1f} ms")
    assert worst <= 0.6


# ---------------------------------------------------------------------------
# 8. generalization without re-training

@pytest.fixture(scope="module")
def altered_instances():
    base = bundled(IEEE)
    probs = replace_tree(base, two_branch_tree(p_high=0.7), name=base.name + "-p70")
    blocks = replace_blocks(base, _blocks_ieee(len(base.blocks), base.blocks[0].steps, variant=1),
                            name=base.name + "-blocks1")
    assert [n.probability for n in probs.tree_nodes] != [n.probability for n in base.tree_nodes]
    assert blocks.blocks != base.blocks
    return {"probabilities": probs, "time series": blocks}


@pytest.mark.criterion(8)
@pytest.mark.parametrize("change", ["probabilities", "time series"])
def test_generalization(altered_instances, models, change, note):
    inst = altered_instances[change]
    ref = mbd_solve(inst)
    tr = ml(inst, "C", models)
    dev = deviation(tr, ref)
    note(f"altered {change}: ML-MBD-C deviation {100 * dev:.3f}%, {tr.total_cuts} vs {ref.total_cuts} cuts")
    assert ref.reason == "converged" and tr.reason == "converged"
    assert dev <= 0.015


# ---------------------------------------------------------------------------
# 9. determinism of the pipeline

def pipeline(out):
    assert main(["sample", "--instance", "tiny", "--out", str(out)]) == EXIT_OK
    assert main(["train", "--datasets", str(out / "datasets"), "--out", str(out)]) == EXIT_OK
    assert main(["solve-ml-c", "--instance", "tiny", "--out", str(out),
                 "--model", str(out / "model_lb.json"), str(out / "model_ub.json")]) == EXIT_OK


@pytest.mark.criterion(9)
def test_pipeline_byte_identical(tmp_path, note):
    a, b = tmp_path / "a", tmp_path / "b"
    pipeline(a)
    pipeline(b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and not p.name.startswith("timing_"))
    assert files, "pipeline wrote nothing"
    assert sorted(p.relative_to(b) for p in b.rglob("*")
                  if p.is_file() and not p.name.startswith("timing_")) == files
    differ = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    note(f"{len(files)} artifacts compared")
    assert differ == []
