"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a PASS/FAIL line (printed in the terminal summary) before
asserting.  The ordering experiments (criteria 5 to 7) train the full
benchmark over five seeds and take tens of minutes on one core; their
tables are written to ``results/`` (override with ``BMCL_RESULTS_DIR``).
"""
from __future__ import annotations

import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from bmcl import btg, mcfl
from bmcl import model as mdl
from bmcl.harness.config import RunConfig
from bmcl.harness.experiments import LADDER, RunCache, run_ablation, run_balance_comparison
from bmcl.harness.training import evaluate, gate_mass, run_training
from bmcl.synthdata import generate
from oracles import brute_force_aggregate, irm_dummy_derivative_fd, rel_error
from test_autodiff import COMPOSITIONS, _max_gradient_error
from test_btg import _random_instance, _split_loss_value, _theta_gradient_error
from test_mcfl import CFG, _clear_of_kinks, _composed_error, _quadratic, _tasks, _tiny

SEEDS = (0, 1, 2, 3, 4)
RUN_LIMIT_S = 600.0
RESULTS = Path(os.environ.get("BMCL_RESULTS_DIR", Path(__file__).resolve().parents[1] / "results"))


# -- 1. gradient correctness -------------------------------------------------------

def _dummy_penalty_error(seed):
    theta, bias, feats, labels = _random_instance(seed)
    q = btg.row_softmax(theta)
    logits = btg.bias_logits(feats, bias)
    fd = sum(irm_dummy_derivative_fd(logits, labels, q[:, t]) ** 2 for t in range(q.shape[1]))
    analytic = _split_loss_value(theta, bias, feats, labels, 1.0) - _split_loss_value(theta, bias, feats, labels, 0.0)
    return rel_error(analytic, fd)


def test_criterion_1_gradient_correctness(criterion):
    t0 = time.perf_counter()
    worst = {name: max(_max_gradient_error(name, s) for s in range(100)) for name in sorted(COMPOSITIONS)}
    worst["irm_theta"] = max(_theta_gradient_error(s) for s in range(100))
    worst["irm_dummy_penalty"] = max(_dummy_penalty_error(s) for s in range(100))
    seeds = [s for s in range(400) if _clear_of_kinks(s)][:100]
    worst["inner_plus_query"] = max(_composed_error(s) for s in seeds)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and len(seeds) == 100 and elapsed < 60.0
    criterion(1, ok, f"{len(worst)} compositions x 100 instances, worst rel err {max(worst.values()):.1e}, "
                     f"{elapsed:.1f}s" + (f", failing {sorted(bad)}" if bad else ""))
    assert ok, (worst, elapsed)


# -- 2. partition oracle equivalence -----------------------------------------------

def test_criterion_2_partition_oracle(criterion):
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(50):
        k, m, n = int(rng.integers(1, 51)), int(rng.integers(2, 6)), int(rng.integers(1, 5))
        mats = [btg.row_softmax(rng.normal(size=(k, m))) for _ in range(n)]
        _, expected = brute_force_aggregate([mat.tolist() for mat in mats])
        _, part = btg.aggregate_partitions(mats)
        mismatches += part.assignment.tolist() != expected
    criterion(2, mismatches == 0, f"50 instances, {mismatches} mismatches")
    assert mismatches == 0


# -- 3. analytic meta-update -------------------------------------------------------

def test_criterion_3_analytic_meta_update(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        phi, alpha = rng.normal(size=int(rng.integers(1, 6))) * 5, float(rng.random())
        out = mcfl.inner_update({"phi": phi}, np.zeros((1, 1)), np.zeros(1, int), replace(CFG, inner_lr=alpha),
                                names=["phi"], loss_hook=_quadratic)
        worst = max(worst, float(np.abs(out["phi"] - (1 - alpha) * phi).max()))
    params, x, y = _tiny(0)
    same_inner = mcfl.inner_update(params, x[:6], y[:6], replace(CFG, inner_lr=0.0))
    same_outer, _, _ = mcfl.outer_update(params, _tasks(y), x, y, CFG, lr=0.0)
    identity = all(same_inner[k].tobytes() == params[k].tobytes() and same_outer[k].tobytes() == params[k].tobytes()
                   for k in params)
    ok = worst <= 1e-12 and identity
    criterion(3, ok, f"quadratic max deviation {worst:.1e}, alpha=0/beta=0 identity {identity}")
    assert ok


# -- 4. balance guarantees ---------------------------------------------------------

def test_criterion_4_balance_guarantees(criterion):
    rng = np.random.default_rng(4)
    mb_ok = True
    for _ in range(200):
        m, classes, k = int(rng.integers(2, 6)), int(rng.integers(1, 8)), int(rng.integers(1, 200))
        labels = rng.integers(0, classes, k)
        probs = btg.row_softmax(2 * rng.normal(size=(k, m)))
        skewed = btg.Partition(np.where(rng.random(k) < 0.7, 0, probs.argmax(1)), m)
        table = btg.manual_balance(skewed, probs, labels, []).class_counts(labels, classes)
        for cls in range(classes):
            if (labels == cls).sum() >= m:
                mb_ok &= bool(table[cls].max() - table[cls].min() <= 1)
    lb_ok = True
    for _ in range(200):
        a, b = rng.uniform(0.01, 10, 4), rng.uniform(0.01, 10, 4)
        ha, hb = btg.split_entropy(a), btg.split_entropy(b)
        if abs(ha - hb) > 1e-9:
            lb_ok &= (btg.lb_term_value(a, 1.0) < btg.lb_term_value(b, 1.0)) == (ha > hb)
    gb_ok = True
    for _ in range(100):
        mat = btg.row_softmax(rng.normal(size=(int(rng.integers(1, 50)), int(rng.integers(2, 6)))))
        one = btg.aggregate_partitions([mat])[1].assignment
        gb_ok &= bool(np.array_equal(one, btg.aggregate_partitions([mat] * int(rng.integers(2, 7)))[1].assignment))
    ok = mb_ok and lb_ok and gb_ok
    criterion(4, ok, f"MB within one {mb_ok}, LB monotone {lb_ok}, GB identical-matrix {gb_ok}")
    assert ok


# -- 5 to 7. ordering on the synthetic benchmark -----------------------------------

@pytest.fixture(scope="module")
def benchmark(result_table):
    base = RunConfig()
    cache = RunCache()
    ablation = run_ablation(base, SEEDS, cache=cache, methods=LADDER)
    balance = run_balance_comparison(base, SEEDS, cache=cache, learners=("meta",))
    for report in (ablation, balance):
        report.save(RESULTS)
        result_table(report.format())
    return ablation, balance, cache


def test_criterion_5_ood_ordering(criterion, benchmark):
    ablation, _, cache = benchmark
    cells = ablation.cells
    base, full = cells["baseline"].test_mean, cells["bmcl"].test_mean
    meta, part = cells["gate+meta"].test_mean, cells["gate+btg"].test_mean
    slowest = max(r.elapsed for r in cache.runs())
    margin_ok, meta_ok, btg_ok = full >= base + 5.0, meta > base, part > base
    ok = margin_ok and meta_ok and btg_ok and slowest < RUN_LIMIT_S
    criterion(5, ok, f"baseline {base:.2f}, bmcl {full:.2f} (margin {full - base:+.2f}, need >= +5), "
                     f"+meta {meta:.2f}, +btg {part:.2f}, slowest run {slowest:.0f}s")
    assert ok


def test_criterion_6_balancing_ordering(criterion, benchmark):
    _, balance, _ = benchmark
    gb, none = balance.cells["meta/GB"].test_mean, balance.cells["meta/none"].test_mean
    ok = gb - none > 0.5
    others = ", ".join(f"{k} {v.test_mean:.2f}" for k, v in balance.cells.items())
    criterion(6, ok, f"meta/GB {gb:.2f} vs meta/none {none:.2f} (gap {gb - none:+.2f}, need > +0.5); {others}")
    assert ok


def test_criterion_7_causal_focus(criterion, benchmark):
    ablation, _, cache = benchmark
    bmcl = ablation.cells["bmcl"]
    full_ok = all(c > s for c, s in zip(bmcl.extra["gate_class"], bmcl.extra["gate_context"]))
    baseline_holds = []
    for seed in SEEDS:
        cfg = RunConfig().with_seed(seed).with_method("baseline")
        test = generate(cfg.gen)[2]
        cls, ctx = gate_mass(cache.get(cfg, None).params, test)
        baseline_holds.append(cls > ctx)
    ok = full_ok and not all(baseline_holds)
    pairs = " ".join(f"{c:.2f}/{s:.2f}" for c, s in zip(bmcl.extra["gate_class"], bmcl.extra["gate_context"]))
    criterion(7, ok, f"bmcl class/context gate mass per seed {pairs}; "
                     f"baseline holds on {sum(baseline_holds)}/{len(SEEDS)} seeds")
    assert ok


# -- 8. determinism and persistence ------------------------------------------------

def test_criterion_8_determinism_and_persistence(criterion, tmp_path):
    base = RunConfig()
    cfg = replace(base, gen=replace(base.gen, n_train=600, n_val=200, n_test=200), epochs=4, refresh_start=1,
                  refresh_period=2, btg=replace(base.btg, epochs=10, min_epochs=5, num_matrices=2),
                  meta=replace(base.meta, tasks_per_epoch=16))
    data = generate(cfg.gen)
    runs = [run_training(replace(cfg, output_dir=str(tmp_path / name)), data) for name in ("a", "b")]
    same_metrics = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    params, _, _ = mdl.load_checkpoint(tmp_path / "a" / "checkpoint.npz")
    logits_ok = all(np.array_equal(mdl.predict_numpy(ds.features, params), mdl.predict_numpy(ds.features, runs[0].params))
                    for ds in data)
    acc_ok = evaluate(params, data[2]) == runs[0].final["test_acc"]
    ok = same_metrics and logits_ok and acc_ok
    criterion(8, ok, f"bit-identical metrics {same_metrics}, checkpoint logits identical {logits_ok}, "
                     f"accuracy identical {acc_ok}")
    assert ok
