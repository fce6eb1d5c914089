"""Acceptance gate: each criterion at its stated tolerance.

Each test prints one pass/fail line (visible with ``pytest -s``).  The
synthetic benchmark used by criteria 5 and 6 trains ten models (two
variants, five paired seeds) and is by far the slowest part of the suite;
the runs are shared through a module-scoped fixture.

Criterion 7 (reproducing the published per-domain accuracies) needs the
original four-domain review dataset, which does not ship with the
repository; it runs only when MDAT_AMAZON_MANIFEST points at a manifest in
the documented format, reports deviations, and never gates.
"""

import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from mdat.data import SynthConfig, default_flip_features, synth_generate
from mdat.linalg import RngState
from mdat.margin import (
    FiniteHypothesisClass,
    ScoreTable,
    hdeltah_divergence_oracle,
    margin_discrepancy_oracle,
    zero_one_discrepancy,
)
from mdat.bound import empirical_rademacher, massart_bound, rademacher_exact_tiny
from mdat.model import MdatModel, grad_check
from mdat.train import (
    LOSS_NAMES,
    MinibatchSampler,
    TrainConfig,
    alignment_diagnostic,
    grad_check_config,
    l1_phase_classifiers,
    l1_phase_extractors,
    l1_phase_supervised,
    make_loss_closure,
    mdat_adversary_step,
    mdat_main_step,
    train,
)


def report(line: str) -> None:
    print(line, flush=True)


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness

def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    corpus, cfg, model, pair, rng = grad_check_config(seed=0)
    assert corpus.vocab_dim == 20 and corpus.m == 2
    assert all(d.n_labeled == 8 for d in corpus.domains)
    worst = 0.0
    excluded = 0
    for loss_name in LOSS_NAMES:
        loss_fn = make_loss_closure(loss_name, pair, cfg, model,
                                    rng.child(f"masks:{loss_name}"))
        rep = grad_check(model, loss_fn, coords_per_component=50, step=1e-5,
                         rng=rng.child(f"check:{loss_name}"))
        for comp in rep.components:
            assert comp.n_checked + comp.n_excluded == 50
            assert comp.max_rel_err <= 1e-4, (loss_name, comp)
            worst = max(worst, comp.max_rel_err)
            excluded += comp.n_excluded
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    report(f"ACCEPTANCE 1: PASS gradient correctness "
           f"(max rel err {worst:.2e}, {excluded} kink coords excluded, "
           f"{elapsed:.1f}s < 30s)")


# ---------------------------------------------------------------------------
# criterion 2: oracle equivalence

def _bf_argmax(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def _bf_ramp(x, rho):
    return 0.0 if x >= rho else (1.0 if x <= 0 else 1.0 - x / rho)


def _bf_margin(row, y):
    return 0.5 * (row[y] - max(row[j] for j in range(len(row)) if j != y))


def test_criterion_2_oracle_equivalence():
    t0 = time.perf_counter()
    gen = np.random.default_rng(77)
    for trial in range(20):
        n = int(gen.integers(3, 11))
        k = int(gen.integers(2, 4))
        n_hyp = int(gen.integers(2, 51))
        rho = float(gen.uniform(0.3, 2.0))
        f = ScoreTable(gen.standard_normal((n, k)))
        hyps = FiniteHypothesisClass(
            [ScoreTable(gen.standard_normal((n, k))) for _ in range(n_hyp)])
        s1 = np.sort(gen.choice(n, size=int(gen.integers(1, n + 1)), replace=False))
        s2 = np.sort(gen.choice(n, size=int(gen.integers(1, n + 1)), replace=False))

        pseudo = [_bf_argmax(r) for r in f.scores]
        preds = [[_bf_argmax(r) for r in h.scores] for h in hyps.tables]

        def dis(pred_a, pred_b, idx):
            return sum(1.0 for i in idx if pred_a[i] != pred_b[i]) / len(idx)

        def mdis(scores, idx):
            return sum(_bf_ramp(_bf_margin(scores[i], pseudo[i]), rho)
                       for i in idx) / len(idx)

        expect_md = max(mdis(h.scores, s2) - mdis(h.scores, s1)
                        for h in hyps.tables)
        got_md, _ = margin_discrepancy_oracle(f, hyps, s1, s2, rho)
        assert abs(got_md - expect_md) <= 1e-12

        expect_hdh = max(abs(dis(pb, pa, s2) - dis(pb, pa, s1))
                         for pa in preds for pb in preds)
        assert abs(hdeltah_divergence_oracle(hyps, s1, s2) - expect_hdh) <= 1e-12

        expect_zod = max(dis(p, pseudo, s2) - dis(p, pseudo, s1) for p in preds)
        got_zod = zero_one_discrepancy(np.array(pseudo), hyps, s1, s2)
        assert abs(got_zod - expect_zod) <= 1e-12

        # identical sample sets collapse every divergence to exactly zero
        assert margin_discrepancy_oracle(f, hyps, s1, s1, rho)[0] == 0.0
        assert hdeltah_divergence_oracle(hyps, s2, s2) == 0.0
        assert zero_one_discrepancy(np.array(pseudo), hyps, s1, s1) == 0.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    report(f"ACCEPTANCE 2: PASS oracle equivalence "
           f"(20 instances vs exhaustive search, {elapsed:.1f}s < 10s)")


# ---------------------------------------------------------------------------
# criterion 3: Rademacher estimator validity

def test_criterion_3_rademacher_estimator():
    t0 = time.perf_counter()
    gen = np.random.default_rng(2024)
    for trial in range(10):
        n = int(gen.integers(3, 13))
        n_funcs = int(gen.integers(2, 21))
        values = gen.uniform(-1, 1, size=(n_funcs, n))
        exact = rademacher_exact_tiny(values)
        est = empirical_rademacher(values, draws=200, rng=RngState(500 + trial))
        assert abs(est.value - exact) <= 3 * est.std_error
        assert exact <= massart_bound(n_funcs, n, 1.0) + 1e-12
    elapsed = time.perf_counter() - t0
    assert elapsed < 20.0
    report(f"ACCEPTANCE 3: PASS Rademacher estimator "
           f"(10 classes within 3 std errors of exact, {elapsed:.1f}s < 20s)")


# ---------------------------------------------------------------------------
# criterion 4: margin realization

def test_criterion_4_margin_realization():
    for beta in (1.0, 2.0, 4.0):
        def term(p):
            return beta * math.log(p) + math.log(1.0 - p)

        lo, hi = 1e-9, 1 - 1e-9
        for _ in range(300):
            m1 = lo + (hi - lo) / 3
            m2 = hi - (hi - lo) / 3
            if term(m1) < term(m2):
                lo = m1
            else:
                hi = m2
        p_star = (lo + hi) / 2
        assert abs(p_star - beta / (1.0 + beta)) <= 1e-6
        assert abs(math.log(p_star / (1.0 - p_star)) - math.log(beta)) <= 1e-6
    report("ACCEPTANCE 4: PASS margin realization "
           "(p* = beta/(1+beta) and log-odds = ln beta within 1e-6 "
           "for beta in {1, 2, 4})")


# ---------------------------------------------------------------------------
# criteria 5 and 6: synthetic benchmark

BENCH_SEEDS = (1, 2, 3, 4, 5)


def bench_generator():
    return SynthConfig(m=3, vocab_dim=200, labeled_per_domain=500,
                       unlabeled_per_domain=500, test_per_domain=200,
                       flip_features=default_flip_features(200, 0.3),
                       noise_rate=0.05, seed=0)


def bench_train_config(seed, variant):
    return TrainConfig(alpha=0.5, beta=4.0, lr=1e-3, batch_size=8, epochs=200,
                       seed=seed, eval_cadence=25, variant=variant,
                       extractor_hidden=(64,), d_shared=64, d_specific=32,
                       keep_prob=0.6, diag_probe_budget=0)


@pytest.fixture(scope="module")
def benchmark_runs():
    corpus, test, _meta = synth_generate(bench_generator())
    runs = {"mdat": [], "mdat-l1": []}
    for variant in ("mdat", "mdat-l1"):
        for seed in BENCH_SEEDS:
            cfg = bench_train_config(seed, variant)
            t0 = time.perf_counter()
            result = train(corpus, cfg, test)
            elapsed = time.perf_counter() - t0
            entry = {"seed": seed, "best_acc": result.best_avg_acc,
                     "final_acc": result.reports[-1].avg_acc,
                     "elapsed": elapsed}
            if variant == "mdat":
                init_model = MdatModel(cfg.model_spec(corpus))
                init_model.init_params(RngState(cfg.seed).child("init"))
                d0 = alignment_diagnostic(init_model, corpus, cfg.rho, 800,
                                          rng=RngState(99))
                d1 = alignment_diagnostic(result.model, corpus, cfg.rho, 800,
                                          rng=RngState(99))
                entry["diag_initial"] = float(np.median(list(d0.values())))
                entry["diag_final"] = float(np.median(list(d1.values())))
            runs[variant].append(entry)
    return runs


def test_criterion_5_synthetic_benchmark(benchmark_runs):
    rows = benchmark_runs["mdat"]
    accs = [r["best_acc"] for r in rows]
    times = [r["elapsed"] for r in rows]
    inits = [r["diag_initial"] for r in rows]
    finals = [r["diag_final"] for r in rows]
    acc_median = float(np.median(accs))
    assert acc_median >= 0.90, accs
    assert max(times) < 120.0, times
    init_median = float(np.median(inits))
    final_median = float(np.median(finals))
    assert final_median <= 0.5 * init_median, (inits, finals)
    report(f"ACCEPTANCE 5: PASS synthetic benchmark "
           f"(median accuracy {acc_median:.3f} >= 0.90 within 200 epochs, "
           f"max run {max(times):.0f}s < 120s; alignment diagnostic "
           f"{final_median:.3f} <= 0.5 x {init_median:.3f})")


def test_criterion_6_ablation_ordering(benchmark_runs):
    # final-epoch accuracy: the smoothed-difference variant ascends the main
    # classifier on the discrepancy, which is exactly what costs it here
    mdat_median = float(np.median([r["final_acc"] for r in benchmark_runs["mdat"]]))
    l1_median = float(np.median([r["final_acc"] for r in benchmark_runs["mdat-l1"]]))
    assert mdat_median >= l1_median, (mdat_median, l1_median)
    report(f"ACCEPTANCE 6: PASS ablation ordering "
           f"(final accuracy: mdat {mdat_median:.3f} >= mdat-l1 {l1_median:.3f} "
           f"over 5 paired seeds)")


# ---------------------------------------------------------------------------
# criterion 7: published-number reproduction (conditional, never gating)

PUBLISHED_PER_DOMAIN = {"books": 84.33, "dvd": 86.07,
                        "electronics": 88.74, "kitchen": 90.56}
PUBLISHED_AVERAGE = 87.43


def test_criterion_7_published_numbers_conditional(tmp_path):
    manifest = os.environ.get("MDAT_AMAZON_MANIFEST")
    if not manifest:
        report("ACCEPTANCE 7: SKIPPED published-number reproduction "
               "(set MDAT_AMAZON_MANIFEST to a four-domain review manifest "
               "to run 5-fold cross-validation with the reference defaults; "
               "reported, not gating)")
        pytest.skip("original review dataset not bundled")
    from mdat.cli import main
    out = tmp_path / "amazon-cv"
    code = main(["crossval", "--manifest", manifest, "--out-dir", str(out),
                 "--folds", "5", "--epochs", "20"])
    assert code == 0
    rep = json.loads((out / "crossval.json").read_text())
    lines = []
    for name, published in PUBLISHED_PER_DOMAIN.items():
        if name in rep["domains"]:
            got = 100.0 * rep["domains"][name]["mean"]
            lines.append(f"{name}: {got:.2f} vs published {published:.2f} "
                         f"(delta {got - published:+.2f})")
    got_avg = 100.0 * rep["average"]["mean"]
    lines.append(f"average: {got_avg:.2f} vs published {PUBLISHED_AVERAGE:.2f} "
                 f"(delta {got_avg - PUBLISHED_AVERAGE:+.2f}; "
                 f"within 1.5 points: {abs(got_avg - PUBLISHED_AVERAGE) <= 1.5})")
    report("ACCEPTANCE 7: REPORTED " + "; ".join(lines))


# ---------------------------------------------------------------------------
# criterion 8: determinism of command outputs

def test_criterion_8_byte_identical_outputs(tmp_path):
    def run(args):
        proc = subprocess.run([sys.executable, "-m", "mdat"] + args,
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        return proc

    pairs = []
    for tag in ("a", "b"):
        corpus_dir = tmp_path / f"corpus_{tag}"
        run(["synth", "--out-dir", str(corpus_dir), "--domains", "2",
             "--vocab", "48", "--labeled", "20", "--unlabeled", "10",
             "--test", "10", "--seed", "4"])
        train_dir = tmp_path / f"train_{tag}"
        run(["train", "--manifest", str(corpus_dir / "manifest.txt"),
             "--out-dir", str(train_dir), "--epochs", "2", "--lr", "2e-3",
             "--extractor-hidden", "12", "--d-shared", "8",
             "--d-specific", "6", "--seed", "2", "--diag-budget", "30"])
        pairs.append((corpus_dir, train_dir))
    (corpus_a, train_a), (corpus_b, train_b) = pairs
    for name in sorted(os.listdir(corpus_a)):
        assert (corpus_a / name).read_bytes() == (corpus_b / name).read_bytes()
    for name in ("metrics.csv", "summary.json", "final.ckpt", "best.ckpt"):
        assert (train_a / name).read_bytes() == (train_b / name).read_bytes()
    report("ACCEPTANCE 8: PASS determinism "
           "(synth and train byte-identical across repeated invocations)")


# ---------------------------------------------------------------------------
# criterion 9: routing invariants over a 10-step run

def test_criterion_9_routing_invariants():
    corpus, _test, _meta = synth_generate(SynthConfig(
        m=2, vocab_dim=32, labeled_per_domain=24, unlabeled_per_domain=16,
        test_per_domain=8, seed=6))
    cfg = TrainConfig(epochs=1, lr=1e-3, batch_size=4, seed=0,
                      extractor_hidden=(10,), d_shared=8, d_specific=6,
                      keep_prob=0.6)
    rng = RngState(0)
    model = MdatModel(cfg.model_spec(corpus))
    model.init_params(rng.child("init"))
    sampler = MinibatchSampler(corpus, cfg.batch_size, rng.child("sampler"))
    droprng = rng.child("dropout")
    opt = {}
    main_names = ["shared", "specific_0", "specific_1", "classifier"]

    pairs = []
    while len(pairs) < 10:
        pairs.extend(sampler.epoch())
    for step, pair in enumerate(pairs[:10]):
        before = model.param_hashes()
        mdat_main_step(model, pair, cfg, opt, droprng)
        mid = model.param_hashes()
        assert mid["auxiliary"] == before["auxiliary"], step
        assert all(mid[n] != before[n] for n in main_names), step
        mdat_adversary_step(model, pair, cfg, opt, droprng)
        after = model.param_hashes()
        assert after["auxiliary"] != mid["auxiliary"], step
        assert all(after[n] == mid[n] for n in main_names), step

    cfg_l1 = TrainConfig(epochs=1, lr=1e-3, batch_size=4, seed=0,
                         variant="mdat-l1", extractor_hidden=(10,),
                         d_shared=8, d_specific=6, keep_prob=0.6)
    model = MdatModel(cfg_l1.model_spec(corpus))
    model.init_params(rng.child("init-l1"))
    opt = {}
    ext_names = ["shared", "specific_0", "specific_1"]
    clf_names = ["classifier", "auxiliary"]
    for step, pair in enumerate(pairs[:10]):
        l1_phase_supervised(model, pair, cfg_l1, opt, droprng)
        h1 = model.param_hashes()
        l1_phase_extractors(model, pair, cfg_l1, opt, droprng)
        h2 = model.param_hashes()
        assert all(h2[n] == h1[n] for n in clf_names), step
        assert all(h2[n] != h1[n] for n in ext_names), step
        l1_phase_classifiers(model, pair, cfg_l1, opt, droprng)
        h3 = model.param_hashes()
        assert all(h3[n] == h2[n] for n in ext_names), step
        assert all(h3[n] != h2[n] for n in clf_names), step
    report("ACCEPTANCE 9: PASS routing invariants "
           "(update separation and three-step freezing held on every step "
           "of a 10-step run)")
