"""The eight acceptance checks, each printing one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (the lines are also
printed without ``-s``).  Every check also enforces its runtime budget.
"""
import filecmp
import math
import time

import numpy as np
import pytest

import oracles
from vulnboost.dataset import (SKEWED_WEIGHTS, FeatureSchema, concept_merge, date_to_serial,
                               encode_dataset, synth_dataset, write_raw_csv)
from vulnboost.gbdt import (GbdtParams, best_split, bin_features, build_bins, dumps_model,
                            load_model, logistic_grad_hess, n_bins_of, save_model, train_binary)
from vulnboost.metrics import accuracy, confusion_matrix, macro_metrics, micro_recall, per_class_prf
from vulnboost.ovr import load_ovr
from vulnboost.pipeline import MODEL_DIR, REPORT_FILE, PipelineConfig, run_train
from vulnboost.qpso import QpsoConfig, SearchSpace, optimize
from vulnboost.smote import SmoteConfig, class_distribution, smote_oversample

# Swarm budget for the tuned-vs-untuned comparison.  The full desk default
# (30 x 20) needs hours on one core; this budget fits the ten-minute limit.
TUNE_PARTICLES = 8
TUNE_ITERATIONS = 4


@pytest.fixture
def verdict(capsys):
    def emit(number, name, ok, detail, elapsed, limit):
        within = elapsed < limit
        status = "PASS" if ok and within else "FAIL"
        line = (f"[criterion {number}] {status} {name}: {detail}; "
                f"{elapsed:.2f}s (limit {limit:g}s)")
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
        assert within, line
    return emit


def test_1_encoding_fidelity(verdict):
    t0 = time.perf_counter()
    merges = [("Ubuntu18.04", "major-only", "Ubuntu18"), ("PHP5.3.29", "major-minor", "PHP5.3"),
              ("Apache2.4.33", "major-minor", "Apache2.4"),
              ("WordPress5.9.3", "major-minor", "WordPress5.9"),
              ("CVE-2021-44228", "year-only", "CVE-2021")]
    serial = date_to_serial("2022/4/7")
    bad = [(v, concept_merge(v, r)) for v, r, want in merges if concept_merge(v, r) != want]
    ok = serial == 44658 and not bad
    verdict(1, "encoding fidelity", ok, f"serial={serial}, merge mismatches={bad}",
            time.perf_counter() - t0, 1)


def test_2_smote_balancing(verdict):
    t0 = time.perf_counter()
    ds = encode_dataset(synth_dataset(5000, SKEWED_WEIGHTS, 2), FeatureSchema.default())
    before = class_distribution(ds)
    skew_ok = before.max() / before.sum() >= 0.18 and before.min() / before.sum() < 0.05
    out, prov = smote_oversample(ds, SmoteConfig(seed=2))
    after = class_distribution(out)
    n = len(ds)
    worst = 0.0
    for j, p in enumerate(prov):
        b, nb = out.features[p.base_index], out.features[p.neighbor_index]
        worst = max(worst, float(np.max(np.abs(out.features[n + j] - (b + p.gap * (nb - b))))))
    ok = skew_ok and after.min() == after.max() and worst <= 1e-9
    verdict(2, "SMOTE balancing", ok,
            f"before max/min={before.max()}/{before.min()}, after={after.min()}..{after.max()}, "
            f"{len(prov)} synthetic rows, worst segment error={worst:.1e}",
            time.perf_counter() - t0, 10)


def test_3_gbdt_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    params = GbdtParams(min_data_in_leaf=1)
    split_bad = 0
    worst_gain = 0.0
    for _ in range(50):
        n, m = int(rng.integers(2, 65)), int(rng.integers(1, 5))
        X = np.round(rng.normal(size=(n, m)), int(rng.integers(0, 3)))
        y = rng.integers(0, 2, n)
        edges = build_bins(X, params.max_bins)
        codes, nb = bin_features(X, edges), n_bins_of(edges)
        g, h = logistic_grad_hess(y, rng.normal(size=n))
        got = best_split(codes, g, h, np.arange(n), nb, params)
        ref = oracles.best_split_brute(codes.tolist(), g.tolist(), h.tolist(), list(range(n)),
                                       nb.tolist(), params.lambda_l2, params.gamma_leaf, 1)
        if (got is None) != (ref is None):
            split_bad += 1
        elif got is not None:
            split_bad += (got.feature, got.bin) != ref[:2]
            worst_gain = max(worst_gain, abs(got.gain - ref[2]))
    worst_fd = 0.0
    for y, x in zip(rng.integers(0, 2, 100), rng.uniform(-5, 5, 100)):
        f = lambda t: oracles.logloss(int(y), t)  # noqa: E731
        g, h = logistic_grad_hess(int(y), float(x))
        fg = (f(x + 1e-5) - f(x - 1e-5)) / 2e-5
        fh = (f(x + 1e-3) - 2 * f(x) + f(x - 1e-3)) / 1e-6
        worst_fd = max(worst_fd, abs(g - fg), abs(h - fh))
    ok = split_bad == 0 and worst_gain <= 1e-9 and worst_fd <= 1e-6
    verdict(3, "GBDT oracle equivalence", ok,
            f"split mismatches={split_bad}/50, worst gain diff={worst_gain:.1e}, "
            f"worst g/h finite-difference diff={worst_fd:.1e}", time.perf_counter() - t0, 30)


def test_4_boosting_descent(verdict):
    t0 = time.perf_counter()
    failures, worst_rise = 0, -math.inf
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(300, 5))
        y = (X[:, 0] - X[:, 1] ** 2 + rng.normal(scale=0.7, size=300) > 0).astype(int)
        params = GbdtParams(n_estimators=30, learning_rate=float(rng.uniform(0.01, 0.3)),
                            num_leaves=int(rng.integers(2, 32)),
                            max_depth=int(rng.integers(2, 9)), min_data_in_leaf=5,
                            lambda_l2=float(rng.uniform(0, 3)),
                            feature_fraction=float(rng.uniform(0.5, 1.0)), bagging_fraction=1.0,
                            seed=seed)
        model = train_binary((X, y), params)
        obj = [model.objective(X, y, k) for k in range(len(model.trees) + 1)]
        rises = np.diff(obj)
        worst_rise = max(worst_rise, float(rises.max()))
        failures += bool((rises > 1e-9).any())
    verdict(4, "boosting descent", failures == 0,
            f"runs with an increase={failures}/20, largest step change={worst_rise:.2e}",
            time.perf_counter() - t0, 60)


def test_5_qpso_convergence(verdict):
    t0 = time.perf_counter()
    space = SearchSpace.full()
    centre, scale = (space.lo + space.hi) / 2, space.hi - space.lo

    def sphere(x):
        return float(np.sum(((x - centre) / scale) ** 2))

    hits, monotone, worst = 0, 0, 0.0
    for seed in range(20):
        res = optimize(sphere, space, QpsoConfig(n_particles=30, n_iterations=200, seed=seed))
        hits += res.best_fitness <= 1e-2
        monotone += all(b <= a for a, b in zip(res.history, res.history[1:]))
        worst = max(worst, res.best_fitness)
    ok = hits >= 19 and monotone == 20
    verdict(5, "QPSO convergence", ok,
            f"seeds reaching 1e-2={hits}/20, monotone histories={monotone}/20, "
            f"worst best fitness={worst:.1e}", time.perf_counter() - t0, 30)


def test_6_metrics_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    truth, pred = rng.integers(0, 11, 1000), rng.integers(0, 11, 1000)
    cm = confusion_matrix(truth, pred)
    ref = oracles.prf_brute(truth.tolist(), pred.tolist(), 11)
    diffs = [abs(accuracy(cm) - sum(int(a == b) for a, b in zip(truth, pred)) / 1000)]
    for c in range(11):
        got = per_class_prf(cm, c)
        diffs += [abs(got.precision - ref[c][0]), abs(got.recall - ref[c][1]),
                  abs(got.f1 - ref[c][2])]
    macro = macro_metrics(cm)
    pm = sum(r[0] for r in ref) / 11
    rm = sum(r[1] for r in ref) / 11
    diffs += [abs(macro["precision_macro"] - pm), abs(macro["recall_macro"] - rm),
              abs(macro["f1_macro"] - 2 * pm * rm / (pm + rm)),
              abs(macro["f1_macro_mean_of_class"] - sum(r[2] for r in ref) / 11)]
    identity = micro_recall(cm) == accuracy(cm)
    ok = max(diffs) <= 1e-12 and identity
    verdict(6, "metrics oracle", ok,
            f"worst diff={max(diffs):.1e}, micro-recall == accuracy: {identity}",
            time.perf_counter() - t0, 5)


def test_7_tuned_vs_untuned(verdict, tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "assets.csv"
    write_raw_csv(synth_dataset(5000, SKEWED_WEIGHTS, 42), data, FeatureSchema.default())
    base = PipelineConfig(input_csv=data, seed=42, search_space=SearchSpace.desk(),
                          qpso=QpsoConfig(n_particles=TUNE_PARTICLES,
                                          n_iterations=TUNE_ITERATIONS))
    untuned = run_train(base).metrics["accuracy"]
    tuned_report = run_train(PipelineConfig(**{**base.__dict__, "tune": True}))
    tuned = tuned_report.metrics["accuracy"]
    p = tuned_report.params_used
    verdict(7, "tuned vs untuned", tuned >= untuned - 0.005,
            f"untuned={untuned:.4f}, tuned={tuned:.4f} (diff {100 * (tuned - untuned):+.2f} pp), "
            f"swarm {TUNE_PARTICLES}x{TUNE_ITERATIONS}, chosen lr={p.learning_rate:.3f} "
            f"trees={p.n_estimators} depth={p.max_depth} leaves={p.num_leaves}",
            time.perf_counter() - t0, 600)


def test_8_determinism_and_persistence(verdict, tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "assets.csv"
    write_raw_csv(synth_dataset(1500, SKEWED_WEIGHTS, 8), data, FeatureSchema.default())
    params = GbdtParams(n_estimators=40, bagging_fraction=0.8, feature_fraction=0.8)
    outs = []
    for name in ("a", "b"):
        run_train(PipelineConfig(input_csv=data, output_dir=tmp_path / name, seed=8,
                                 base_params=params))
        outs.append(tmp_path / name)
    files = [REPORT_FILE] + [f"{MODEL_DIR}/{p.name}" for p in (outs[0] / MODEL_DIR).iterdir()]
    _, mismatch, errors = filecmp.cmpfiles(outs[0], outs[1], files, shallow=False)

    rng = np.random.default_rng(8)
    X = rng.normal(size=(400, 12))
    y = (X[:, 0] + X[:, 1] * X[:, 2] > 0).astype(int)
    model = train_binary((X, y), GbdtParams(n_estimators=50, bagging_fraction=0.7, seed=8))
    save_model(model, tmp_path / "m.model")
    rows = rng.normal(scale=2, size=(1000, 12))
    single_same = np.array_equal(model.predict_proba(rows),
                                 load_model(tmp_path / "m.model").predict_proba(rows))
    text_same = dumps_model(load_model(tmp_path / "m.model")) == dumps_model(model)
    ovr = load_ovr(outs[0] / MODEL_DIR)
    ovr_same = np.array_equal(ovr.predict_proba(rows), load_ovr(outs[1] / MODEL_DIR)
                              .predict_proba(rows))
    ok = not mismatch and not errors and single_same and text_same and ovr_same
    verdict(8, "determinism and persistence", ok,
            f"{len(files)} run files compared, differing={mismatch + errors}, "
            f"round-trip predictions identical={single_same and ovr_same}",
            time.perf_counter() - t0, 60)
