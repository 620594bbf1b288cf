import csv
import filecmp
from pathlib import Path

import numpy as np
import pytest

import vulnboost.pipeline as pl
from vulnboost import cli
from vulnboost.dataset import (SKEWED_WEIGHTS, FeatureSchema, encode_features, load_raw_csv,
                               record_labels, stratified_indices, synth_dataset, write_raw_csv)
from vulnboost.errors import ConfigError, DataError, InvariantError
from vulnboost.gbdt import GbdtParams
from vulnboost.metrics import read_confusion_csv, summary
from vulnboost.pipeline import (CONFUSION_FILE, ENCODER_FILE, MODEL_DIR, REPORT_FILE, TRACE_FILE,
                                PipelineConfig, config_from_mapping, load_config,
                                load_encoder, parse_config_text, parse_report_metrics, run_evaluate,
                                run_predict, run_train)
from vulnboost.qpso import QpsoConfig, SearchSpace

QUICK = GbdtParams(n_estimators=20, num_leaves=15)


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "assets.csv"
    write_raw_csv(synth_dataset(2000, SKEWED_WEIGHTS, 5), path, FeatureSchema.default())
    return path


@pytest.fixture(scope="module")
def run_dir(data_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "run"
    report = run_train(PipelineConfig(input_csv=data_csv, output_dir=out, seed=3,
                                      base_params=QUICK))
    return out, report


def split_files(csv_path, tmp_path, seed=3):
    """Write the held-out and training partitions the pipeline would use."""
    schema = FeatureSchema.default()
    records = load_raw_csv(csv_path, schema)
    tr, te = stratified_indices(record_labels(records), 0.2, seed)
    write_raw_csv([records[i] for i in tr], tmp_path / "train.csv", schema)
    write_raw_csv([records[i] for i in te], tmp_path / "test.csv", schema)
    return tmp_path / "train.csv", tmp_path / "test.csv"


# ------------------------------------------------------------------- config


def test_config_parsing(tmp_path):
    text = """
    # comment line
    seed = 7
    tune = yes          # trailing comment
    particles = 4
    iterations = 3
    smote_k = 3
    n_estimators_range = 20, 40
    gbdt.learning_rate = 0.05
    """
    p = tmp_path / "c.txt"
    p.write_text(text)
    cfg = load_config(p)
    assert cfg.seed == 7 and cfg.tune
    assert (cfg.qpso.n_particles, cfg.qpso.n_iterations) == (4, 3)
    assert cfg.smote.k_neighbors == 3
    assert cfg.base_params.learning_rate == 0.05
    assert cfg.search_space.dims[1].lo == 20 and cfg.search_space.dims[1].hi == 40


def test_config_defaults_are_desk_scale():
    cfg = PipelineConfig()
    assert (cfg.qpso.n_particles, cfg.qpso.n_iterations) == (30, 20)
    assert cfg.search_space == SearchSpace.desk()
    assert config_from_mapping({"paper_ranges": "true"}).search_space == SearchSpace.full()
    assert config_from_mapping({"smote": "off"}).smote is None


@pytest.mark.parametrize("text,msg", [("bogus = 1", "unknown"), ("seed = x", "seed"),
                                      ("no equals sign", "line 1"),
                                      ("test_fraction = 1.0", "test_fraction"),
                                      ("cv_folds = 1", "cv_folds"),
                                      ("gbdt.learning_rate = 0", "learning_rate")])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_mapping(parse_config_text(text))


def test_seeded_propagates():
    cfg = PipelineConfig(seed=11).seeded()
    assert cfg.smote.seed == cfg.qpso.seed == cfg.base_params.seed == 11


# ----------------------------------------------------------------- training


def test_smoke_run(run_dir):
    out, report = run_dir
    assert set(report.metrics) >= {"accuracy", "precision_macro", "recall_macro", "f1_macro"}
    assert all(0.0 <= v <= 1.0 for v in report.metrics.values())
    assert report.metrics["accuracy"] > 0.3
    assert len(list((out / MODEL_DIR).glob("grade_*.model"))) == 11
    assert not out.with_name(out.name + ".partial").exists()


def test_report_recomputable_from_confusion_csv(run_dir):
    out, _ = run_dir
    stored = parse_report_metrics((out / REPORT_FILE).read_text())
    recomputed = summary(read_confusion_csv(out / CONFUSION_FILE))
    for k, v in recomputed.items():
        assert abs(stored[k] - v) <= 1e-12


def test_rerun_byte_identical(data_csv, run_dir, tmp_path):
    out, _ = run_dir
    again = tmp_path / "again"
    run_train(PipelineConfig(input_csv=data_csv, output_dir=again, seed=3, base_params=QUICK))
    names = [REPORT_FILE, CONFUSION_FILE] + [f"{MODEL_DIR}/{p.name}"
                                             for p in (out / MODEL_DIR).iterdir()]
    match, mismatch, errors = filecmp.cmpfiles(out, again, names, shallow=False)
    assert not mismatch and not errors and len(match) == len(names)


def test_test_rows_never_reach_fitting(data_csv, monkeypatch):
    records = load_raw_csv(data_csv, FeatureSchema.default())
    train_idx, test_idx = stratified_indices(record_labels(records), 0.2, 4)
    train_set = sorted(records[i] for i in train_idx)
    seen = {}
    real_fit, real_smote, real_cv = pl.fit_encoder, pl.smote_oversample, pl.CvFitness

    def spy_fit(recs, schema):
        seen["encoder"] = sorted(recs)
        return real_fit(recs, schema)

    def spy_smote(ds, cfg):
        seen.setdefault("smote", []).append(len(ds))
        return real_smote(ds, cfg)

    def spy_cv(train, *args):
        seen["cv"] = len(train)
        return real_cv(train, *args)

    monkeypatch.setattr(pl, "fit_encoder", spy_fit)
    monkeypatch.setattr(pl, "smote_oversample", spy_smote)
    monkeypatch.setattr(pl, "CvFitness", spy_cv)
    cfg = PipelineConfig(input_csv=data_csv, seed=4, tune=True, base_params=QUICK,
                         qpso=QpsoConfig(n_particles=2, n_iterations=0),
                         search_space=SearchSpace.desk().with_range("n_estimators", 5, 10))
    report = run_train(cfg)
    assert seen["encoder"] == train_set
    assert seen["cv"] == len(train_idx)
    assert max(seen["smote"]) == len(train_idx)
    assert report.info["rows_test"] == len(test_idx)


def test_tuned_run_writes_trace_and_params_in_box(data_csv, tmp_path):
    space = SearchSpace.desk().with_range("n_estimators", 5, 15)
    cfg = PipelineConfig(input_csv=data_csv, output_dir=tmp_path / "t", seed=2, tune=True,
                         qpso=QpsoConfig(n_particles=2, n_iterations=1), search_space=space)
    report = run_train(cfg)
    for d in space.dims:
        assert d.lo <= getattr(report.params_used, d.name) <= d.hi
    assert len(report.tuning_history) == 2
    assert report.tuning_history[1] <= report.tuning_history[0]
    assert (tmp_path / "t" / TRACE_FILE).read_text().count("\n") == 3


def test_refuses_foreign_output_dir(data_csv, tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    with pytest.raises(ConfigError, match="not empty"):
        run_train(PipelineConfig(input_csv=data_csv, output_dir=tmp_path))


def test_failure_removes_partial_output(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text(",".join(FeatureSchema.default().header) + "\n")
    with pytest.raises(DataError, match=r"\[encode\]"):
        run_train(PipelineConfig(input_csv=bad, output_dir=tmp_path / "out"))
    assert not (tmp_path / "out").exists()
    assert not (tmp_path / "out.partial").exists()


# --------------------------------------------------------------- inference


def test_evaluate_train_vs_test(data_csv, run_dir, tmp_path):
    out, report = run_dir
    train_csv, test_csv = split_files(data_csv, tmp_path)
    on_train = run_evaluate(out, train_csv)
    on_test = run_evaluate(out / MODEL_DIR, test_csv)
    assert on_test.confusion == report.confusion
    assert on_train.metrics["accuracy"] >= on_test.metrics["accuracy"]


def test_evaluate_twice_identical(run_dir, data_csv, tmp_path):
    out, _ = run_dir
    run_evaluate(out, data_csv, output_dir=tmp_path / "a")
    run_evaluate(out, data_csv, output_dir=tmp_path / "b")
    assert (tmp_path / "a" / REPORT_FILE).read_bytes() == (tmp_path / "b" / REPORT_FILE).read_bytes()


def test_evaluate_empty_csv(run_dir, tmp_path):
    out, _ = run_dir
    empty = tmp_path / "e.csv"
    empty.write_text(",".join(FeatureSchema.default().header) + "\n")
    with pytest.raises(DataError, match="no rows"):
        run_evaluate(out, empty)


def test_evaluate_schema_mismatch(run_dir, data_csv, tmp_path):
    out, _ = run_dir
    other = tmp_path / "schema.txt"
    other.write_text(FeatureSchema.default().to_text().replace("year-only", "none"))
    with pytest.raises(DataError, match="schema"):
        run_evaluate(out, data_csv, schema=other)


@pytest.mark.filterwarnings("ignore::vulnboost.metrics.UndefinedMetricWarning")
def test_predict_matches_evaluate(run_dir, data_csv, tmp_path):
    out, _ = run_dir
    schema = FeatureSchema.default()
    records = load_raw_csv(data_csv, schema)[:25]
    unlabeled = tmp_path / "u.csv"
    write_raw_csv([r[:-1] for r in records], unlabeled, schema, labeled=False)
    rows = run_predict(out, unlabeled, tmp_path / "p.csv")
    assert len(rows) == 25
    labeled = tmp_path / "l.csv"
    write_raw_csv(records, labeled, schema)
    model = run_evaluate(out, labeled).model
    encoder = load_encoder(out / MODEL_DIR / ENCODER_FILE)
    expected = model.predict_proba(encode_features(records, schema, encoder)).argmax(axis=1)
    assert [r["grade"] for r in rows] == expected.tolist()
    for r in rows:
        assert r["encoding"][r["grade"]] == 1 or max(r["probabilities"]) < 0.5
    with (tmp_path / "p.csv").open() as fh:
        table = list(csv.reader(fh))
    assert table[0][:2] == ["row", "grade"] and len(table) == 26


def test_predict_zero_rows(run_dir, tmp_path):
    out, _ = run_dir
    empty = tmp_path / "u.csv"
    empty.write_text(",".join(FeatureSchema.default().names) + "\n")
    assert run_predict(out, empty, tmp_path / "p.csv") == []
    assert (tmp_path / "p.csv").read_text().count("\n") == 1


# ---------------------------------------------------------------------- CLI


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "assets.csv"
    assert cli.main(["--seed", "8", "synth", "--rows", "600", "--output", str(data)]) == 0
    cfg = tmp_path / "run.cfg"
    cfg.write_text("gbdt.n_estimators = 10\ngbdt.num_leaves = 7\n")
    assert cli.main(["train", "--config", str(cfg), "--input", str(data),
                     "--output-dir", str(tmp_path / "run")]) == 0
    assert cli.main(["evaluate", "--model", str(tmp_path / "run"), "--input", str(data)]) == 0
    assert cli.main(["predict", "--model", str(tmp_path / "run"), "--input", str(data),
                     "--output", str(tmp_path / "p.csv")]) == 0
    assert cli.main(["encode", "--input", str(data), "--output-dir", str(tmp_path / "enc")]) == 0
    rows = list(csv.reader((tmp_path / "enc" / "encoded.csv").open()))
    assert len(rows) == 601 and rows[0][-1] == "Score"
    assert "metric.accuracy=" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["train", "--input", str(tmp_path / "missing.csv"),
                     "--output-dir", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_key = 1\n")
    assert cli.main(["train", "--config", str(bad), "--input", "x.csv"]) == 2
    assert cli.main(["synth"]) == 2

    def broken(cfg):
        raise InvariantError("histogram went negative")

    monkeypatch.setattr(cli, "run_train", broken)
    assert cli.main(["train", "--input", "x.csv", "--output-dir", str(tmp_path / "o")]) == 4
    with pytest.raises(SystemExit) as exc:
        cli.main(["nonsense"])
    assert exc.value.code == 2


def test_cli_same_seed_same_synth(tmp_path):
    for name in ("a", "b"):
        cli.main(["--seed", "4", "synth", "--rows", "300", "--output", str(tmp_path / name)])
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert Path(tmp_path / "a").read_text().count("\n") == 301
    assert np.unique([r[-1] for r in load_raw_csv(tmp_path / "a",
                                                  FeatureSchema.default())]).size > 5
