"""End-to-end experiment: split, encode, balance, tune, train, evaluate.

Protocol choices that the method description leaves open are fixed here and
echoed into every report:

* the stratified train/test split happens on raw records, and the label
  encoder, bin edges, SMOTE and the tuner only ever see training rows;
* the tuner's fitness is the negated mean accuracy of a stratified
  ``cv_folds``-fold cross-validation on the training partition, with each
  fold's training part SMOTE-balanced once and reused for every evaluation.
"""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (EncodedDataset, FeatureSchema, LabelEncoder, N_CLASSES, encode_dataset,
                      encode_features, fit_encoder, load_raw_csv, record_labels, stratified_folds,
                      stratified_indices)
from .errors import ConfigError, DataError, VulnBoostError
from .gbdt import GbdtParams, bin_features, build_bins, fit_binned
from .metrics import (ConfusionMatrix, confusion_matrix, format_report, summary,
                      write_confusion_csv)
from .ovr import OvrModel, class_from_proba, encoding_from_proba, load_ovr, read_manifest, \
    save_ovr, train_ovr
from .qpso import (QpsoConfig, SearchSpace, decode_params, optimize,
                   worker_count, write_trace)
from .smote import SmoteConfig, smote_oversample

logger = logging.getLogger(__name__)

MODEL_DIR = "model"
ENCODER_FILE = "encoder.json"
SCHEMA_FILE = "schema.txt"
REPORT_FILE = "report.txt"
CONFUSION_FILE = "confusion.csv"
TRACE_FILE = "tuning_trace.csv"
TIMINGS_FILE = "timings.txt"


@dataclass(frozen=True)
class PipelineConfig:
    input_csv: Path | None = None
    schema: Path | None = None
    output_dir: Path | None = None
    test_fraction: float = 0.2
    smote: SmoteConfig | None = field(default_factory=SmoteConfig)
    qpso: QpsoConfig = field(default_factory=lambda: QpsoConfig(n_particles=30, n_iterations=20))
    search_space: SearchSpace = field(default_factory=SearchSpace.desk)
    cv_folds: int = 3
    seed: int = 0
    tune: bool = False
    base_params: GbdtParams = field(default_factory=GbdtParams)
    n_workers: int | None = None

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.cv_folds < 2:
            raise ConfigError(f"cv_folds must be >= 2, got {self.cv_folds}")

    def seeded(self) -> "PipelineConfig":
        """Copy with every stage's seed set to ``self.seed``."""
        return dataclasses.replace(
            self,
            smote=None if self.smote is None else dataclasses.replace(self.smote, seed=self.seed),
            qpso=dataclasses.replace(self.qpso, seed=self.seed),
            base_params=self.base_params.replace(seed=self.seed),
        )


@dataclass
class RunReport:
    params_used: GbdtParams
    metrics: dict
    confusion: ConfusionMatrix
    tuning_history: list | None = None
    timings: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    model: OvrModel | None = field(default=None, repr=False)

    def to_text(self) -> str:
        """Deterministic report body; wall-clock timings are kept out of it."""
        lines = ["# vulnboost run report", ""]
        for k, v in self.info.items():
            lines.append(f"info.{k}={v}")
        for f in dataclasses.fields(GbdtParams):
            v = getattr(self.params_used, f.name)
            lines.append(f"param.{f.name}={format(v, '.17g') if isinstance(v, float) else v}")
        for k, v in self.metrics.items():
            lines.append(f"metric.{k}={format(v, '.17g')}")
        if self.tuning_history is not None:
            lines.append(f"tuning.best_fitness={format(self.tuning_history[-1], '.17g')}")
            lines.append(f"tuning.iterations={len(self.tuning_history) - 1}")
        lines.append("")
        lines.append(format_report(self.confusion))
        return "\n".join(lines)


def parse_report_metrics(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.startswith("metric."):
            k, _, v = line[len("metric."):].partition("=")
            out[k] = float(v)
    return out


class _Stages:
    """Times each stage and prefixes errors with the stage name."""

    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextlib.contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        try:
            yield
        except VulnBoostError as exc:
            raise type(exc)(f"[{name}] {exc}") from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0
        logger.info("stage %s done in %.2fs", name, self.timings[name])


# ----------------------------------------------------------------- training


def fit_ovr_binned(codes, edges, labels, params: GbdtParams) -> OvrModel:
    """One-vs-rest on a pre-binned matrix; grade ``c`` uses seed ``seed + c``."""
    models = []
    for c in range(N_CLASSES):
        y = (labels == c).astype(np.float64)
        models.append(fit_binned(codes, edges, y, params.replace(seed=params.seed + c)))
    return OvrModel(models)


class CvFitness:
    """Negated mean CV accuracy of the one-vs-rest model for a swarm position.

    Folds, their SMOTE balancing and their binning are prepared once.
    """

    def __init__(self, train: EncodedDataset, space: SearchSpace, base: GbdtParams,
                 n_folds: int, seed: int, smote: SmoteConfig | None):
        self.space = space
        self.base = base
        self.folds = []
        for val_idx in stratified_folds(train.labels, n_folds, seed):
            mask = np.ones(len(train), dtype=bool)
            mask[val_idx] = False
            fold_train = train.subset(np.flatnonzero(mask))
            if smote is not None:
                fold_train, _ = smote_oversample(fold_train, smote)
            missing = set(range(N_CLASSES)) - set(np.unique(fold_train.labels).tolist())
            if missing:
                raise DataError(f"a CV fold lacks grade(s) {sorted(missing)}")
            edges = build_bins(fold_train.features, base.max_bins)
            codes = bin_features(fold_train.features, edges)
            val = train.subset(val_idx)
            self.folds.append((codes, edges, fold_train.labels, val.features, val.labels))
        self.evaluations = 0

    def accuracy(self, params: GbdtParams) -> float:
        accs = []
        for codes, edges, labels, Xv, yv in self.folds:
            model = fit_ovr_binned(codes, edges, labels, params)
            pred = class_from_proba(model.predict_proba(Xv))
            accs.append(float(np.mean(pred == yv)))
        return float(np.mean(accs))

    def __call__(self, position) -> float:
        self.evaluations += 1
        return -self.accuracy(decode_params(position, self.space, self.base))


def _load_schema(path) -> FeatureSchema:
    return FeatureSchema.default() if path is None else FeatureSchema.load(path)


def _prepare_output(out: Path) -> Path:
    if out.exists() and any(out.iterdir()) and not (out / REPORT_FILE).exists():
        raise ConfigError(f"output directory {out} is not empty and holds no previous run")
    tmp = out.with_name(out.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    return tmp


def _commit_output(tmp: Path, out: Path) -> None:
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


def save_encoder(encoder: LabelEncoder, path) -> None:
    Path(path).write_text(json.dumps(encoder.to_dict(), indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_encoder(path) -> LabelEncoder:
    try:
        return LabelEncoder(json.loads(Path(path).read_text(encoding="utf-8")))
    except FileNotFoundError:
        raise DataError(f"encoder file not found: {path}") from None


def run_train(cfg: PipelineConfig) -> RunReport:
    """Run the whole experiment; writes outputs when ``cfg.output_dir`` is set.

    Every stage is seeded from ``cfg.seed``.
    """
    if cfg.input_csv is None:
        raise ConfigError("input_csv is required")
    cfg = cfg.seeded()
    stage = _Stages()
    workers = worker_count(1) if cfg.n_workers is None else cfg.n_workers
    tmp = _prepare_output(Path(cfg.output_dir)) if cfg.output_dir is not None else None
    try:
        with stage("encode"):
            schema = _load_schema(cfg.schema)
            records = load_raw_csv(cfg.input_csv, schema)
            if not records:
                raise DataError("input has no rows")
            labels = record_labels(records)
        with stage("split"):
            train_idx, test_idx = stratified_indices(labels, cfg.test_fraction, cfg.seed)
            train_records = [records[i] for i in train_idx]
            test_records = [records[i] for i in test_idx]
            encoder = fit_encoder(train_records, schema)
            train = encode_dataset(train_records, schema, encoder)
            test = encode_dataset(test_records, schema, encoder)
        with stage("smote"):
            balanced = train
            if cfg.smote is not None:
                balanced, _ = smote_oversample(train, cfg.smote)
        history = None
        params = cfg.base_params
        if cfg.tune:
            with stage("tune"):
                fitness = CvFitness(train, cfg.search_space, cfg.base_params, cfg.cv_folds,
                                    cfg.seed, cfg.smote)
                result = optimize(fitness, cfg.search_space, cfg.qpso, n_workers=workers)
                params = decode_params(result.best, cfg.search_space, cfg.base_params)
                history = result.history
        with stage("train"):
            model = train_ovr(balanced, params, n_workers=workers)
        with stage("evaluate"):
            pred = class_from_proba(model.predict_proba(test.features))
            cm = confusion_matrix(test.labels, pred)
            metrics = summary(cm)
        info = {
            "rows_total": len(records),
            "rows_train": len(train),
            "rows_train_balanced": len(balanced),
            "rows_test": len(test),
            "seed": cfg.seed,
            "test_fraction": cfg.test_fraction,
            "smote": "off" if cfg.smote is None
            else f"k={cfg.smote.k_neighbors} (training partition only)",
            "tuned": cfg.tune,
            "tuning_fitness": f"-mean {cfg.cv_folds}-fold CV accuracy" if cfg.tune else "n/a",
            "schema_hash": schema.digest(),
        }
        if cfg.tune:
            info["qpso"] = (f"particles={cfg.qpso.n_particles} iterations={cfg.qpso.n_iterations}"
                            f" beta={cfg.qpso.beta_start}->{cfg.qpso.beta_end}")
            info["search_space"] = " ".join(f"{d.name}[{d.lo},{d.hi}]"
                                            for d in cfg.search_space.dims)
        report = RunReport(params, metrics, cm, history, stage.timings, info, model)
        if tmp is not None:
            with stage("persist"):
                save_ovr(model, tmp / MODEL_DIR, schema.digest())
                save_encoder(encoder, tmp / MODEL_DIR / ENCODER_FILE)
                (tmp / MODEL_DIR / SCHEMA_FILE).write_text(schema.to_text(), encoding="utf-8")
                write_confusion_csv(cm, tmp / CONFUSION_FILE)
                (tmp / REPORT_FILE).write_text(report.to_text(), encoding="utf-8")
                if cfg.tune:
                    write_trace(result, cfg.search_space, tmp / TRACE_FILE)
            (tmp / TIMINGS_FILE).write_text(
                "".join(f"{k}={v:.3f}\n" for k, v in stage.timings.items()), encoding="utf-8")
            _commit_output(tmp, Path(cfg.output_dir))
        return report
    except BaseException:
        if tmp is not None and tmp.exists():
            shutil.rmtree(tmp)
        raise


# --------------------------------------------------------------- inference


def _open_model_dir(model_dir, schema_path=None):
    model_dir = Path(model_dir)
    if (model_dir / MODEL_DIR).is_dir():
        model_dir = model_dir / MODEL_DIR
    manifest = read_manifest(model_dir)
    schema = FeatureSchema.load(schema_path if schema_path is not None
                                else model_dir / SCHEMA_FILE)
    if manifest.get("schema_hash") != schema.digest():
        raise DataError("schema does not match the model manifest (schema hash differs)")
    encoder = load_encoder(model_dir / ENCODER_FILE)
    return load_ovr(model_dir), schema, encoder


def run_evaluate(model_dir, test_csv, schema=None, output_dir=None) -> RunReport:
    model, schema, encoder = _open_model_dir(model_dir, schema)
    records = load_raw_csv(test_csv, schema)
    if not records:
        raise DataError(f"{test_csv}: no rows to evaluate")
    data = encode_dataset(records, schema, encoder)
    pred = class_from_proba(model.predict_proba(data.features))
    cm = confusion_matrix(data.labels, pred)
    report = RunReport(model.classifiers[0].params, summary(cm), cm,
                       info={"rows_test": len(data), "schema_hash": schema.digest()}, model=model)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_confusion_csv(cm, out / CONFUSION_FILE)
        (out / REPORT_FILE).write_text(report.to_text(), encoding="utf-8")
    return report


def run_predict(model_dir, unlabeled_csv, output_csv=None) -> list[dict]:
    """Per-row grade, +/-1 code and probabilities, in input order."""
    model, schema, encoder = _open_model_dir(model_dir)
    records = load_raw_csv(unlabeled_csv, schema)
    X = encode_features(records, schema, encoder)
    proba = model.predict_proba(X) if records else np.empty((0, N_CLASSES))
    grades = class_from_proba(proba)
    codes = encoding_from_proba(proba)
    rows = [{"grade": int(g), "encoding": [int(v) for v in e], "probabilities": p.tolist()}
            for g, e, p in zip(grades, codes, proba)]
    if output_csv is not None:
        with Path(output_csv).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "grade"] + [f"code_{c}" for c in range(N_CLASSES)]
                       + [f"p_{c}" for c in range(N_CLASSES)])
            for i, r in enumerate(rows):
                w.writerow([i, r["grade"]] + r["encoding"]
                           + [format(v, ".17g") for v in r["probabilities"]])
    return rows


# ------------------------------------------------------------------ config


_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        k, sep, v = line.partition("=")
        if not sep or not k.strip():
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        out[k.strip()] = v.strip()
    return out


def config_from_mapping(values: dict[str, str], base: PipelineConfig | None = None) -> PipelineConfig:
    """Apply ``key = value`` settings (strings) on top of ``base``."""
    cfg = base or PipelineConfig()
    smote = cfg.smote if cfg.smote is not None else SmoteConfig()
    smote_on = cfg.smote is not None
    qpso = dataclasses.asdict(cfg.qpso)
    params = dataclasses.asdict(cfg.base_params)
    space = cfg.search_space
    top = {}
    n_est_range = None

    def conv(key, raw, typ):
        try:
            if typ is bool:
                return _BOOL[raw.lower()]
            return typ(raw)
        except (KeyError, ValueError):
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None

    qmap = {"particles": ("n_particles", int), "iterations": ("n_iterations", int),
            "beta_start": ("beta_start", float), "beta_end": ("beta_end", float)}
    gtypes = {f.name: (float if f.type in ("float", float) else int)
              for f in dataclasses.fields(GbdtParams)}
    for key, raw in values.items():
        if key in ("input_csv", "schema", "output_dir"):
            top[key] = Path(raw) if raw else None
        elif key == "seed":
            top["seed"] = conv(key, raw, int)
        elif key == "test_fraction":
            top["test_fraction"] = conv(key, raw, float)
        elif key == "cv_folds":
            top["cv_folds"] = conv(key, raw, int)
        elif key == "tune":
            top["tune"] = conv(key, raw, bool)
        elif key == "threads":
            top["n_workers"] = conv(key, raw, int)
        elif key == "smote":
            smote_on = conv(key, raw, bool)
        elif key == "smote_k":
            smote = dataclasses.replace(smote, k_neighbors=conv(key, raw, int))
        elif key in qmap:
            name, typ = qmap[key]
            qpso[name] = conv(key, raw, typ)
        elif key == "paper_ranges":
            if conv(key, raw, bool):
                space = SearchSpace.full()
        elif key == "n_estimators_range":
            lo, _, hi = raw.partition(",")
            n_est_range = (conv(key, lo.strip(), int), conv(key, hi.strip(), int))
        elif key.startswith("gbdt.") and key[5:] in gtypes:
            params[key[5:]] = conv(key, raw, gtypes[key[5:]])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if n_est_range is not None:
        space = space.with_range("n_estimators", *n_est_range)
    try:
        return dataclasses.replace(
            cfg, smote=smote if smote_on else None, qpso=QpsoConfig(**qpso),
            base_params=GbdtParams(**params).validate(), search_space=space, **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return config_from_mapping(parse_config_text(text), base)
