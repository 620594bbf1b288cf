"""One-vs-rest decomposition of the 11 vulnerability grades.

One binary booster per grade answers "is this asset grade ``c``?".  The
per-classifier decisions form a +/-1 code; the predicted grade is the one
whose classifier gives the highest probability (lowest grade on ties).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import N_CLASSES, EncodedDataset
from .errors import DataError, ModelFormatError
from .gbdt import GbdtModel, GbdtParams, bin_features, build_bins, fit_binned, load_model, \
    save_model
from .qpso import worker_count

MANIFEST = "manifest"
MANIFEST_FORMAT = "vulnboost-ovr/1"


def model_filename(grade: int) -> str:
    return f"grade_{grade:02d}.model"


@dataclass(eq=False)
class OvrModel:
    classifiers: list

    def __post_init__(self):
        if len(self.classifiers) != N_CLASSES:
            raise ValueError(f"need {N_CLASSES} classifiers, got {len(self.classifiers)}")
        widths = {m.n_features for m in self.classifiers}
        if len(widths) != 1:
            raise ValueError("classifiers disagree on feature count")

    @property
    def n_classes(self) -> int:
        return len(self.classifiers)

    @property
    def n_features(self) -> int:
        return self.classifiers[0].n_features

    def predict_proba(self, X) -> np.ndarray:
        """``(n_rows, 11)`` matrix of per-grade probabilities."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got {X.shape[1]}")
        return np.column_stack([m.predict_proba(X) for m in self.classifiers])


def binarize_labels(ds: EncodedDataset, grade: int) -> EncodedDataset:
    if not 0 <= grade < N_CLASSES:
        raise ValueError(f"grade must be in 0..10, got {grade}")
    return ds.with_labels((ds.labels == grade).astype(np.int64))


def train_ovr(train: EncodedDataset, params: GbdtParams = GbdtParams(),
              n_workers: int | None = None) -> OvrModel:
    """Fit one booster per grade; grade ``c`` uses seed ``params.seed + c``.

    Bin edges are computed once from ``train`` and shared by all grades.
    """
    present = set(np.unique(train.labels).tolist())
    missing = [c for c in range(N_CLASSES) if c not in present]
    if missing:
        raise DataError("training set lacks grade(s): " + ", ".join(map(str, missing)))
    params.validate()
    edges = build_bins(train.features, params.max_bins)
    codes = bin_features(train.features, edges)

    def fit(grade):
        return _fit_grade(codes, edges, train.labels, grade, params)

    workers = worker_count() if n_workers is None else n_workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            models = list(pool.map(fit, range(N_CLASSES)))
    else:
        models = [fit(c) for c in range(N_CLASSES)]
    return OvrModel(models)


def _fit_grade(codes, edges, labels, grade, params):
    y = (labels == grade).astype(np.float64)
    return fit_binned(codes, edges, y, params.replace(seed=params.seed + grade))


def retrain_grade(model: OvrModel, train: EncodedDataset, grade: int,
                  params: GbdtParams) -> OvrModel:
    """Copy of ``model`` with only grade ``grade``'s booster refitted."""
    binarize_labels(train, grade)  # range check
    if not (train.labels == grade).any():
        raise DataError(f"training set lacks grade {grade}")
    params.validate()
    edges = build_bins(train.features, params.max_bins)
    new = _fit_grade(bin_features(train.features, edges), edges, train.labels, grade, params)
    return OvrModel([new if c == grade else m for c, m in enumerate(model.classifiers)])


def encoding_from_proba(proba) -> np.ndarray:
    """+1 where a classifier's probability is at least 0.5, else -1."""
    return np.where(np.asarray(proba) >= 0.5, 1, -1).astype(np.int64)


def class_from_proba(proba) -> np.ndarray:
    return np.argmax(np.asarray(proba), axis=-1)


def _single(model, row, fn):
    X = np.asarray(row, dtype=np.float64)
    out = fn(model.predict_proba(X))
    return out[0] if X.ndim == 1 else out


def predict_encoding(model: OvrModel, row) -> np.ndarray:
    return _single(model, row, encoding_from_proba)


def predict_class(model: OvrModel, row):
    out = _single(model, row, class_from_proba)
    return int(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------- persistence


def save_ovr(model: OvrModel, directory, schema_hash: str = "") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for c, m in enumerate(model.classifiers):
        save_model(m, directory / model_filename(c))
    params = model.classifiers[0].params
    lines = [f"format={MANIFEST_FORMAT}", f"n_classes={model.n_classes}",
             f"n_features={model.n_features}", f"schema_hash={schema_hash}"]
    for f in fields(GbdtParams):
        v = getattr(params, f.name)
        lines.append(f"param.{f.name}={format(v, '.17g') if isinstance(v, float) else v}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(directory) -> dict[str, str]:
    path = Path(directory) / MANIFEST
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no manifest in model directory {directory}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise ModelFormatError("expected key=value", lineno, path)
        out[k.strip()] = v.strip()
    if out.get("format") != MANIFEST_FORMAT:
        raise ModelFormatError(f"unsupported manifest format {out.get('format')!r}", 1, path)
    return out


def load_ovr(directory) -> OvrModel:
    manifest = read_manifest(directory)
    n = int(manifest.get("n_classes", N_CLASSES))
    return OvrModel([load_model(Path(directory) / model_filename(c)) for c in range(n)])
