"""Binary gradient-boosted trees with a second-order logistic objective.

Each boosting round fits a tree to the per-sample gradient ``g`` and hessian
``h`` of the logistic loss at the current raw scores.  For a leaf holding
rows with sums ``G`` and ``H`` the regularised second-order objective is
minimised by the leaf value ``-G / (H + lambda_l2)``, and a split is worth

    G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda) - 2*gamma_leaf

Features are quantised once into at most ``max_bins`` bins; split search scans
per-bin histograms and trees grow leaf-wise (best leaf first).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import _kernels
from .dataset import EncodedDataset
from .errors import DataError, ModelFormatError

FORMAT_TAG = "vulnboost-gbdt/1"
HESS_FLOOR = 1e-16


@dataclass(frozen=True)
class GbdtParams:
    learning_rate: float = 0.1
    n_estimators: int = 100
    max_depth: int = 8
    num_leaves: int = 31
    feature_fraction: float = 1.0
    bagging_fraction: float = 1.0
    lambda_l2: float = 1.0
    gamma_leaf: float = 0.0
    min_data_in_leaf: int = 20
    max_bins: int = 255
    seed: int = 0

    def validate(self) -> "GbdtParams":
        problems = []
        if not self.learning_rate > 0:
            problems.append("learning_rate must be > 0")
        if self.n_estimators < 0:
            problems.append("n_estimators must be >= 0")
        if self.max_depth < 1:
            problems.append("max_depth must be >= 1")
        if self.num_leaves < 2:
            problems.append("num_leaves must be >= 2")
        for name in ("feature_fraction", "bagging_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                problems.append(f"{name} must be in (0, 1]")
        if self.lambda_l2 < 0 or self.gamma_leaf < 0:
            problems.append("lambda_l2 and gamma_leaf must be >= 0")
        if self.min_data_in_leaf < 1:
            problems.append("min_data_in_leaf must be >= 1")
        if not 2 <= self.max_bins <= 65536:
            problems.append("max_bins must be in [2, 65536]")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def replace(self, **changes) -> "GbdtParams":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------- loss / derivatives


def logistic_grad_hess(label, raw_score):
    """First and second derivative of the logistic loss w.r.t. the raw score."""
    p = expit(np.asarray(raw_score, dtype=np.float64))
    g = p - label
    h = np.maximum(p * (1.0 - p), HESS_FLOOR)
    if np.ndim(g) == 0:
        return float(g), float(h)
    return g, h


def logistic_loss(label, raw_score):
    """Per-sample ``-[y ln p + (1-y) ln(1-p)]`` with ``p = sigmoid(raw)``."""
    raw = np.asarray(raw_score, dtype=np.float64)
    return np.logaddexp(0.0, raw) - label * raw


# ------------------------------------------------------------------------ binning


def build_bins(features, max_bins: int = 255) -> list[np.ndarray]:
    """Per-feature ascending thresholds; a value ``x`` falls in bin
    ``#(thresholds < x)``, so each feature has ``len(thresholds) + 1`` bins."""
    if max_bins < 2:
        raise ValueError("max_bins must be >= 2")
    X = np.asarray(features, dtype=np.float64)
    edges = []
    for j in range(X.shape[1]):
        values = np.unique(X[:, j])
        if values.size <= max_bins:
            cuts = (values[:-1] + values[1:]) / 2.0
        else:
            probs = np.arange(1, max_bins) / max_bins
            cuts = np.unique(np.quantile(X[:, j], probs))
            # a cut at the column maximum would leave the top bin empty
            cuts = cuts[cuts < values[-1]]
        edges.append(np.ascontiguousarray(cuts, dtype=np.float64))
    return edges


def bin_features(features, bin_edges) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(bin_edges):
        raise DataError(f"expected {len(bin_edges)} features, got {X.shape[1]}")
    widest = max((e.size + 1 for e in bin_edges), default=1)
    dtype = np.uint8 if widest <= 256 else np.uint16
    codes = np.empty(X.shape, dtype=dtype)
    for j, e in enumerate(bin_edges):
        codes[:, j] = np.searchsorted(e, X[:, j], side="left")
    return codes


def n_bins_of(bin_edges) -> np.ndarray:
    return np.array([e.size + 1 for e in bin_edges], dtype=np.int64)


def build_histogram(codes, grad, hess, rows, features, n_bins_max):
    """Per-feature ``(sum g, sum h, count)`` per bin over ``rows``."""
    return _kernels.build_histogram(codes, np.asarray(grad, np.float64),
                                    np.asarray(hess, np.float64),
                                    np.asarray(rows, np.int64),
                                    np.asarray(features, np.int64), int(n_bins_max))


# ---------------------------------------------------------------------- trees


@dataclass(frozen=True)
class Split:
    feature: int
    bin: int
    gain: float


def best_split(codes, grad, hess, rows, n_bins, params: GbdtParams, features=None):
    """Best ``bin <= b`` cut for the node made of ``rows``, or ``None``."""
    rows = np.asarray(rows, np.int64)
    n_bins = np.asarray(n_bins, np.int64)
    if features is None:
        features = np.arange(codes.shape[1], dtype=np.int64)
    features = np.sort(np.asarray(features, np.int64))
    if rows.size < max(2, 2 * params.min_data_in_leaf):
        return None
    hist = build_histogram(codes, grad, hess, rows, features, int(n_bins.max()))
    f, b, gain = _kernels.find_best_split(hist, features, n_bins, float(params.lambda_l2),
                                          float(params.gamma_leaf),
                                          float(params.min_data_in_leaf))
    if f < 0:
        return None
    return Split(int(f), int(b), float(gain))


@dataclass(frozen=True, eq=False)
class Tree:
    """Array-encoded binary tree; node 0 is the root, leaves have feature -1."""

    feature: np.ndarray
    threshold_bin: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    @property
    def leaf_values(self) -> np.ndarray:
        return self.value[self.feature < 0]

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, np.int64)
        for k in range(self.n_nodes):
            if self.feature[k] >= 0:
                d[self.left[k]] = d[k] + 1
                d[self.right[k]] = d[k] + 1
        return int(d.max())

    def apply(self, codes) -> np.ndarray:
        return _kernels.apply_tree(codes, self.feature, self.threshold_bin, self.left, self.right)

    def predict_binned(self, codes) -> np.ndarray:
        return self.value[self.apply(codes)]


def grow_tree(codes, grad, hess, rows, n_bins, params: GbdtParams, features=None,
              num_leaves=None) -> Tree:
    """Grow one tree on ``rows`` of the binned matrix ``codes``.

    ``num_leaves`` overrides ``params.num_leaves`` (a value of 1 yields a
    single leaf).
    """
    rows = np.sort(np.asarray(rows, np.int64))
    if rows.size == 0:
        raise DataError("cannot grow a tree on an empty sample set")
    n_bins = np.asarray(n_bins, np.int64)
    if features is None:
        features = np.arange(codes.shape[1], dtype=np.int64)
    features = np.sort(np.asarray(features, np.int64))
    leaves = params.num_leaves if num_leaves is None else num_leaves
    arrays = _kernels.grow_tree(codes, np.asarray(grad, np.float64), np.asarray(hess, np.float64),
                                rows, features, n_bins, int(n_bins.max()), int(leaves),
                                int(params.max_depth), float(params.lambda_l2),
                                float(params.gamma_leaf), float(params.min_data_in_leaf))
    return Tree(*(np.ascontiguousarray(a) for a in arrays))


def tree_penalty(tree: Tree, params: GbdtParams, scale: float = 1.0) -> float:
    """``gamma_leaf * leaves + lambda_l2/2 * sum(w^2)`` for leaf outputs ``scale * value``."""
    w = scale * tree.leaf_values
    return params.gamma_leaf * tree.n_leaves + 0.5 * params.lambda_l2 * float(w @ w)


# ---------------------------------------------------------------------- model


@dataclass(eq=False)
class GbdtModel:
    trees: list
    base_score: float
    bin_edges: list
    params: GbdtParams = field(default_factory=GbdtParams)

    @property
    def n_features(self) -> int:
        return len(self.bin_edges)

    def raw_score(self, X, n_trees: int | None = None) -> np.ndarray:
        codes = bin_features(X, self.bin_edges)
        scores = np.full(codes.shape[0], self.base_score)
        lr = self.params.learning_rate
        for t in self.trees[:n_trees]:
            _kernels.add_tree_scores(scores, codes, t.feature, t.threshold_bin, t.left,
                                     t.right, t.value, lr)
        return scores

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.raw_score(X))

    def objective(self, X, y, n_trees: int | None = None) -> float:
        """Training loss plus the penalties of the first ``n_trees`` trees."""
        loss = float(logistic_loss(np.asarray(y, np.float64), self.raw_score(X, n_trees)).sum())
        lr = self.params.learning_rate
        return loss + sum(tree_penalty(t, self.params, lr) for t in self.trees[:n_trees])


def predict_proba(model: GbdtModel, row) -> float | np.ndarray:
    """Probability of the positive class for one row (or each row of a matrix)."""
    X = np.asarray(row, dtype=np.float64)
    if X.shape[-1] != model.n_features:
        raise DataError(f"expected {model.n_features} features, got {X.shape[-1]}")
    p = model.predict_proba(X)
    return float(p[0]) if X.ndim == 1 else p


def _sample(rng, n, fraction):
    if fraction >= 1.0:
        return np.arange(n, dtype=np.int64)
    m = max(1, int(round(fraction * n)))
    return np.sort(rng.choice(n, size=m, replace=False))


def fit_binned(codes, bin_edges, y, params: GbdtParams) -> GbdtModel:
    """Boost on an already-binned matrix (shared by the one-vs-rest trainer)."""
    params.validate()
    y = np.asarray(y, dtype=np.float64)
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos + neg != y.size:
        raise DataError("binary training needs labels in {0, 1}")
    if pos == 0 or neg == 0:
        raise DataError("binary training needs both classes present")
    base = math.log(pos / neg)
    n, n_feat = codes.shape
    n_bins = n_bins_of(bin_edges)
    rng = np.random.default_rng(params.seed)
    scores = np.full(n, base)
    lr = float(params.learning_rate)
    trees = []
    for _ in range(params.n_estimators):
        rows = _sample(rng, n, params.bagging_fraction)
        feats = _sample(rng, n_feat, params.feature_fraction)
        g, h = logistic_grad_hess(y, scores)
        tree = grow_tree(codes, g, h, rows, n_bins, params, features=feats)
        _kernels.add_tree_scores(scores, codes, tree.feature, tree.threshold_bin, tree.left,
                                 tree.right, tree.value, lr)
        trees.append(tree)
    return GbdtModel(trees, base, list(bin_edges), params)


def train_binary(train: EncodedDataset, params: GbdtParams = GbdtParams()) -> GbdtModel:
    if isinstance(train, EncodedDataset):
        X, y = train.features, train.labels
    else:
        X, y = train
    edges = build_bins(X, params.max_bins)
    return fit_binned(bin_features(X, edges), edges, y, params)


# ---------------------------------------------------------------- persistence


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_model(model: GbdtModel) -> str:
    lines = [f"format={FORMAT_TAG}", f"base_score={_fmt(model.base_score)}"]
    for f in dataclasses.fields(GbdtParams):
        v = getattr(model.params, f.name)
        lines.append(f"param.{f.name}={_fmt(v) if isinstance(v, float) else v}")
    lines.append(f"n_features={model.n_features}")
    for j, e in enumerate(model.bin_edges):
        lines.append(f"bins={j}:" + ",".join(_fmt(v) for v in e))
    lines.append(f"n_trees={len(model.trees)}")
    for k, t in enumerate(model.trees):
        lines.append(f"tree {k} nodes={t.n_nodes}")
        for i in range(t.n_nodes):
            if t.feature[i] >= 0:
                lines.append(f"node {i} split {t.feature[i]} {t.threshold_bin[i]} "
                             f"{t.left[i]} {t.right[i]}")
            else:
                lines.append(f"leaf {i} {_fmt(t.value[i])}")
        lines.append("end")
    return "\n".join(lines) + "\n"


def save_model(model: GbdtModel, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


class _Lines:
    def __init__(self, text, path):
        self.lines = text.splitlines()
        self.pos = 0
        self.path = path

    def error(self, msg, lineno=None):
        return ModelFormatError(msg, lineno if lineno is not None else self.pos, self.path)

    def next(self, what):
        if self.pos >= len(self.lines):
            raise self.error(f"unexpected end of file, expected {what}", len(self.lines) + 1)
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def key(self, name):
        line = self.next(name)
        k, sep, v = line.partition("=")
        if not sep or k != name:
            raise self.error(f"expected '{name}=...', got {line!r}")
        return v


def loads_model(text: str, path=None) -> GbdtModel:
    src = _Lines(text, path)
    try:
        if src.key("format") != FORMAT_TAG:
            raise src.error(f"unsupported format, expected {FORMAT_TAG}")
        base = float(src.key("base_score"))
        values = {}
        for f in dataclasses.fields(GbdtParams):
            raw = src.key(f"param.{f.name}")
            values[f.name] = float(raw) if f.type in ("float", float) else int(raw)
        params = GbdtParams(**values)
        n_features = int(src.key("n_features"))
        edges = []
        for j in range(n_features):
            idx, sep, body = src.key("bins").partition(":")
            if not sep or int(idx) != j:
                raise src.error(f"expected bins for feature {j}")
            e = np.array([float(v) for v in body.split(",")] if body else [], dtype=np.float64)
            if e.size > 1 and not (np.diff(e) > 0).all():
                raise src.error("bin edges must be strictly increasing")
            edges.append(e)
        n_trees = int(src.key("n_trees"))
        trees = []
        for k in range(n_trees):
            head = src.next(f"tree {k}").split()
            if len(head) != 3 or head[0] != "tree" or int(head[1]) != k \
                    or not head[2].startswith("nodes="):
                raise src.error(f"expected 'tree {k} nodes=N'")
            n = int(head[2][len("nodes="):])
            feat = np.full(n, -1, np.int64)
            thr = np.full(n, -1, np.int64)
            left = np.full(n, -1, np.int64)
            right = np.full(n, -1, np.int64)
            value = np.zeros(n)
            for i in range(n):
                parts = src.next("node line").split()
                if parts[:2] == ["node", str(i)] and len(parts) == 7 and parts[2] == "split":
                    feat[i], thr[i], left[i], right[i] = (int(p) for p in parts[3:])
                    if not (0 <= feat[i] < n_features and i < left[i] < n and i < right[i] < n):
                        raise src.error("split node references out of range")
                elif parts[:2] == ["leaf", str(i)] and len(parts) == 3:
                    value[i] = float(parts[2])
                else:
                    raise src.error(f"malformed node {i}: {' '.join(parts)!r}")
            if src.next("end") != "end":
                raise src.error("expected 'end'")
            trees.append(Tree(feat, thr, left, right, value))
    except ModelFormatError:
        raise
    except (ValueError, IndexError) as exc:
        raise src.error(str(exc)) from None
    if src.pos != len([ln for ln in src.lines]) and any(ln.strip() for ln in src.lines[src.pos:]):
        raise src.error("trailing content after last tree", src.pos + 1)
    return GbdtModel(trees, base, edges, params)


def load_model(path) -> GbdtModel:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"model file not found: {path}") from None
    return loads_model(text, path)
