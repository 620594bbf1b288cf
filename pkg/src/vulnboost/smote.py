"""SMOTE class balancing on encoded feature matrices.

Every class is topped up to the size of the largest class.  Synthetic row
``j`` of a class with ``n`` members is built from base row ``j mod n`` (taken
in ascending row order) and one of that row's ``k`` nearest same-class
neighbours, at a uniform random position along the segment between them.
Random draws come from a stream keyed by ``(seed, class, base_row, ordinal)``
so the result does not depend on the order in which rows are generated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import N_CLASSES, EncodedDataset
from .errors import DataError


@dataclass(frozen=True)
class SmoteConfig:
    k_neighbors: int = 5
    target: str = "equalize-to-majority"
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.target != "equalize-to-majority":
            raise ValueError(f"unsupported balancing target {self.target!r}")


@dataclass(frozen=True)
class SyntheticProvenance:
    base_index: int
    neighbor_index: int
    gap: float


def class_distribution(ds: EncodedDataset) -> np.ndarray:
    return np.bincount(ds.labels, minlength=N_CLASSES)[:N_CLASSES]


def k_nearest_neighbors(points, query_index: int, k: int, mask) -> np.ndarray:
    """Indices of the ``k`` masked rows closest to ``points[query_index]``.

    ``mask`` is either a boolean row mask or an array of row indices.  Ties
    in Euclidean distance go to the lower row index.
    """
    points = np.asarray(points, dtype=np.float64)
    mask = np.asarray(mask)
    candidates = np.flatnonzero(mask) if mask.dtype == bool else np.unique(mask.astype(np.int64))
    candidates = candidates[candidates != query_index]
    if candidates.size == 0:
        raise DataError("neighbour search over an empty mask")
    d2 = ((points[candidates] - points[query_index]) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")
    return candidates[order[:k]]


def _class_neighbors(X: np.ndarray, k: int) -> np.ndarray:
    """Row-local neighbour table for one class (``X`` rows are already sorted)."""
    n = X.shape[0]
    # exact differences rather than the expanded |a|^2 - 2ab + |b|^2 form,
    # so equal distances compare equal and ties resolve by row order
    d2 = np.empty((n, n))
    for i in range(n):
        diff = X - X[i]
        d2[i] = np.einsum("ij,ij->i", diff, diff)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def smote_oversample(ds: EncodedDataset, cfg: SmoteConfig = SmoteConfig(), classes=None):
    """Return ``(balanced, provenance)``.

    Original rows come first and unchanged; synthetic rows follow class by
    class.  ``classes`` restricts which labels are balanced (default: all that
    occur); naming a class without rows is an error.
    """
    counts = class_distribution(ds)
    if classes is None:
        classes = np.flatnonzero(counts)
    else:
        classes = np.asarray(sorted(set(int(c) for c in classes)), dtype=np.int64)
        empty = [int(c) for c in classes if counts[c] == 0]
        if empty:
            raise DataError(f"cannot balance classes with no rows: {empty}")
    if classes.size == 0:
        return ds, []
    target = int(counts[classes].max())
    X = ds.features
    new_rows, new_labels, provenance = [], [], []
    for c in classes:
        members = np.flatnonzero(ds.labels == c)
        n = members.size
        deficit = target - n
        if deficit <= 0:
            continue
        k = min(cfg.k_neighbors, n - 1)
        table = _class_neighbors(X[members], k) if k > 0 else None
        synth = np.empty((deficit, X.shape[1]))
        for j in range(deficit):
            local = j % n
            base = members[local]
            rng = np.random.default_rng([cfg.seed, int(c), int(base), j // n])
            if k == 0:
                neighbor, gap = base, 0.0
            else:
                neighbor = members[table[local, rng.integers(k)]]
                gap = float(rng.random())
            synth[j] = X[base] + gap * (X[neighbor] - X[base])
            provenance.append(SyntheticProvenance(int(base), int(neighbor), gap))
        new_rows.append(synth)
        new_labels.append(np.full(deficit, c, dtype=np.int64))
    if not new_rows:
        return ds, []
    features = np.vstack([X] + new_rows)
    labels = np.concatenate([ds.labels] + new_labels)
    return EncodedDataset(features, labels, ds.schema, ds.encoder), provenance
