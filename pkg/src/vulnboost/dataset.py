"""Asset-record ingestion, feature encoding and the synthetic data generator.

Raw records are tuples of strings in schema order (label last when present).
Encoding turns them into a dense ``float64`` matrix:

* binary flags map ``NO -> 0`` and ``YES -> 1``;
* version-like strings are truncated to a coarser concept before label
  encoding (``Ubuntu18.04 -> Ubuntu18``);
* dates become spreadsheet serial day numbers (``1900/1/1 -> 1``);
* counts and CVSS scores are parsed as numbers.
"""
from __future__ import annotations

import csv
import datetime as _dt
import enum
import hashlib
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

N_CLASSES = 11
N_FEATURES = 12
LABEL_COLUMN = "Score"

RawAssetRecord = tuple  # tuple[str, ...], label last when labeled

#: Number of values each concept rule left unchanged because no version was found.
MERGE_WARNINGS: Counter = Counter()


class ColumnKind(str, enum.Enum):
    BINARY_FLAG = "binary-flag"
    CATEGORICAL_VERSION = "categorical-version"
    CATEGORICAL_PLAIN = "categorical-plain"
    CVE_ID = "cve-id"
    DATE = "date"
    COUNT = "count"
    CVSS_SCORE = "cvss-score"


class ConceptRule(str, enum.Enum):
    NONE = "none"
    MAJOR_ONLY = "major-only"
    MAJOR_MINOR = "major-minor"
    YEAR_ONLY = "year-only"


CATEGORICAL_KINDS = frozenset(
    {ColumnKind.CATEGORICAL_VERSION, ColumnKind.CATEGORICAL_PLAIN, ColumnKind.CVE_ID}
)


@dataclass(frozen=True)
class Column:
    name: str
    kind: ColumnKind
    rule: ConceptRule = ConceptRule.NONE


@dataclass(frozen=True)
class FeatureSchema:
    """Twelve ordered feature columns; the label column is always ``Score``."""

    columns: tuple

    def __post_init__(self):
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        if len(cols) != N_FEATURES:
            raise DataError(f"schema needs exactly {N_FEATURES} feature columns, got {len(cols)}")
        names = [c.name for c in cols]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise DataError(f"duplicate column names: {', '.join(dupes)}")
        if LABEL_COLUMN in names:
            raise DataError(f"{LABEL_COLUMN!r} is reserved for the label column")
        for c in cols:
            if c.kind is ColumnKind.CATEGORICAL_VERSION and c.rule is ConceptRule.NONE:
                raise DataError(f"categorical-version column {c.name!r} needs a concept rule")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def header(self) -> list[str]:
        return self.names + [LABEL_COLUMN]

    def to_text(self) -> str:
        return "".join(f"{c.name},{c.kind.value},{c.rule.value}\n" for c in self.columns)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def parse(cls, text: str) -> "FeatureSchema":
        columns = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise DataError(f"schema line {lineno}: expected 'name,kind,concept-rule'")
            try:
                columns.append(Column(parts[0], ColumnKind(parts[1]), ConceptRule(parts[2])))
            except ValueError as exc:
                raise DataError(f"schema line {lineno}: {exc}") from None
        return cls(tuple(columns))

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise DataError(f"schema file not found: {path}") from None
        return cls.parse(text)

    @classmethod
    def default(cls) -> "FeatureSchema":
        """The management / technical / vulnerability attributes of an asset."""
        K, R = ColumnKind, ConceptRule
        return cls((
            Column("weak_password", K.BINARY_FLAG),
            Column("firewall", K.BINARY_FLAG),
            Column("cloud_hosting", K.BINARY_FLAG),
            Column("cdn", K.BINARY_FLAG),
            Column("os", K.CATEGORICAL_VERSION, R.MAJOR_ONLY),
            Column("web_language", K.CATEGORICAL_VERSION, R.MAJOR_MINOR),
            Column("web_container", K.CATEGORICAL_VERSION, R.MAJOR_MINOR),
            Column("num_fingerprints", K.COUNT),
            Column("web_app", K.CATEGORICAL_VERSION, R.MAJOR_MINOR),
            Column("cvss_score", K.CVSS_SCORE),
            Column("vulnerabilities", K.CVE_ID, R.YEAR_ONLY),
            Column("discovery_time", K.DATE),
        ))


# --------------------------------------------------------------------------- CSV


def load_raw_csv(path, schema: FeatureSchema) -> list[RawAssetRecord]:
    """Read asset records; the ``Score`` column is optional (unlabeled input)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        if header == schema.header or header == schema.names:
            width = len(header)
        else:
            expected = schema.header
            bad = [h for h in header if h not in expected]
            missing = [n for n in schema.names if n not in header]
            detail = []
            if bad:
                detail.append("unexpected: " + ", ".join(bad))
            if missing:
                detail.append("missing: " + ", ".join(missing))
            if not detail:
                detail.append("columns out of order")
            raise DataError(f"{path}: header mismatch ({'; '.join(detail)})")
        records = []
        for row in reader:
            if not row:
                continue
            if len(row) != width:
                raise DataError(
                    f"{path}: row {reader.line_num} has {len(row)} fields, expected {width}"
                )
            records.append(tuple(cell.strip() for cell in row))
    return records


def write_raw_csv(records: Iterable[RawAssetRecord], path, schema: FeatureSchema, labeled=True):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.header if labeled else schema.names)
        writer.writerows(records)


# ---------------------------------------------------------------------- encoding

_MAJOR = re.compile(r"\d+")
_MAJOR_MINOR = re.compile(r"\d+(?:\.\d+)?")
_YEAR = re.compile(r"(?<!\d)\d{4}(?!\d)")


def concept_merge(value: str, rule) -> str:
    """Truncate a version-bearing string to the coarser concept named by ``rule``.

    >>> concept_merge("PHP5.3.29", "major-minor")
    'PHP5.3'
    >>> concept_merge("CVE-2021-44228", "year-only")
    'CVE-2021'
    """
    rule = ConceptRule(rule)
    if rule is ConceptRule.NONE:
        return value
    pattern = {
        ConceptRule.MAJOR_ONLY: _MAJOR,
        ConceptRule.MAJOR_MINOR: _MAJOR_MINOR,
        ConceptRule.YEAR_ONLY: _YEAR,
    }[rule]
    m = pattern.search(value)
    if m is None:
        MERGE_WARNINGS[rule.value] += 1
        logger.debug("no version found in %r for rule %s", value, rule.value)
        return value
    return value[: m.end()]


_SERIAL_EPOCH = _dt.date(1899, 12, 30)
_FAKE_LEAP_DAY = _dt.date(1900, 3, 1)


def date_to_serial(text: str) -> int:
    """Spreadsheet day serial of a ``YYYY/M/D`` date (``1900/1/1`` is 1).

    Serial 60 belongs to the non-existent 1900/2/29, so every date from
    1900/3/1 on is one more than its true day count from 1899/12/31.
    """
    parts = text.strip().replace("-", "/").split("/")
    try:
        if len(parts) != 3:
            raise ValueError
        y, m, d = (int(p) for p in parts)
        date = _dt.date(y, m, d)
    except ValueError:
        raise DataError(f"unparseable date: {text!r}") from None
    if y < 1900:
        raise DataError(f"date before 1900: {text!r}")
    if date >= _FAKE_LEAP_DAY:
        return (date - _SERIAL_EPOCH).days
    return (date - _SERIAL_EPOCH).days - 1


_YES = frozenset({"YES", "1", "TRUE"})
_NO = frozenset({"NO", "0", "FALSE"})


def parse_flag(text: str) -> float:
    t = text.strip().upper()
    if t in _YES:
        return 1.0
    if t in _NO:
        return 0.0
    raise DataError(f"not a binary flag: {text!r}")


class LabelEncoder:
    """Per-column category codes, assigned in sorted string order.

    Categories not seen while fitting map to one reserved code per column
    (``len(categories)``), which is logged once per value.
    """

    def __init__(self, classes: dict[str, Sequence[str]] | None = None):
        self.classes: dict[str, list[str]] = {}
        self._codes: dict[str, dict[str, int]] = {}
        for name, cats in (classes or {}).items():
            self._set(name, cats)
        self.unseen: Counter = Counter()

    def _set(self, name, cats):
        cats = sorted(set(cats))
        self.classes[name] = cats
        self._codes[name] = {c: i for i, c in enumerate(cats)}

    def fit(self, columns: dict[str, Iterable[str]]) -> "LabelEncoder":
        for name, values in columns.items():
            self._set(name, values)
        return self

    def reserved_code(self, column: str) -> int:
        return len(self.classes[column])

    def encode(self, column: str, value: str) -> int:
        try:
            return self._codes[column][value]
        except KeyError:
            if column not in self._codes:
                raise DataError(f"encoder has no column {column!r}") from None
            if self.unseen[(column, value)] == 0:
                logger.warning("unseen category %r in column %s", value, column)
            self.unseen[(column, value)] += 1
            return self.reserved_code(column)

    def decode(self, column: str, code: int) -> str:
        cats = self.classes[column]
        if not 0 <= code < len(cats):
            raise DataError(f"code {code} out of range for column {column!r}")
        return cats[code]

    def to_dict(self) -> dict[str, list[str]]:
        return {k: list(v) for k, v in self.classes.items()}

    def __eq__(self, other):
        return isinstance(other, LabelEncoder) and self.classes == other.classes


@dataclass(frozen=True, eq=False)
class EncodedDataset:
    features: np.ndarray
    labels: np.ndarray
    schema: FeatureSchema = field(default_factory=FeatureSchema.default)
    encoder: LabelEncoder = field(default_factory=LabelEncoder)

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            X = X.reshape(len(y), -1)
        if X.shape[0] != y.shape[0]:
            raise DataError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and (y.min() < 0 or y.max() >= N_CLASSES):
            raise DataError("labels must lie in 0..10")
        if np.isnan(X).any():
            raise DataError("encoded features contain missing cells")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, index) -> "EncodedDataset":
        index = np.asarray(index, dtype=np.int64)
        return EncodedDataset(self.features[index], self.labels[index], self.schema, self.encoder)

    def with_labels(self, labels) -> "EncodedDataset":
        """Same features, new labels (labels are not range-checked beyond 0..10)."""
        return EncodedDataset(self.features, labels, self.schema, self.encoder)


def _parse_label(text: str, row: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}: unparseable score {text!r}") from None
    if value != int(value) or not 0 <= value <= N_CLASSES - 1:
        raise DataError(f"row {row}: score {text!r} outside 0..10")
    return int(value)


def _parse_number(text: str, column: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}: column {column!r} is not numeric: {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}: column {column!r} is not finite: {text!r}")
    return value


def record_labels(records: Sequence[RawAssetRecord]) -> np.ndarray:
    """Parse the trailing ``Score`` of every labeled record."""
    for i, rec in enumerate(records):
        if len(rec) != N_FEATURES + 1:
            raise DataError(f"row {i + 2}: expected a labeled record of {N_FEATURES + 1} fields")
    return np.array([_parse_label(r[-1], i + 2) for i, r in enumerate(records)], dtype=np.int64)


def fit_encoder(records: Sequence[RawAssetRecord], schema: FeatureSchema) -> LabelEncoder:
    columns = {}
    for j, col in enumerate(schema.columns):
        if col.kind in CATEGORICAL_KINDS:
            columns[col.name] = {concept_merge(r[j], col.rule) for r in records}
    return LabelEncoder().fit(columns)


def encode_features(records: Sequence[RawAssetRecord], schema: FeatureSchema,
                    encoder: LabelEncoder) -> np.ndarray:
    X = np.empty((len(records), N_FEATURES), dtype=np.float64)
    for i, rec in enumerate(records):
        row = i + 2  # header is line 1
        for j, col in enumerate(schema.columns):
            cell = rec[j]
            kind = col.kind
            if kind is ColumnKind.BINARY_FLAG:
                try:
                    X[i, j] = parse_flag(cell)
                except DataError as exc:
                    raise DataError(f"row {row}: column {col.name!r}: {exc}") from None
            elif kind in CATEGORICAL_KINDS:
                X[i, j] = encoder.encode(col.name, concept_merge(cell, col.rule))
            elif kind is ColumnKind.DATE:
                try:
                    X[i, j] = date_to_serial(cell)
                except DataError as exc:
                    raise DataError(f"row {row}: column {col.name!r}: {exc}") from None
            else:
                X[i, j] = _parse_number(cell, col.name, row)
    return X


def encode_dataset(records: Sequence[RawAssetRecord], schema: FeatureSchema,
                   encoder: LabelEncoder | None = None) -> EncodedDataset:
    """Encode labeled records; fits a fresh encoder unless one is given."""
    labels = record_labels(records)
    if encoder is None:
        encoder = fit_encoder(records, schema)
    X = encode_features(records, schema, encoder)
    return EncodedDataset(X, labels, schema, encoder)


# ------------------------------------------------------------------------ split


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_indices(labels, test_fraction: float, seed: int):
    """Per-class shuffled split; returns sorted ``(train_idx, test_idx)``."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 2:
            raise DataError(f"class {c} has {members.size} row(s); stratified split needs >= 2")
        n_test = _round_half_up(members.size * test_fraction)
        perm = rng.permutation(members)
        test.append(perm[:n_test])
        train.append(perm[n_test:])
    if not train:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def stratified_split(ds: EncodedDataset, test_fraction: float = 0.2, seed: int = 0):
    train_idx, test_idx = stratified_indices(ds.labels, test_fraction, seed)
    return ds.subset(train_idx), ds.subset(test_idx)


def stratified_folds(labels, n_folds: int, seed: int) -> list[np.ndarray]:
    """Assign each class's shuffled rows round-robin to ``n_folds`` folds."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        perm = rng.permutation(np.flatnonzero(labels == c))
        fold_of[perm] = (np.arange(perm.size) + offset) % n_folds
        offset += perm.size
    return [np.flatnonzero(fold_of == k) for k in range(n_folds)]


# -------------------------------------------------------------------- synthetic

_OS = ["Ubuntu14.04", "Ubuntu16.04", "Ubuntu18.04", "Ubuntu20.04", "Ubuntu22.04",
       "CentOS6.10", "CentOS7.9", "CentOS8.5", "Debian9.13", "Debian10.11",
       "WindowsServer2012", "WindowsServer2016"]
_LANG = ["PHP5.3.29", "PHP5.6.40", "PHP7.2.34", "PHP7.4.3", "PHP8.1.2",
         "Python3.8.10", "Java1.8.0", "ASP.NET4.0.30319"]
_CONTAINER = ["Apache2.2.15", "Apache2.4.33", "Apache2.4.52", "nginx1.14.2",
              "nginx1.18.0", "IIS8.5", "IIS10.0", "Tomcat8.5.72", "Tomcat9.0.41"]
_APP = ["WordPress4.9.8", "WordPress5.9.3", "WordPress6.0.1", "Drupal7.78",
        "Drupal9.3.2", "Joomla3.9.27", "Discuz3.4", "phpMyAdmin4.8.1"]


def _apportion(n: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder allocation of ``n`` rows to classes."""
    quota = n * weights / weights.sum()
    counts = np.floor(quota).astype(np.int64)
    remainder = quota - counts
    order = np.lexsort((np.arange(weights.size), -remainder))
    counts[order[: n - counts.sum()]] += 1
    return counts


def _candidates(rng: np.random.Generator, m: int) -> dict[str, np.ndarray]:
    c = {
        "weak_password": rng.random(m) < 0.3,
        "firewall": rng.random(m) < 0.5,
        "cloud_hosting": rng.random(m) < 0.5,
        "cdn": rng.random(m) < 0.3,
        "os": rng.integers(len(_OS), size=m),
        "web_language": rng.integers(len(_LANG), size=m),
        "web_container": rng.integers(len(_CONTAINER), size=m),
        "num_fingerprints": rng.integers(0, 9, size=m),
        "web_app": rng.integers(len(_APP), size=m),
        "cvss_score": np.round(rng.uniform(0.0, 10.0, size=m), 1),
        "cve_year": rng.integers(2015, 2023, size=m),
        "cve_id": rng.integers(1000, 50000, size=m),
        "day_offset": rng.integers(0, 365, size=m),
        "noise": rng.uniform(-0.4, 0.4, size=m),
    }
    return c


def synthetic_score(cvss, n_vulns, weak_password, firewall, noise):
    """The planted labeling rule: monotone in CVSS and vulnerability count."""
    raw = (0.6 * cvss + 0.55 * n_vulns + 1.5 * weak_password - 1.5 * firewall - 0.8 + noise)
    return np.clip(np.floor(raw + 0.5), 0, N_CLASSES - 1).astype(np.int64)


def synth_dataset(n_rows: int, imbalance: Sequence[float], seed: int) -> list[RawAssetRecord]:
    """Draw labeled records in the default schema.

    Candidate assets are sampled independently and labeled by
    :func:`synthetic_score`, whose vulnerability-count input is the
    ``num_fingerprints`` column.  Candidates are then kept per grade until each
    grade holds its share of ``n_rows`` (largest-remainder apportionment of
    ``imbalance``), so the class prior is exact and the label stays a
    deterministic function of the features.
    """
    if n_rows < 110:
        raise DataError(f"n_rows must be >= 110, got {n_rows}")
    w = np.asarray(imbalance, dtype=np.float64)
    if w.shape != (N_CLASSES,) or (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
        raise DataError("imbalance must be 11 non-negative weights, not all zero")
    need = _apportion(n_rows, w)
    rng = np.random.default_rng(seed)
    picked: list[list[int]] = [[] for _ in range(N_CLASSES)]
    pools = []
    base = 0
    for _ in range(500):
        if all(len(p) >= k for p, k in zip(picked, need)):
            break
        batch = _candidates(rng, max(4 * n_rows, 20000))
        score = synthetic_score(batch["cvss_score"], batch["num_fingerprints"],
                                batch["weak_password"], batch["firewall"], batch["noise"])
        for c in range(N_CLASSES):
            short = need[c] - len(picked[c])
            if short > 0:
                picked[c].extend((base + np.flatnonzero(score == c)[:short]).tolist())
        pools.append(batch)
        base += score.size
    else:
        raise DataError("could not fill every class; imbalance weights are degenerate")
    cat = {k: np.concatenate([p[k] for p in pools]) for k in pools[0]}
    rows = np.array([i for c in range(N_CLASSES) for i in picked[c]], dtype=np.int64)
    labels = np.repeat(np.arange(N_CLASSES), need)
    order = rng.permutation(rows.size)
    rows, labels = rows[order], labels[order]

    def flag(v):
        return "YES" if v else "NO"

    records = []
    for i, label in zip(rows, labels):
        year = int(cat["cve_year"][i])
        found = _dt.date(year, 1, 1) + _dt.timedelta(days=int(cat["day_offset"][i]))
        records.append((
            flag(cat["weak_password"][i]),
            flag(cat["firewall"][i]),
            flag(cat["cloud_hosting"][i]),
            flag(cat["cdn"][i]),
            _OS[cat["os"][i]],
            _LANG[cat["web_language"][i]],
            _CONTAINER[cat["web_container"][i]],
            str(int(cat["num_fingerprints"][i])),
            _APP[cat["web_app"][i]],
            f"{cat['cvss_score'][i]:.1f}",
            f"CVE-{year}-{int(cat['cve_id'][i])}",
            f"{found.year}/{found.month}/{found.day}",
            str(int(label)),
        ))
    return records


# Fig.-1-like skew: the largest grade near 20 %, the smallest under 5 %.
SKEWED_WEIGHTS = (0.04, 0.06, 0.08, 0.10, 0.12, 0.20, 0.12, 0.10, 0.08, 0.06, 0.04)
