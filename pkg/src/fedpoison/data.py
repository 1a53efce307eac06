"""Dataset loading, preprocessing, splitting and client partitioning."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedpoison.errors import DataError

log = logging.getLogger(__name__)

CACHE_MAGIC = b"FPDS"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIQQI")

# Flow identifiers carry no generalizable signal and are not encodable as features.
DEFAULT_DROP_COLUMNS = ("Flow ID", "Src IP", "Dst IP", "Timestamp", "Source IP", "Destination IP")
MAX_CATEGORIES = 64


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    c: int
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise DataError(f"X must be 2-D, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise DataError(f"{self.X.shape[0]} rows but {self.y.size} labels")
        if not np.all(np.isfinite(self.X)):
            raise DataError("X contains NaN or Inf")
        if self.c < 1:
            raise DataError("class count must be >= 1")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.c):
            raise DataError(f"labels must lie in [0, {self.c})")
        if not self.feature_names:
            self.feature_names = [f"f{i}" for i in range(self.X.shape[1])]
        elif len(self.feature_names) != self.X.shape[1]:
            raise DataError("feature_names length does not match column count")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.c, list(self.feature_names))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.c)


@dataclass
class Standardizer:
    """Per-column z-score statistics; a zero spread is treated as 1."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        # the float mean of a constant column can miss the constant by an ulp
        const = X.max(axis=0) == X.min(axis=0)
        mean[const] = X[0, const]
        std[const | (std == 0.0)] = 1.0
        return cls(mean, std)

    def apply(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale

    def transform(self, ds: Dataset) -> Dataset:
        return Dataset(self.apply(ds.X), ds.y, ds.c, list(ds.feature_names))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["scale"], dtype=np.float64))


@dataclass
class RawTable:
    header: list[str]
    rows: list[list[str]]


def read_csv(path) -> RawTable:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: empty CSV")
            rows = [row for row in reader if row]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    header = [h.strip() for h in header]
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i + 2} has {len(row)} fields, header has {len(header)}")
    return RawTable(header, rows)


def _parse_float(s: str) -> float | None:
    s = s.strip()
    if not s:
        return math.nan
    try:
        # float() accepts inf/infinity/nan in any case, which covers CICFlowMeter exports
        return float(s)
    except ValueError:
        return None


def _first_appearance_codes(values) -> tuple[np.ndarray, list[str]]:
    vocab: dict[str, int] = {}
    codes = np.array([vocab.setdefault(v, len(vocab)) for v in values], dtype=np.int64)
    return codes, list(vocab)


@dataclass
class Preprocessed:
    dataset: Dataset
    label_names: list[str]
    standardizer: Standardizer | None
    dropped_columns: list[str]


def preprocess(
    raw: RawTable,
    label_column: str = "Label",
    drop_columns=DEFAULT_DROP_COLUMNS,
    standardize: bool = True,
    max_categories: int = MAX_CATEGORIES,
) -> Preprocessed:
    """Turn a parsed CSV into a numeric Dataset.

    Rows with a missing or non-finite numeric value are removed. Text columns
    with at most ``max_categories`` distinct values are integer-encoded in
    first-appearance order; other text columns, and ``drop_columns``, are
    dropped. Labels are encoded the same way. With ``standardize`` the feature
    columns are z-scored using this table's statistics.
    """
    header = [h.strip() for h in raw.header]
    if label_column not in header:
        raise DataError(f"label column {label_column!r} not found")
    label_idx = header.index(label_column)
    drop = set(drop_columns)
    feature_idx = [i for i, h in enumerate(header) if i != label_idx and h not in drop]
    dropped = [h for i, h in enumerate(header) if i != label_idx and h in drop]

    numeric: dict[int, np.ndarray] = {}
    text: list[int] = []
    for j in list(feature_idx):
        parsed = [_parse_float(row[j]) for row in raw.rows]
        if all(v is not None for v in parsed):
            numeric[j] = np.array(parsed, dtype=np.float64)
        elif len({row[j].strip() for row in raw.rows} - {""}) <= max_categories:
            text.append(j)
        else:
            feature_idx.remove(j)
            dropped.append(header[j])

    keep = np.ones(len(raw.rows), dtype=bool)
    for col in numeric.values():
        keep &= np.isfinite(col)
    for j in text + [label_idx]:
        keep &= np.array([bool(row[j].strip()) for row in raw.rows], dtype=bool)
    kept_rows = np.flatnonzero(keep)
    if kept_rows.size == 0:
        raise DataError("no usable rows after removing missing/non-finite values")

    columns, names = [], []
    for j in feature_idx:
        if j in numeric:
            columns.append(numeric[j][kept_rows])
        else:
            values = [raw.rows[r][j].strip() for r in kept_rows]
            codes, _ = _first_appearance_codes(values)
            columns.append(codes.astype(np.float64))
        names.append(header[j])
    if not columns:
        raise DataError("no feature columns left after preprocessing")

    X = np.column_stack(columns)
    y, label_names = _first_appearance_codes([raw.rows[r][label_idx].strip() for r in kept_rows])
    dropped_count = len(raw.rows) - kept_rows.size
    if dropped_count:
        log.info("dropped %d rows with missing or non-finite values", dropped_count)

    standardizer = None
    if standardize:
        standardizer = Standardizer.fit(X)
        X = standardizer.apply(X)
    ds = Dataset(X, y, len(label_names), names)
    return Preprocessed(ds, label_names, standardizer, dropped)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_indices(y, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test index split, both sorted ascending."""
    y = np.asarray(y)
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    if y.size < 2:
        raise ValueError("need at least 2 rows to split")
    rng = np.random.default_rng(seed)
    train, test, singletons = [], [], []
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        if idx.size == 1:
            singletons.append(int(cls))
            train.append(idx)
            continue
        k = _round_half_up(train_fraction * idx.size)
        train.append(idx[:k])
        test.append(idx[k:])
    if singletons:
        log.warning("classes %s have a single sample; assigned to train", singletons)
    tr = np.sort(np.concatenate(train)) if train else np.empty(0, np.int64)
    te = np.sort(np.concatenate(test)) if test else np.empty(0, np.int64)
    return tr.astype(np.int64), te.astype(np.int64)


def split(dataset: Dataset, train_fraction: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    tr, te = split_indices(dataset.y, train_fraction, seed)
    return dataset.subset(tr), dataset.subset(te)


@dataclass
class PartitionPlan:
    client_shards: list[np.ndarray]
    method: str
    alpha: float | None
    seed: int

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.client_shards]


def partition(train_labels, n_clients: int, method: str = "dirichlet", alpha: float = 0.5, seed: int = 0) -> PartitionPlan:
    """Assign training row indices to clients.

    ``iid`` deals a shuffled permutation round-robin. ``dirichlet`` draws, for
    each class in ascending order, client proportions from Dirichlet(alpha)
    and cuts that class's shuffled rows at the cumulative proportions. Empty
    shards are then filled one row at a time from the largest shard.
    """
    y = np.asarray(getattr(train_labels, "y", train_labels))
    n = y.size
    if n_clients < 2:
        raise ValueError("n_clients must be >= 2")
    if n_clients > n:
        raise ValueError(f"cannot partition {n} rows among {n_clients} clients")
    rng = np.random.default_rng(seed)
    if method == "iid":
        perm = rng.permutation(n)
        shards = [perm[k::n_clients] for k in range(n_clients)]
    elif method == "dirichlet":
        if not alpha > 0:
            raise ValueError("dirichlet alpha must be > 0")
        buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for cls in np.unique(y):
            idx = rng.permutation(np.flatnonzero(y == cls))
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props) * idx.size).astype(np.int64)[:-1]
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].append(part)
        shards = [np.concatenate(b) for b in buckets]
        for k in range(n_clients):
            while shards[k].size == 0:
                donor = int(np.argmax([s.size for s in shards]))
                shards[k] = shards[donor][-1:]
                shards[donor] = shards[donor][:-1]
    else:
        raise ValueError(f"unknown partition method {method!r}")
    shards = [np.sort(s).astype(np.int64) for s in shards]
    return PartitionPlan(shards, method, alpha if method == "dirichlet" else None, seed)


def simplex_means(c: int, d: int, separation: float) -> np.ndarray:
    """``c`` points in R^d with every pairwise distance equal to ``separation``."""
    if c == 1:
        return np.zeros((1, d))
    if d < c - 1:
        raise ValueError(f"an equidistant set of {c} points needs d >= {c - 1}")
    # scaled basis vectors are equidistant; project onto the (c-1)-dim hyperplane they span
    verts = np.eye(c) * (separation / math.sqrt(2.0))
    centered = verts - verts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[: c - 1].T
    out = np.zeros((c, d))
    out[:, : c - 1] = coords
    return out


def make_synthetic(n: int, d: int, c: int, separation: float, seed: int = 0) -> Dataset:
    """Gaussian blobs, unit covariance, one blob per class with equal counts (+/-1)."""
    if c < 1 or n < c:
        raise ValueError("need n >= c >= 1")
    if d < 2:
        raise ValueError("d must be >= 2")
    if not separation > 0:
        raise ValueError("separation must be > 0")
    rng = np.random.default_rng(seed)
    means = simplex_means(c, d, separation)
    y = np.arange(n) % c
    y = y[rng.permutation(n)]
    X = means[y] + rng.standard_normal((n, d))
    return Dataset(X, y, c, [f"x{i}" for i in range(d)])


def save_cache(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, dataset.n, dataset.d, dataset.c))
        fh.write(dataset.X.astype("<f8").tobytes(order="C"))
        fh.write(dataset.y.astype("<i4").tobytes())


def load_cache(path) -> Dataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(buf) < _CACHE_HEADER.size:
        raise DataError(f"{path}: truncated dataset cache")
    magic, version, n, d, c = _CACHE_HEADER.unpack_from(buf)
    if magic != CACHE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    off = _CACHE_HEADER.size
    need = off + 8 * n * d + 4 * n
    if len(buf) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(buf)}")
    X = np.frombuffer(buf, dtype="<f8", count=n * d, offset=off).reshape(n, d)
    y = np.frombuffer(buf, dtype="<i4", count=n, offset=off + 8 * n * d)
    return Dataset(X.astype(np.float64), y.astype(np.int64), c)
