"""Datasets, splits, synthetic generators, and the IDX loader.

All library code reads sample rows through ``LabeledDataset.rows`` /
``subset`` so that an :class:`AuditedDataset` can observe every access;
the forget-only unlearning setting is enforced by checking that audit log.
"""

import struct
from dataclasses import dataclass

import numpy as np


class FormatError(Exception):
    """A persisted file does not match its declared format."""


@dataclass
class LabeledDataset:
    """Feature matrix with integer labels and stable per-sample ids."""

    features: np.ndarray  # (n, d) float64, finite, conventionally in [0,1]^d
    labels: np.ndarray    # (n,) int64 in {0..num_classes-1}
    ids: np.ndarray       # (n,) int64, unique
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError("features must be a non-empty n x d matrix")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ValueError("labels/ids length must match feature rows")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range for num_classes")
        if len(np.unique(self.ids)) != n:
            raise ValueError("ids must be unique")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def rows(self, idx):
        """(features, labels) for the given row indices."""
        idx = np.asarray(idx, dtype=np.int64)
        return self.features[idx], self.labels[idx]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        X, y = self.rows(idx)
        return LabeledDataset(X, y, self.ids[idx], self.num_classes)


class AuditedDataset:
    """Row-access auditing view; exposes only the accessor surface.

    Deliberately does not expose raw ``.features``/``.labels`` so stray
    direct reads fail instead of bypassing the audit.
    """

    def __init__(self, base: LabeledDataset):
        self._base = base
        self.read_rows = set()

    @property
    def n(self):
        return self._base.n

    @property
    def dim(self):
        return self._base.dim

    @property
    def num_classes(self):
        return self._base.num_classes

    @property
    def ids(self):
        return self._base.ids

    def rows(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        self.read_rows.update(int(i) for i in idx)
        return self._base.rows(idx)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        self.read_rows.update(int(i) for i in idx)
        return self._base.subset(idx)


@dataclass
class SplitSpec:
    """Retain/forget partition of a training set plus held-out test indices.

    ``test_idx`` indexes a separate held-out dataset, not the training one.
    """

    retain_idx: np.ndarray
    forget_idx: np.ndarray
    test_idx: np.ndarray
    forget_fraction: float
    seed: int

    def __post_init__(self):
        self.retain_idx = np.ascontiguousarray(self.retain_idx, dtype=np.int64)
        self.forget_idx = np.ascontiguousarray(self.forget_idx, dtype=np.int64)
        self.test_idx = np.ascontiguousarray(self.test_idx, dtype=np.int64)
        if not 0.0 < self.forget_fraction < 1.0:
            raise ValueError("forget_fraction must be in (0,1)")
        if np.intersect1d(self.retain_idx, self.forget_idx).size:
            raise ValueError("retain and forget sets overlap")
        total = self.retain_idx.size + self.forget_idx.size
        if self.forget_idx.size != round(self.forget_fraction * total):
            raise ValueError("forget set size does not match forget_fraction")


def sample_splits(data, fraction, num_subsets, seed, test_idx):
    """Independent uniform forget subsets of the stated fraction.

    Subsets may overlap each other but never themselves; all share the same
    held-out ``test_idx``.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0,1)")
    n = data.n
    n_forget = round(fraction * n)
    if n_forget == 0:
        raise ValueError(f"fraction {fraction} rounds to an empty forget set")
    rng = np.random.default_rng(seed)
    all_idx = np.arange(n, dtype=np.int64)
    out = []
    for _ in range(num_subsets):
        forget = np.sort(rng.choice(n, size=n_forget, replace=False))
        retain = np.setdiff1d(all_idx, forget)
        out.append(SplitSpec(retain, forget, np.asarray(test_idx, dtype=np.int64),
                             fraction, seed))
    return out


def _scale_unit_box(train_X, test_X):
    both = np.vstack([train_X, test_X])
    lo = both.min(axis=0)
    span = both.max(axis=0) - lo
    span[span == 0.0] = 1.0
    return (train_X - lo) / span, (test_X - lo) / span


def gen_blobs(n, d, m, spread, seed, test_n=None):
    """Gaussian class blobs, train and test drawn i.i.d., scaled into [0,1]^d.

    Stratified so class counts are balanced within +-1.
    """
    if n < 2 * m:
        raise ValueError("need at least two samples per class")
    test_n = n if test_n is None else test_n
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.25, 0.75, size=(m, d))

    def draw(count):
        labels = np.arange(count, dtype=np.int64) % m
        X = centers[labels] + rng.normal(0.0, spread, size=(count, d))
        perm = rng.permutation(count)
        return X[perm], labels[perm]

    Xtr, ytr = draw(n)
    Xte, yte = draw(test_n)
    Xtr, Xte = _scale_unit_box(Xtr, Xte)
    train = LabeledDataset(Xtr, ytr, np.arange(n, dtype=np.int64), m)
    test = LabeledDataset(Xte, yte, np.arange(test_n, dtype=np.int64), m)
    return train, test, centers


def gen_moons(n, noise, seed, test_n=None):
    """Two interleaved half-circles in the unit square."""
    if n < 4:
        raise ValueError("need at least two samples per class")
    test_n = n if test_n is None else test_n
    rng = np.random.default_rng(seed)

    def draw(count):
        labels = np.arange(count, dtype=np.int64) % 2
        t = rng.uniform(0.0, np.pi, size=count)
        X = np.empty((count, 2))
        upper = labels == 0
        X[upper, 0] = np.cos(t[upper])
        X[upper, 1] = np.sin(t[upper])
        X[~upper, 0] = 1.0 - np.cos(t[~upper])
        X[~upper, 1] = 0.5 - np.sin(t[~upper])
        X += rng.normal(0.0, noise, size=(count, 2))
        perm = rng.permutation(count)
        return X[perm], labels[perm]

    Xtr, ytr = draw(n)
    Xte, yte = draw(test_n)
    Xtr, Xte = _scale_unit_box(Xtr, Xte)
    train = LabeledDataset(Xtr, ytr, np.arange(n, dtype=np.int64), 2)
    test = LabeledDataset(Xte, yte, np.arange(test_n, dtype=np.int64), 2)
    return train, test


IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


def load_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files into a dataset in [0,1]^d."""
    with open(images_path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise FormatError(f"{images_path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: unexpected magic {magic} (want {IDX_IMAGE_MAGIC})")
        payload = fh.read()
    if len(payload) != count * rows * cols:
        raise FormatError(
            f"{images_path}: payload has {len(payload)} bytes, "
            f"expected {count * rows * cols}")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    X = pixels.reshape(count, rows * cols)

    with open(labels_path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise FormatError(f"{labels_path}: truncated IDX header")
        magic, lcount = struct.unpack(">II", head)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: unexpected magic {magic} (want {IDX_LABEL_MAGIC})")
        raw = fh.read()
    if len(raw) != lcount:
        raise FormatError(f"{labels_path}: payload has {len(raw)} bytes, expected {lcount}")
    if lcount != count:
        raise FormatError(f"count mismatch: {count} images vs {lcount} labels")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    m = int(labels.max()) + 1 if labels.size else 0
    return LabeledDataset(X, labels, np.arange(count, dtype=np.int64), max(m, 2))


def mia_pool(train, test):
    """Union dataset for shadow training: train rows first, then test rows.

    Pool ids are fresh (0..n_train+n_test); the returned offset maps a test
    row index to its pool row (train rows map to themselves).
    """
    if train.dim != test.dim or train.num_classes != test.num_classes:
        raise ValueError("train and test datasets are incompatible")
    X = np.vstack([train.features, test.features])
    y = np.concatenate([train.labels, test.labels])
    pool = LabeledDataset(X, y, np.arange(len(y), dtype=np.int64), train.num_classes)
    return pool, train.n
