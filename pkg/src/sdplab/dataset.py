"""Synthetic classification data, CSV ingestion, splits and mini-batching."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DatasetEmptyError, DatasetError, DatasetMissingError, DatasetParseError
from .tensor_core import Rng, check_finite


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise DatasetError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.labels.ndim != 1 or len(self.labels) != self.inputs.shape[0]:
            raise DatasetError("labels length must equal the number of input rows")
        if self.num_classes < 2:
            raise DatasetError("a dataset needs at least 2 classes")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in 0..{self.num_classes - 1}")
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0).tolist()
            raise DatasetError(f"classes {missing} have no samples")
        check_finite(self.inputs, "dataset inputs")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[indices], self.labels[indices], self.num_classes)


@dataclass
class LabeledBatch:
    """A mini-batch. Unlike a dataset it need not contain every class."""

    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    dev_fraction: float = 0.2
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.dev_fraction, self.test_fraction)
        if any(not 0.0 < f < 1.0 for f in fr):
            raise ValueError(f"split fractions must lie in (0, 1), got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")


def gen_gaussian_blobs(rng: Rng, num_classes: int, samples_per_class: int, dim: int,
                       center_spread: float, cluster_std: float) -> LabeledDataset:
    """Isotropic Gaussian clusters around random centres, rows grouped by class."""
    if num_classes < 2 or samples_per_class < 1 or dim < 1:
        raise DatasetError("blobs need num_classes >= 2, samples_per_class >= 1, dim >= 1")
    if cluster_std < 0 or center_spread < 0:
        raise DatasetError("center_spread and cluster_std must be non-negative")
    centers = rng.normal((num_classes, dim)) * center_spread
    noise = rng.normal((num_classes, samples_per_class, dim)) * cluster_std
    x = (centers[:, None, :] + noise).reshape(-1, dim)
    y = np.repeat(np.arange(num_classes), samples_per_class)
    return LabeledDataset(x, y, num_classes)


def spiral_point(t, label):
    """Point on spiral ``label`` at parameter t in (0, 1]; the two arms are point reflections."""
    theta = 3.0 * np.pi * t
    r = t
    sign = 1.0 if label == 0 else -1.0
    return np.stack([sign * r * np.cos(theta), sign * r * np.sin(theta)], axis=-1)


def gen_two_spirals(rng: Rng, samples_per_class: int, noise_std: float) -> LabeledDataset:
    if samples_per_class < 2:
        raise DatasetError("two spirals need at least 2 samples per class")
    if noise_std < 0:
        raise DatasetError("noise_std must be non-negative")
    parts, labels, params = [], [], []
    for c in (0, 1):
        t = rng.uniform(samples_per_class, 0.05, 1.0)
        params.append(t)
        parts.append(spiral_point(t, c))
        labels.append(np.full(samples_per_class, c))
    x = np.concatenate(parts) + rng.normal((2 * samples_per_class, 2)) * noise_std
    return LabeledDataset(x, np.concatenate(labels), 2)


def save_csv(dataset: LabeledDataset, path, label_column: str = "label") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(dataset.dim)] + [label_column])
        for row, lab in zip(dataset.inputs, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def load_csv(path, label_column: str = "label") -> LabeledDataset:
    """Read a headed CSV; labels are mapped to 0..C-1 in order of first appearance."""
    if not os.path.isfile(path):
        raise DatasetMissingError(f"no such dataset file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DatasetEmptyError(f"{path} is empty")
    header = rows[0]
    if label_column not in header:
        raise DatasetParseError(f"{path}: no column named {label_column!r} in header {header}")
    if len(rows) < 2:
        raise DatasetEmptyError(f"{path} has a header but no data rows")
    li = header.index(label_column)
    feats, labels, codes = [], [], {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DatasetParseError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        vals = []
        for ci, cell in enumerate(row):
            if ci == li:
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise DatasetParseError(
                    f"{path}:{lineno}: non-numeric value {cell!r} in column {header[ci]!r}") from None
        feats.append(vals)
        key = row[li].strip()
        labels.append(codes.setdefault(key, len(codes)))
    if len(codes) < 2:
        raise DatasetParseError(f"{path}: need at least 2 distinct labels, found {len(codes)}")
    return LabeledDataset(np.array(feats, dtype=np.float64).reshape(len(feats), -1),
                          np.array(labels), len(codes))


def split(dataset: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Seeded shuffle followed by a contiguous train/dev/test partition."""
    n = len(dataset)
    perm = Rng(spec.seed).child("split").permutation(n)
    n_train = int(math.floor(n * spec.train_fraction + 1e-9))
    n_dev = int(math.floor(n * spec.dev_fraction + 1e-9))
    n_test = n - n_train - n_dev
    if min(n_train, n_dev, n_test) <= 0:
        raise DatasetError(f"split of {n} samples gives empty part: {(n_train, n_dev, n_test)}")
    parts = (perm[:n_train], perm[n_train:n_train + n_dev], perm[n_train + n_dev:])
    return tuple(dataset.subset(np.sort(p)) for p in parts)


def minibatches(dataset: LabeledDataset, batch_size: int, rng: Rng | None = None) -> Iterator[LabeledBatch]:
    """Shuffled batches (in-order when ``rng`` is None); a trailing batch of one sample is dropped."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    n = len(dataset)
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            break
        yield LabeledBatch(dataset.inputs[idx], dataset.labels[idx], idx, dataset.num_classes)
