"""Datasets: the in-memory container, seeded synthetic generators, and CSV loading."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: Optional[List[str]] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be a 2-d array, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} samples")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.class_names)

    def with_classes(self, classes: Sequence[int]) -> "Dataset":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))

    def classes_present(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise DataError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].num_classes,
            parts[0].class_names,
        )


@dataclass(frozen=True)
class SyntheticParams:
    kind: str = "gaussian_mixture"
    num_classes: int = 10
    dim: int = 32
    samples_per_class: int = 400
    noise: float = 1.0
    separation: float = 5.0

    def validate(self):
        if self.kind not in ("gaussian_mixture", "spirals"):
            raise DataError(f"unknown synthetic generator {self.kind!r}")
        if self.num_classes < 2:
            raise DataError("need at least 2 classes")
        if self.dim < 1 or self.samples_per_class < 1:
            raise DataError("dim and samples_per_class must be positive")
        if self.kind == "spirals" and self.dim < 2:
            raise DataError("spirals need dim >= 2")
        if self.noise < 0 or self.separation <= 0:
            raise DataError("noise must be >= 0 and separation > 0")


def generate_synthetic(params: SyntheticParams, seed: int) -> Dataset:
    """Balanced, seeded synthetic classification data.

    ``gaussian_mixture`` draws one isotropic Gaussian per class around a random
    mean of norm about ``separation``.  ``spirals`` draws interleaved 2-d spiral
    arms, lifted into ``dim`` dimensions by a random orthonormal map.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    K, d, n = params.num_classes, params.dim, params.samples_per_class
    labels = np.repeat(np.arange(K), n)
    if params.kind == "gaussian_mixture":
        means = rng.normal(size=(K, d))
        means *= params.separation / np.linalg.norm(means, axis=1, keepdims=True)
        x = means[labels] + params.noise * rng.normal(size=(K * n, d))
    else:
        r = rng.uniform(0.1, 1.0, size=K * n)
        theta = labels * (2 * np.pi / K) + 3.0 * r
        flat = params.separation * np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        flat += params.noise * 0.1 * rng.normal(size=flat.shape)
        basis, _ = np.linalg.qr(rng.normal(size=(d, 2)))
        x = flat @ basis.T
    return Dataset(x, labels, K)


def train_test_split(d: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Per-class seeded split so both halves stay balanced."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in d.classes_present():
        idx = np.flatnonzero(d.labels == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(idx.size * test_fraction))
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    return d.subset(np.sort(np.concatenate(train_idx))), d.subset(np.sort(np.concatenate(test_idx)))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        std = features.std(axis=0)
        return cls(features.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, d: Dataset) -> Dataset:
        return Dataset((d.features - self.mean) / self.std, d.labels, d.num_classes, d.class_names)


@dataclass(frozen=True)
class CsvSchema:
    label_column: str = "label"
    num_classes: Optional[int] = None
    feature_columns: Optional[Tuple[str, ...]] = None
    normalize: bool = False


def load_csv_dataset(path, schema: CsvSchema = CsvSchema(), stats: Optional[Standardizer] = None) -> Dataset:
    """Load numeric features plus one integer label column from a headed CSV.

    With ``schema.normalize`` the features are standardized using ``stats``
    (fit on the training split) or, when no stats are given, on this file.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    if schema.label_column not in header:
        raise DataError(f"{path}: no label column {schema.label_column!r}")
    label_at = header.index(schema.label_column)
    names = list(schema.feature_columns) if schema.feature_columns else [h for h in header if h != schema.label_column]
    try:
        cols = [header.index(n) for n in names]
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None

    feats, labels = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        try:
            feats.append([float(row[c]) for c in cols])
            lab = float(row[label_at])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric cell") from None
        if lab != int(lab):
            raise DataError(f"{path}:{lineno}: label {row[label_at]!r} is not an integer")
        labels.append(int(lab))

    labels_arr = np.asarray(labels, dtype=np.int64)
    K = schema.num_classes if schema.num_classes is not None else int(labels_arr.max()) + 1
    bad = (labels_arr < 0) | (labels_arr >= K)
    if bad.any():
        lineno = int(np.flatnonzero(bad)[0]) + 2
        raise DataError(f"{path}:{lineno}: unknown label {labels_arr[bad][0]} for {K} classes")
    feats_arr = np.asarray(feats, dtype=np.float64)
    if not np.all(np.isfinite(feats_arr)):
        raise DataError(f"{path}: non-finite feature values")
    d = Dataset(feats_arr, labels_arr, K)
    if schema.normalize:
        d = (stats or Standardizer.fit(d.features)).apply(d)
    return d
