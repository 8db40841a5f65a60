"""Synthetic point sets, labeled/unlabeled splits, CSV I/O and standardization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .losses import one_hot

VARIANCE_FLOOR = 1e-12


@dataclass
class PointSet:
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    n_classes: int = 2

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.features),):
                raise ValueError("need exactly one label per feature row")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def targets(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("point set has no labels")
        return one_hot(self.labels, self.n_classes)

    def subset(self, idx) -> "PointSet":
        labels = None if self.labels is None else self.labels[idx]
        return PointSet(self.features[idx], labels, self.n_classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointSet):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None
            and np.array_equal(self.labels, other.labels))
        return (self.n_classes == other.n_classes and same_labels
                and np.array_equal(self.features, other.features))


@dataclass
class SslDataset:
    labeled: PointSet
    unlabeled: PointSet
    test: Optional[PointSet] = None

    def __post_init__(self):
        if self.labeled.labels is None:
            raise ValueError("labeled split needs labels")
        widths = {s.width for s in (self.labeled, self.unlabeled, self.test) if s is not None and len(s)}
        if len(widths) > 1:
            raise ValueError(f"feature widths disagree across splits: {sorted(widths)}")

    @property
    def n_classes(self) -> int:
        return self.labeled.n_classes


def half_moons(n_per_class: int, noise_sigma: float = 0.1, seed: int = 0) -> PointSet:
    """Two interleaved half circles of radius 1.

    Class 0 follows the upper arc centred at the origin, class 1 the lower arc
    centred at (1, 0.5).  Angles are uniform; isotropic Gaussian noise of
    standard deviation ``noise_sigma`` is added to every point.  Rows are
    class 0 first, then class 1.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    upper = rng.uniform(0.0, np.pi, n_per_class)
    lower = rng.uniform(np.pi, 2.0 * np.pi, n_per_class)
    pts = np.concatenate([
        np.column_stack([np.cos(upper), np.sin(upper)]),
        np.column_stack([1.0 + np.cos(lower), 0.5 + np.sin(lower)]),
    ])
    pts = pts + noise_sigma * rng.standard_normal(pts.shape)
    labels = np.repeat([0, 1], n_per_class)
    return PointSet(pts, labels, 2)


def gaussian_blobs(n_per_class: int, n_classes: int = 10, dim: int = 2,
                   spread: float = 0.15, seed: int = 0) -> PointSet:
    """Isotropic Gaussian clusters with centres evenly spaced on the unit circle.

    For ``dim > 2`` the centres sit in the first two coordinates.
    """
    if n_per_class < 1 or n_classes < 2 or dim < 2:
        raise ValueError("need n_per_class >= 1, n_classes >= 2, dim >= 2")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centres = np.zeros((n_classes, dim))
    centres[:, 0], centres[:, 1] = np.cos(angles), np.sin(angles)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    pts = centres[labels] + spread * rng.standard_normal((labels.size, dim))
    return PointSet(pts, labels, n_classes)


def split_labeled(data: PointSet, n_labeled_per_class: int, seed: int,
                  test: Optional[PointSet] = None) -> SslDataset:
    """Draw an equal number of labeled rows from each class; the rest go unlabeled.

    Both splits keep the original row order.
    """
    if data.labels is None:
        raise ValueError("cannot split an unlabeled point set")
    if n_labeled_per_class < 1:
        raise ValueError(f"n_labeled_per_class must be >= 1, got {n_labeled_per_class}")
    rng = np.random.default_rng(seed)
    chosen = np.zeros(len(data), dtype=bool)
    for k in range(data.n_classes):
        members = np.flatnonzero(data.labels == k)
        if members.size < n_labeled_per_class:
            raise ValueError(
                f"class {k} has {members.size} rows, fewer than {n_labeled_per_class} requested")
        chosen[rng.choice(members, n_labeled_per_class, replace=False)] = True
    unlabeled = PointSet(data.features[~chosen], None, data.n_classes)
    return SslDataset(data.subset(chosen), unlabeled, test)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, has_labels: Optional[bool] = None, n_classes: Optional[int] = None) -> PointSet:
    """Read a numeric CSV, optionally with a header and a trailing integer label column.

    A header is detected when any cell of the first row is non-numeric.  With
    ``has_labels=None`` the label column is taken from the header (last column
    named ``label``); headerless files are then read as features only.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [(i + 1, row) for i, row in enumerate(csv.reader(fh)) if row and any(c.strip() for c in row)]
    header = None
    if rows and not all(_is_number(c) for c in rows[0][1]):
        header = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
    if has_labels is None:
        has_labels = header is not None and header[-1].lower() == "label"
    width = len(header) if header is not None else (len(rows[0][1]) if rows else 0)
    values = []
    for lineno, row in rows:
        if len(row) != width:
            raise ValueError(f"{path}:{lineno}: expected {width} columns, found {len(row)}")
        try:
            values.append([float(c) for c in row])
        except ValueError:
            bad = next(c for c in row if not _is_number(c))
            raise ValueError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
    arr = np.array(values, dtype=np.float64).reshape(len(values), width)
    if not has_labels:
        return PointSet(arr, None, n_classes or 2)
    raw = arr[:, -1]
    if np.any(raw != np.round(raw)) or np.any(raw < 0):
        lineno = rows[int(np.flatnonzero((raw != np.round(raw)) | (raw < 0))[0])][0]
        raise ValueError(f"{path}:{lineno}: label must be a nonnegative integer")
    labels = raw.astype(np.int64)
    k = n_classes if n_classes is not None else int(labels.max()) + 1 if labels.size else 2
    return PointSet(arr[:, :-1], labels, max(k, 2))


def save_csv(points: PointSet, path) -> None:
    names = [f"x{i}" for i in range(points.width)]
    if points.labels is not None:
        names.append("label")
    lines = [",".join(names)]
    for i, row in enumerate(points.features):
        cells = [format(float(v), ".17g") for v in row]
        if points.labels is not None:
            cells.append(str(int(points.labels[i])))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Transform:
    mode: str = "none"
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    floored: list = field(default_factory=list)

    def apply(self, points: PointSet) -> PointSet:
        if self.mode == "none":
            return PointSet(points.features.copy(), points.labels, points.n_classes)
        return PointSet((points.features - self.mean) / self.std, points.labels, points.n_classes)


def normalize(data: PointSet, mode: str = "standardize") -> tuple[PointSet, Transform]:
    """Fit a per-feature transform on ``data`` and apply it.

    Zero-variance features get their variance floored at ``VARIANCE_FLOOR``;
    their indices are listed in ``Transform.floored``.
    """
    if mode == "none":
        t = Transform("none")
    elif mode == "standardize":
        mean = data.features.mean(axis=0)
        var = data.features.var(axis=0)
        floored = [int(i) for i in np.flatnonzero(var < VARIANCE_FLOOR)]
        t = Transform("standardize", mean, np.sqrt(np.maximum(var, VARIANCE_FLOOR)), floored)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return t.apply(data), t
