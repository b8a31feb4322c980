"""Synthetic generators, CSV ingestion and labeled/unlabeled/test splits.

Features live in the unit hypercube so that perturbation radii and domain
clipping mean the same thing as for images.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

KINDS = ("gaussians", "rings", "moons")
LABELED, UNLABELED, TEST, FULL = "labeled", "unlabeled", "test", "full"


class CsvFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {message}")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray | None = None
    n_classes: int = 0
    split: str = FULL
    meta: dict = field(default_factory=dict)
    indices: np.ndarray | None = None
    # ground truth of an unlabeled split; only reachable via ablation_labels()
    _hidden_y: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError(f"features must be (n, d), got {self.X.shape}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features contain non-finite values")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.intp)
            if self.y.shape != (len(self.X),):
                raise ValueError("label count does not match feature rows")
            if len(self.y) and (self.y.min() < 0 or (self.n_classes and self.y.max() >= self.n_classes)):
                raise ValueError("labels outside [0, n_classes)")
        if self.split in (LABELED, TEST) and self.y is None:
            raise ValueError(f"{self.split} split requires labels")
        if self.indices is None:
            self.indices = np.arange(len(self.X))

    def __len__(self):
        return len(self.X)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def ablation_labels(self) -> np.ndarray:
        """True labels of an unlabeled split, for ground-truth-label ablations only."""
        if self._hidden_y is None:
            raise ValueError("no withheld labels on this dataset")
        return self._hidden_y


def minmax_normalize(X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scale each feature into [0, 1]; constant features map to 0."""
    X = np.asarray(X, dtype=np.float64)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.clip((X - lo) / span, 0.0, 1.0), lo, span


def _balanced_counts(n, C):
    return [n // C + (1 if j < n % C else 0) for j in range(C)]


def gen_synthetic(kind: str, n: int, n_classes: int = 2, overlap: float = 0.5,
                  seed: int = 0, dim: int = 2) -> Dataset:
    """Balanced toy classification data scaled into the unit hypercube.

    gaussians
        class means evenly spaced on the unit circle (first two coordinates),
        isotropic noise with std ``0.1 + overlap``.
    rings
        concentric circles of radius 1..C with radial noise ``0.05 + 0.5*overlap``.
    moons
        the two interleaving half circles (C must be 2), noise ``0.05 + 0.5*overlap``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if n_classes < 1 or n < n_classes:
        raise ValueError("need n >= n_classes >= 1")
    if overlap < 0:
        raise ValueError("overlap must be non-negative")
    if kind == "moons" and n_classes != 2:
        raise ValueError("moons has exactly two classes")
    if dim < 2:
        raise ValueError("synthetic data needs at least two dimensions")
    rng = np.random.default_rng(seed)
    counts = _balanced_counts(n, n_classes)
    parts, labels = [], []
    for c, m in enumerate(counts):
        if kind == "gaussians":
            angle = 2 * np.pi * c / n_classes
            center = np.zeros(dim)
            center[:2] = np.cos(angle), np.sin(angle)
            pts = center + rng.normal(0.0, 0.1 + overlap, size=(m, dim))
        elif kind == "rings":
            theta = rng.uniform(0, 2 * np.pi, m)
            r = (c + 1) + rng.normal(0.0, 0.05 + 0.5 * overlap, m)
            pts = np.zeros((m, dim))
            pts[:, 0], pts[:, 1] = r * np.cos(theta), r * np.sin(theta)
            pts[:, 2:] = rng.normal(0.0, 0.05, size=(m, dim - 2))
        else:
            theta = rng.uniform(0, np.pi, m)
            pts = np.zeros((m, dim))
            if c == 0:
                pts[:, 0], pts[:, 1] = np.cos(theta), np.sin(theta)
            else:
                pts[:, 0], pts[:, 1] = 1 - np.cos(theta), 0.5 - np.sin(theta)
            pts[:, :2] += rng.normal(0.0, 0.05 + 0.5 * overlap, size=(m, 2))
            pts[:, 2:] = rng.normal(0.0, 0.05, size=(m, dim - 2))
        parts.append(pts)
        labels.append(np.full(m, c))
    X = np.concatenate(parts)
    y = np.concatenate(labels)
    order = rng.permutation(n)
    X, lo, span = minmax_normalize(X[order])
    meta = {"kind": kind, "n": n, "d": dim, "C": n_classes, "overlap": overlap,
            "seed": seed, "norm_min": lo.tolist(), "norm_span": span.tolist()}
    return Dataset(X, y[order], n_classes, FULL, meta)


def load_csv(path, has_label: bool = True, normalize: bool = False, label_map=None) -> Dataset:
    """Read ``f0..f{d-1}[,label]``; labels are re-indexed by first appearance.

    ``label_map`` (the ``meta["label_map"]`` of a previously loaded file) fixes
    the index of already-known labels so that several files share one label space.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(path, 1, "missing header")
    header = [h.strip() for h in rows[0]]
    n_feat = len(header) - (1 if has_label else 0)
    expected = [f"f{i}" for i in range(n_feat)] + (["label"] if has_label else [])
    if n_feat < 1 or header != expected:
        raise CsvFormatError(path, 1, f"header must be {','.join(expected) or 'f0,...'}; got {','.join(header)}")
    X = np.empty((len(rows) - 1, n_feat))
    raw_labels = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CsvFormatError(path, line_no, f"expected {len(header)} cells, got {len(row)}")
        try:
            X[line_no - 2] = [float(v) for v in row[:n_feat]]
        except ValueError:
            raise CsvFormatError(path, line_no, "non-numeric feature cell") from None
        if has_label:
            cell = row[-1].strip()
            try:
                float(cell)
            except ValueError:
                raise CsvFormatError(path, line_no, f"non-numeric label {cell!r}") from None
            raw_labels.append(cell)
    if not np.all(np.isfinite(X)):
        raise CsvFormatError(path, 0, "non-finite feature values")
    meta = {"source": str(path), "n": len(X), "d": n_feat}
    if normalize:
        X, lo, span = minmax_normalize(X)
        meta.update(norm_min=lo.tolist(), norm_span=span.tolist())
    if not has_label:
        return Dataset(X, None, 0, UNLABELED, meta)
    mapping: dict[str, int] = {key: i for i, key in enumerate(label_map or ())}
    y = np.array([mapping.setdefault(_label_key(v), len(mapping)) for v in raw_labels], dtype=np.intp)
    meta["C"] = len(mapping)
    meta["label_map"] = list(mapping)
    return Dataset(X, y, len(mapping), FULL, meta)


def _label_key(cell: str) -> str:
    v = float(cell)
    return str(int(v)) if v.is_integer() else repr(v)


def save_csv(dataset: Dataset, path, include_labels: bool | None = None) -> None:
    include = dataset.y is not None if include_labels is None else include_labels
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dataset.d)] + (["label"] if include else []))
        for i, row in enumerate(dataset.X):
            cells = [repr(float(v)) for v in row]
            if include:
                cells.append(str(int(dataset.y[i])))
            w.writerow(cells)


def split(dataset: Dataset, n_labeled: int, n_test: int, seed: int = 0):
    """Seeded disjoint partition into (labeled, unlabeled, test)."""
    n = len(dataset)
    if n_labeled < 0 or n_test < 0 or n_labeled + n_test > n:
        raise ValueError(f"cannot take {n_labeled} labeled + {n_test} test from {n} points")
    if dataset.y is None:
        raise ValueError("splitting requires a labeled dataset")
    perm = np.random.default_rng(seed).permutation(n)
    lab, test, unl = perm[:n_labeled], perm[n_labeled:n_labeled + n_test], perm[n_labeled + n_test:]
    base = dataset.indices

    def part(idx, tag):
        meta = dict(dataset.meta, split=tag, split_seed=seed)
        if tag == UNLABELED:
            return Dataset(dataset.X[idx], None, dataset.n_classes, tag, meta, base[idx],
                           _hidden_y=dataset.y[idx])
        return Dataset(dataset.X[idx], dataset.y[idx], dataset.n_classes, tag, meta, base[idx])

    return part(lab, LABELED), part(unl, UNLABELED), part(test, TEST)


def write_metadata(path, dataset: Dataset, splits: dict, seed: int) -> dict:
    meta = {
        "n": len(dataset), "d": dataset.d, "C": dataset.n_classes,
        "split_counts": {k: len(v) for k, v in splits.items()},
        "seed": seed, "kind": dataset.meta.get("kind", "csv"),
    }
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def with_labels(dataset: Dataset, y, split_tag: str | None = None) -> Dataset:
    return replace(dataset, y=np.asarray(y, dtype=np.intp), split=split_tag or dataset.split)
