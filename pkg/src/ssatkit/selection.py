"""Boundary-focused selection of a reduced unlabeled set.

Every pool point gets a score where *lower means closer to the decision
boundary*: max-softmax confidence (``pcs``), the k-means distance gap
(``lcs-km``), the GMM posterior gap (``lcs-gmm``) or a seeded uniform draw
(``random``). The ``floor(beta * n)`` lowest-scoring points are taken, and the
rest of the budget ``n = floor(alpha * |pool|)`` is filled uniformly at random
from what is left.
"""
from __future__ import annotations

import csv
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import clustering, models

METHODS = ("random", "pcs", "lcs-km", "lcs-gmm")
BOUNDARY, RANDOM_FILL, UNSELECTED = "boundary", "random-fill", "unselected"
MANIFEST_COLUMNS = ("index", "pseudo_label", "score", "method", "reason")


class SelectionError(ValueError):
    pass


@dataclass
class SelectionConfig:
    method: str = "lcs-km"
    alpha: float = 0.1
    beta: float = 0.6
    k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise SelectionError(f"unknown selection method {self.method!r}")
        if not 0 < self.alpha <= 1:
            raise SelectionError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0 <= self.beta <= 1:
            raise SelectionError(f"beta must lie in [0, 1], got {self.beta}")
        if self.method.startswith("lcs") and self.k is not None and self.k < 2:
            raise SelectionError("clustering-based selection needs k >= 2")


@dataclass
class ScoredPool:
    index: np.ndarray
    pseudo_label: np.ndarray
    score: np.ndarray
    method: str
    selected: np.ndarray = None
    reason: np.ndarray = None
    cluster_model: object = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.index)
        if len(np.unique(self.index)) != n:
            raise SelectionError("pool indices must be unique")
        if self.selected is None:
            self.selected = np.zeros(n, dtype=bool)
        if self.reason is None:
            self.reason = np.full(n, UNSELECTED, dtype=object)

    def __len__(self):
        return len(self.index)


@dataclass
class Selection:
    """The reduced set: positions into the pool, their pool indices and frozen pseudo-labels."""

    positions: np.ndarray
    index: np.ndarray
    pseudo_label: np.ndarray
    n_boundary: int
    pool: ScoredPool

    def __len__(self):
        return len(self.positions)

    @property
    def boundary_positions(self) -> np.ndarray:
        return self.positions[:self.n_boundary]

    @property
    def random_positions(self) -> np.ndarray:
        return self.positions[self.n_boundary:]


def score_points(X, params: models.MLPParams, method: str, k: int | None = None,
                 seed: int = 0):
    """Pseudo-labels, boundary scores and (for clustering methods) the fitted model."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise SelectionError("cannot score an empty pool")
    if method not in METHODS:
        raise SelectionError(f"unknown selection method {method!r}")
    logits = models.logits_of(params, X)
    labels = models.predict_labels(logits)
    k = k or params.out_dim
    cluster_model = None
    if method == "random":
        score = np.random.default_rng(seed).uniform(size=len(X))
    elif method == "pcs":
        score = models.confidence(logits)
    elif method == "lcs-km":
        Z = models.latents(params, X)
        cluster_model = clustering.kmeans_fit(Z, k, seed=seed)
        score = clustering.kmeans_boundary_score(Z, cluster_model)
    else:
        Z = models.latents(params, X)
        cluster_model = clustering.gmm_fit(Z, k, seed=seed)
        _, score = clustering.gmm_boundary_score(Z, cluster_model)
    return labels, np.asarray(score, dtype=np.float64), cluster_model


def compute_scores(X, params: models.MLPParams, method: str, k: int | None = None,
                   seed: int = 0, index=None) -> ScoredPool:
    labels, score, cm = score_points(X, params, method, k, seed)
    index = np.arange(len(X)) if index is None else np.asarray(index)
    return ScoredPool(index, labels, score, method, cluster_model=cm)


def selection_counts(pool_size: int, alpha: float, beta: float) -> tuple[int, int]:
    """(total, boundary) = (floor(alpha * N), floor(beta * total)).

    Ratios are read by their decimal repr, so 0.29 * 100 floors to 29 rather
    than to the 28 that binary rounding would give.
    """
    a, b = Fraction(repr(float(alpha))), Fraction(repr(float(beta)))
    n = math.floor(a * pool_size)
    return n, math.floor(b * n)


def select_subset(pool: ScoredPool, alpha: float, beta: float, seed: int = 0) -> Selection:
    n, n_b = selection_counts(len(pool), alpha, beta)
    if n == 0:
        raise SelectionError("empty selection: floor(alpha * |pool|) is 0")
    # stable sort keeps the lower position first among equal scores
    ranked = np.argsort(pool.score, kind="stable")
    boundary = ranked[:n_b]
    rest = ranked[n_b:]
    rng = np.random.default_rng(seed)
    fill = rng.choice(np.sort(rest), size=n - n_b, replace=False) if n > n_b else np.array([], dtype=np.intp)
    positions = np.concatenate([boundary, fill]).astype(np.intp)

    pool.selected = np.zeros(len(pool), dtype=bool)
    pool.reason = np.full(len(pool), UNSELECTED, dtype=object)
    pool.selected[positions] = True
    pool.reason[boundary] = BOUNDARY
    pool.reason[fill] = RANDOM_FILL
    return Selection(positions, pool.index[positions], pool.pseudo_label[positions], n_b, pool)


def select(X, params: models.MLPParams, cfg: SelectionConfig) -> Selection:
    pool = compute_scores(X, params, cfg.method, cfg.k, cfg.seed)
    return select_subset(pool, cfg.alpha, cfg.beta, cfg.seed + 1)


def write_manifest(pool: ScoredPool, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for i in range(len(pool)):
            w.writerow([int(pool.index[i]), int(pool.pseudo_label[i]), repr(float(pool.score[i])),
                        pool.method, pool.reason[i]])


def read_manifest(path) -> dict:
    with Path(path).open(newline="") as fh:
        r = csv.DictReader(fh)
        if tuple(r.fieldnames or ()) != MANIFEST_COLUMNS:
            raise SelectionError(f"{path}: unexpected manifest columns {r.fieldnames}")
        rows = list(r)
    return {
        "index": np.array([int(row["index"]) for row in rows], dtype=np.intp),
        "pseudo_label": np.array([int(row["pseudo_label"]) for row in rows], dtype=np.intp),
        "score": np.array([float(row["score"]) for row in rows]),
        "method": [row["method"] for row in rows],
        "reason": np.array([row["reason"] for row in rows], dtype=object),
    }
