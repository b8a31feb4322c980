"""k-means (Lloyd, k-means++ seeding) and diagonal GMM (EM) over latent embeddings.

Boundary scores:

* ``delta_d``: gap between the distances to the two nearest centroids.
* ``delta_p``: gap between the two largest GMM posterior probabilities,
  ``p_j(z) = pi_j N(z | mu_j, Sigma_j) / sum_i pi_i N(z | mu_i, Sigma_i)``.

Small values of either mean the point sits between clusters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VAR_FLOOR = 1e-6


class ClusteringError(ValueError):
    pass


@dataclass
class KMeansModel:
    centroids: np.ndarray
    wcss: float
    history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return len(self.centroids)


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: float
    history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return len(self.weights)


def _as_2d(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2:
        raise ClusteringError(f"embeddings must be 2-D, got shape {Z.shape}")
    return Z


def centroid_distances(Z, centroids) -> np.ndarray:
    """Euclidean distances (n, k); computed from differences, not the expanded form."""
    diff = Z[:, None, :] - centroids[None, :, :]
    return np.sqrt(np.einsum("nkd,nkd->nk", diff, diff))


def _sq_distances(Z, centroids):
    diff = Z[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp(Z, k, rng):
    n = len(Z)
    centers = [Z[rng.integers(n)]]
    closest = ((Z - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform(0, total)))
            idx = min(idx, n - 1)
        centers.append(Z[idx])
        closest = np.minimum(closest, ((Z - Z[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(Z, centroids, max_iter, tol):
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_distances(Z, centroids)
        labels = d2.argmin(axis=1)
        point_cost = d2[np.arange(len(Z)), labels]
        history.append(float(point_cost.sum()))
        new = np.empty_like(centroids)
        counts = np.bincount(labels, minlength=len(centroids))
        taken = set()
        for j in range(len(centroids)):
            if counts[j]:
                new[j] = Z[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            # re-seed to the point farthest from its own centroid
            for idx in np.argsort(-point_cost, kind="stable"):
                if idx not in taken:
                    taken.add(int(idx))
                    new[j] = Z[idx]
                    break
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d2 = _sq_distances(Z, centroids)
    wcss = float(d2.min(axis=1).sum())
    history.append(wcss)
    return centroids, wcss, history, it


def kmeans_fit(Z, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
               n_init: int = 10) -> KMeansModel:
    """Best-of-``n_init`` Lloyd runs from k-means++ seeds, ranked by WCSS."""
    Z = _as_2d(Z)
    if k < 1:
        raise ClusteringError("k must be at least 1")
    if len(Z) < k:
        raise ClusteringError(f"need at least k={k} points, got {len(Z)}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = _kmeans_pp(Z, k, rng)
        centroids, wcss, history, n_iter = _lloyd(Z, init, max_iter, tol)
        if best is None or wcss < best.wcss:
            best = KMeansModel(centroids, wcss, history, n_iter)
    return best


def kmeans_assign(Z, model: KMeansModel) -> np.ndarray:
    return centroid_distances(_as_2d(Z), model.centroids).argmin(axis=1)


def kmeans_boundary_score(z, model: KMeansModel):
    """``d2 - d1`` for one embedding (scalar) or a batch (array)."""
    if model.k < 2:
        raise ClusteringError("boundary score needs at least two centroids")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 0 or (z.ndim == 1 and model.centroids.shape[1] > 1)
    Z = z.reshape(1, -1) if single else _as_2d(z)
    d = np.sort(centroid_distances(Z, model.centroids), axis=1)
    gap = d[:, 1] - d[:, 0]
    return float(gap[0]) if single else gap


def _log_gauss(Z, means, variances):
    """log N(z | mu_j, diag(var_j)) for every point and component, shape (n, k)."""
    d = Z.shape[1]
    diff = Z[:, None, :] - means[None, :, :]
    maha = np.einsum("nkd,nkd->nk", diff / variances[None, :, :], diff)
    log_det = np.log(variances).sum(axis=1)
    return -0.5 * (d * np.log(2 * np.pi) + log_det[None, :] + maha)


def _logsumexp(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _joint_log(Z, model: GmmModel):
    return np.log(model.weights)[None, :] + _log_gauss(Z, model.means, model.variances)


def gmm_fit(Z, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
            n_init: int = 10) -> GmmModel:
    """EM for a diagonal-covariance mixture, initialised from :func:`kmeans_fit`.

    Converges when the mean per-point log-likelihood improves by less than
    ``tol``. Variances are floored at ``VAR_FLOOR`` in every M-step.
    """
    Z = _as_2d(Z)
    if k < 1:
        raise ClusteringError("k must be at least 1")
    if len(Z) < k:
        raise ClusteringError(f"need at least k={k} points, got {len(Z)}")
    n, d = Z.shape
    km = kmeans_fit(Z, k, seed=seed, n_init=n_init)
    labels = kmeans_assign(Z, km)
    global_var = np.maximum(Z.var(axis=0), VAR_FLOOR)
    weights = np.bincount(labels, minlength=k).astype(np.float64) / n
    means = km.centroids.copy()
    variances = np.empty((k, d))
    for j in range(k):
        members = Z[labels == j]
        variances[j] = members.var(axis=0) if len(members) > 1 else global_var
    variances = np.maximum(variances, VAR_FLOOR)
    weights = np.maximum(weights, 1.0 / (n * 1e6))
    weights /= weights.sum()

    history = []
    it = 0
    for it in range(1, max_iter + 1):
        log_joint = np.log(weights)[None, :] + _log_gauss(Z, means, variances)
        lse = _logsumexp(log_joint)
        history.append(float(lse.sum()))
        if it > 1 and (history[-1] - history[-2]) / n < tol:
            break
        resp = np.exp(log_joint - lse[:, None])
        nk = resp.sum(axis=0)
        live = nk > 0
        weights = np.where(live, nk, np.finfo(float).tiny) / n
        weights /= weights.sum()
        safe_nk = np.where(live, nk, 1.0)
        new_means = (resp.T @ Z) / safe_nk[:, None]
        means = np.where(live[:, None], new_means, means)
        diff = Z[:, None, :] - means[None, :, :]
        new_var = np.einsum("nk,nkd->kd", resp, diff * diff) / safe_nk[:, None]
        variances = np.maximum(np.where(live[:, None], new_var, variances), VAR_FLOOR)
    model = GmmModel(weights, means, variances, 0.0, history, it)
    model.log_likelihood = float(_logsumexp(_joint_log(Z, model)).sum())
    if history[-1] != model.log_likelihood:
        history.append(model.log_likelihood)
    return model


def gmm_posteriors(Z, model: GmmModel) -> np.ndarray:
    Z = _as_2d(Z)
    log_joint = _joint_log(Z, model)
    return np.exp(log_joint - _logsumexp(log_joint)[:, None])


def gmm_log_likelihood(Z, model: GmmModel) -> float:
    return float(_logsumexp(_joint_log(_as_2d(Z), model)).sum())


def gmm_boundary_score(z, model: GmmModel):
    """Posteriors and ``p(1) - p(2)``, for one embedding or a batch."""
    if model.k < 2:
        raise ClusteringError("boundary score needs at least two components")
    z = np.asarray(z, dtype=np.float64)
    dim = model.means.shape[1]
    single = z.ndim == 0 or (z.ndim == 1 and dim > 1)
    Z = z.reshape(1, -1) if single else _as_2d(z)
    p = gmm_posteriors(Z, model)
    top = -np.sort(-p, axis=1)
    gap = top[:, 0] - top[:, 1]
    if single:
        return p[0], float(gap[0])
    return p, gap
