"""Gaussian mixture clustering of surface points (EM, full covariances)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

COV_FLOOR = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GmmModel:
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    log_likelihoods: List[float] = field(default_factory=list, compare=False)
    converged: bool = False

    @property
    def k(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "covariances": self.covariances.tolist(),
                "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d) -> "GmmModel":
        return cls(np.array(d["means"]), np.array(d["covariances"]), np.array(d["weights"]))


def _floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def _weighted_log_density(X, means, covs, weights) -> np.ndarray:
    """log(w_k) + log N(x | mu_k, Sigma_k), shape (N, k)."""
    n, d = X.shape
    out = np.empty((n, len(weights)))
    for j in range(len(weights)):
        chol = np.linalg.cholesky(covs[j])
        z = np.linalg.solve(chol, (X - means[j]).T)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        with np.errstate(divide="ignore"):
            logw = np.log(weights[j])
        out[:, j] = logw - 0.5 * (d * _LOG_2PI + logdet + (z * z).sum(axis=0))
    return out


def _logsumexp(a):
    m = a.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _kmeans_pp(X, k, rng) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d2 = np.min([((X - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        idx = rng.integers(len(X)) if total <= 0 else rng.choice(len(X), p=d2 / total)
        centers.append(X[idx])
    return np.array(centers)


def gmm_fit(points, k: int, rng_seed=0, max_iter: int = 200, tol: float = 1e-6,
            cov_floor: float = COV_FLOOR) -> GmmModel:
    """EM fit with k-means++ seeding.

    Stops when the mean per-point log-likelihood improves by less than ``tol``
    or after ``max_iter`` iterations.  Covariance eigenvalues are floored at
    ``cov_floor`` (the constrained maximiser, so EM stays monotone).
    """
    X = np.asarray(points, dtype=np.float64)
    n, d = X.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"cannot fit {k} components to {n} points")
    rng = np.random.default_rng(rng_seed)
    means = _kmeans_pp(X, k, rng)
    spread = max(float(X.var(axis=0).mean()), cov_floor)
    covs = np.repeat(np.eye(d)[None] * spread, k, axis=0)
    weights = np.full(k, 1.0 / k)
    history: List[float] = []
    converged = False
    for _ in range(max_iter):
        logp = _weighted_log_density(X, means, covs, weights)
        norm = _logsumexp(logp)
        history.append(float(norm.mean()))
        if len(history) > 1 and history[-1] - history[-2] < tol:
            converged = True
            break
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0) + 10 * np.finfo(float).tiny
        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        for j in range(k):
            diff = X - means[j]
            covs[j] = _floor_covariance((resp[:, j, None] * diff).T @ diff / nk[j], cov_floor)
    weights = weights / weights.sum()
    return GmmModel(means, covs, weights, history, converged)


def assign_clusters(model: GmmModel, points) -> np.ndarray:
    """Most responsible component per point; ties go to the lowest index."""
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(X) == 0:
        return np.zeros(0, dtype=np.int64)
    logp = _weighted_log_density(X, model.means, model.covariances, model.weights)
    return np.argmax(logp, axis=1).astype(np.int64)


class GaussianMixture(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`gmm_fit` / :func:`assign_clusters`."""

    def __init__(self, n_components=1, max_iter=200, tol=1e-6, cov_floor=COV_FLOOR, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.cov_floor = cov_floor
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=1)
        self.model_ = gmm_fit(X, self.n_components, self.random_state, self.max_iter, self.tol, self.cov_floor)
        self.means_ = self.model_.means
        self.covariances_ = self.model_.covariances
        self.weights_ = self.model_.weights
        self.log_likelihoods_ = self.model_.log_likelihoods
        self.converged_ = self.model_.converged
        self.labels_ = assign_clusters(self.model_, X)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return assign_clusters(self.model_, check_array(X))

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        return _logsumexp(_weighted_log_density(X, self.means_, self.covariances_, self.weights_))
