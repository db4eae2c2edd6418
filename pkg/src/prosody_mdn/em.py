"""Expectation-maximization for diagonal Gaussian mixtures.

Independent of the gradient-trained networks; used to cross-check
likelihood values and the modes of generated data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gmm import VARIANCE_FLOOR, GmmParams, InvalidInputError, component_log_densities, logsumexp


@dataclass(frozen=True)
class EmConfig:
    n_components: int = 4
    max_iters: int = 500
    tol: float = 1e-8
    variance_floor: float = VARIANCE_FLOOR
    seed: int = 0
    n_init: int = 1

    def __post_init__(self):
        if self.n_components < 1 or self.tol <= 0 or self.n_init < 1:
            raise InvalidInputError(f"invalid EM config {self}")


def kmeans_pp_centers(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new centre drawn proportional to squared distance."""
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _e_step(X, weights, means, variances):
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    comp = component_log_densities(log_w, means, variances, X)
    ll = logsumexp(comp)
    return comp, ll


def _fit_once(X, cfg: EmConfig, rng):
    n, d = X.shape
    M = cfg.n_components
    means = kmeans_pp_centers(X, M, rng)
    labels = ((X[:, None, :] - means[None]) ** 2).sum(-1).argmin(axis=1)
    var0 = np.maximum(X.var(axis=0), cfg.variance_floor)
    variances = np.empty((M, d))
    weights = np.empty(M)
    for j in range(M):
        pts = X[labels == j]
        weights[j] = max(len(pts), 1)
        variances[j] = np.maximum(pts.var(axis=0), cfg.variance_floor) if len(pts) > 1 else var0
    weights /= weights.sum()

    trace = []
    comp, ll = _e_step(X, weights, means, variances)
    trace.append(float(ll.mean()))
    for _ in range(cfg.max_iters):
        resp = np.exp(comp - ll[:, None])
        nk = resp.sum(axis=0)
        empty = nk < 1e-10
        if np.any(empty):
            # restart rule: re-seed each empty component at the worst-explained point
            order = np.argsort(ll)
            for slot, j in enumerate(np.flatnonzero(empty)):
                means[j] = X[order[slot]]
                variances[j] = var0
            weights = np.where(empty, 1.0 / n, nk / n)
            weights /= weights.sum()
        else:
            weights = nk / n
            means = (resp.T @ X) / nk[:, None]
            diff2 = (X[:, None, :] - means[None]) ** 2
            variances = np.maximum(np.einsum("nm,nmd->md", resp, diff2) / nk[:, None],
                                   cfg.variance_floor)
        comp, ll = _e_step(X, weights, means, variances)
        trace.append(float(ll.mean()))
        if not np.any(empty) and abs(trace[-1] - trace[-2]) < cfg.tol:
            break
    return GmmParams(weights, means, variances), trace


def em_fit(data, cfg: EmConfig) -> tuple[GmmParams, list[float]]:
    """Fit a diagonal GMM; returns the best of ``n_init`` runs and its trace.

    The trace holds the mean per-point log-likelihood after initialization
    and after every EM iteration.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < cfg.n_components:
        raise InvalidInputError(f"{X.shape[0]} points cannot support {cfg.n_components} components")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("data contains non-finite values")
    rng = np.random.default_rng(cfg.seed)
    best = None
    for _ in range(cfg.n_init):
        gmm, trace = _fit_once(X, cfg, rng)
        if best is None or trace[-1] > best[1][-1]:
            best = (gmm, trace)
    return best
