"""Diagonal-covariance Gaussian mixtures as emitted by a mixture density head.

A head is three unconstrained arrays: weight logits ``alpha`` (..., M),
means ``m`` (..., M, D) and log-variances ``v`` (..., M, D).  ``activate``
maps it to proper mixture parameters:

    w_i      = softmax(alpha)_i
    mu_i     = m_i
    sigma2_i = max(exp(v_i), VARIANCE_FLOOR)

Every function broadcasts over leading batch dimensions, so the sequence
model can evaluate a whole (batch, step) grid in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VARIANCE_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


class InvalidInputError(ValueError):
    """Raised for malformed shapes or non-finite values."""


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class RawMdnHead:
    alpha: np.ndarray
    m: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "m", "v"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, arr)
        if self.alpha.ndim < 1 or self.m.ndim < 2:
            raise InvalidInputError("alpha needs shape (..., M) and m, v shape (..., M, D)")
        if self.m.shape != self.v.shape:
            raise InvalidInputError(f"m {self.m.shape} and v {self.v.shape} differ")
        if self.m.shape[:-1] != self.alpha.shape or self.alpha.shape[-1] < 1 or self.m.shape[-1] < 1:
            raise InvalidInputError(
                f"alpha {self.alpha.shape} inconsistent with m {self.m.shape}")
        for name in ("alpha", "m", "v"):
            _require_finite(name, getattr(self, name))

    @property
    def n_components(self) -> int:
        return self.alpha.shape[-1]

    @property
    def dim(self) -> int:
        return self.m.shape[-1]

    @classmethod
    def from_flat(cls, flat: np.ndarray, n_components: int, dim: int) -> "RawMdnHead":
        """Split a projection output laid out as ``[alpha | m | v]``."""
        flat = np.asarray(flat, dtype=np.float64)
        M, D = n_components, dim
        if flat.shape[-1] != M * (1 + 2 * D):
            raise InvalidInputError(f"expected {M * (1 + 2 * D)} outputs, got {flat.shape[-1]}")
        lead = flat.shape[:-1]
        alpha = flat[..., :M]
        m = flat[..., M:M + M * D].reshape(lead + (M, D))
        v = flat[..., M + M * D:].reshape(lead + (M, D))
        return cls(alpha, m, v)

    def flat(self) -> np.ndarray:
        lead = self.alpha.shape[:-1]
        return np.concatenate(
            [self.alpha, self.m.reshape(lead + (-1,)), self.v.reshape(lead + (-1,))], axis=-1)


@dataclass(frozen=True)
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        for name in ("weights", "means", "variances"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.means.shape != self.variances.shape or self.means.shape[:-1] != self.weights.shape:
            raise InvalidInputError("weights (..., M), means/variances (..., M, D) expected")
        for name in ("weights", "means", "variances"):
            _require_finite(name, getattr(self, name))
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(-1) - 1.0) > 1e-12):
            raise InvalidInputError("weights must be non-negative and sum to 1")
        if np.any(self.variances <= 0):
            raise InvalidInputError("variances must be strictly positive")

    @property
    def n_components(self) -> int:
        return self.weights.shape[-1]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]


def log_softmax(alpha: np.ndarray) -> np.ndarray:
    shifted = alpha - alpha.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return np.squeeze(out, axis=axis)


def activate(raw: RawMdnHead, variance_floor: float = VARIANCE_FLOOR) -> GmmParams:
    shifted = raw.alpha - raw.alpha.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=-1, keepdims=True)
    variances = np.maximum(np.exp(raw.v), variance_floor)
    return GmmParams(weights, raw.m.copy(), variances)


def _check_obs(gmm_dim: int, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 0 or y.shape[-1] != gmm_dim:
        raise InvalidInputError(f"observation has shape {y.shape}, mixture dimension is {gmm_dim}")
    _require_finite("observation", y)
    return y


def component_log_densities(log_w, means, variances, y):
    """Per-component ``log w_i + log N(y; mu_i, diag(sigma2_i))``, shape (..., M)."""
    diff = y[..., None, :] - means
    quad = diff * diff / variances
    log_norm = -0.5 * (LOG_2PI + np.log(variances) + quad)
    return log_w + log_norm.sum(axis=-1)


def log_density(gmm: GmmParams, y) -> np.ndarray | float:
    """log p(y) under the mixture, via log-sum-exp over components."""
    y = _check_obs(gmm.dim, y)
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    out = logsumexp(component_log_densities(log_w, gmm.means, gmm.variances, y))
    return float(out) if np.ndim(out) == 0 else out


def nll(gmm: GmmParams, y) -> np.ndarray | float:
    return -log_density(gmm, y)


def head_nll_and_grad(alpha, m, v, y, variance_floor: float = VARIANCE_FLOOR):
    """NLL of ``y`` under a raw head plus gradients w.r.t. the raw arrays.

    Works on plain arrays with arbitrary leading batch shape.  Returns
    ``(nll, d_alpha, d_m, d_v)`` where ``nll`` has the batch shape.
    """
    log_w = log_softmax(alpha)
    ev = np.exp(v)
    var = np.maximum(ev, variance_floor)
    comp = component_log_densities(log_w, m, var, y)
    cmax = comp.max(axis=-1, keepdims=True)
    ec = np.exp(comp - cmax)
    denom = ec.sum(axis=-1, keepdims=True)
    total = (cmax + np.log(denom))[..., 0]
    gamma = ec / denom
    ea = np.exp(alpha - alpha.max(axis=-1, keepdims=True))
    w = ea / ea.sum(axis=-1, keepdims=True)

    diff = m - y[..., None, :]
    d_alpha = w - gamma
    d_m = gamma[..., None] * diff / var
    d_v = gamma[..., None] * 0.5 * (1.0 - diff * diff / var)
    d_v = np.where(ev < variance_floor, 0.0, d_v)
    return -total, d_alpha, d_m, d_v


def nll_grad(raw: RawMdnHead, y, variance_floor: float = VARIANCE_FLOOR) -> RawMdnHead:
    """Gradient of ``nll(activate(raw), y)`` with respect to the raw head."""
    y = _check_obs(raw.dim, y)
    _, da, dm, dv = head_nll_and_grad(raw.alpha, raw.m, raw.v, y, variance_floor)
    return RawMdnHead(da, dm, dv)


def sample_components(weights: np.ndarray, means: np.ndarray, variances: np.ndarray,
                      rng: np.random.Generator, temperature: float = 1.0):
    """Ancestral draw from a batch of mixtures.

    One uniform per mixture picks the component by inverse CDF, then one
    standard normal per dimension.  Returns ``(samples, component_index)``.
    """
    if temperature < 0:
        raise InvalidInputError("temperature must be >= 0")
    lead = weights.shape[:-1]
    u = rng.random(lead)
    cdf = np.cumsum(weights, axis=-1)
    idx = np.minimum((cdf < u[..., None]).sum(axis=-1), weights.shape[-1] - 1)
    z = rng.standard_normal(lead + (means.shape[-1],))
    mu = np.take_along_axis(means, idx[..., None, None], axis=-2)[..., 0, :]
    var = np.take_along_axis(variances, idx[..., None, None], axis=-2)[..., 0, :]
    return mu + temperature * np.sqrt(var) * z, idx


def sample(gmm: GmmParams, rng: np.random.Generator, temperature: float = 1.0) -> np.ndarray:
    draws, _ = sample_components(gmm.weights, gmm.means, gmm.variances, rng, temperature)
    return draws
