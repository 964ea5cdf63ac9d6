"""Gaussian and GMM emission densities.

Besides the two value types this module holds the vectorized kernels the
rest of the package is built on: the closed-form expected log-likelihood
of one Gaussian under another, the GMM responsibility matrix and the
GMM-level variational bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, xlogy

LOG_2PI = np.log(2.0 * np.pi)

#: default eigenvalue floor for every covariance produced by a fit
COV_FLOOR = 1e-6


class CovarianceError(ValueError):
    """A covariance matrix is not symmetric positive definite."""


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def floor_covariance(cov: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Symmetrize ``cov`` (shape ``(..., d, d)``) and clip its eigenvalues at ``floor``."""
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    if floor <= 0:
        return cov
    if cov.shape[-1] == 1:
        return np.maximum(cov, floor)
    w, v = np.linalg.eigh(cov)
    if np.all(w >= floor):
        return cov
    w = np.maximum(w, floor)
    out = np.einsum("...ij,...j,...kj->...ik", v, w, v)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError("covariance is not positive definite") from exc


def _precision_logdet(cov: np.ndarray):
    chol = _cholesky(cov)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    eye = np.broadcast_to(np.eye(cov.shape[-1]), cov.shape)
    prec = np.linalg.solve(cov, eye)
    prec = 0.5 * (prec + np.swapaxes(prec, -1, -2))
    return prec, logdet


def pairwise_expected_loglik(mean_b, cov_b, mean_r, cov_r) -> np.ndarray:
    """Closed-form ``E_{y ~ N(mean_b, cov_b)}[log N(y; mean_r, cov_r)]``.

    Parameters
    ----------
    mean_b, cov_b : arrays of shape ``(B, d)`` and ``(B, d, d)``
        Gaussians the expectation is taken under.
    mean_r, cov_r : arrays of shape ``(R, d)`` and ``(R, d, d)``
        Gaussians whose log-density is averaged.

    Returns
    -------
    ndarray of shape ``(B, R)``
    """
    mean_b = np.asarray(mean_b, dtype=float)
    mean_r = np.asarray(mean_r, dtype=float)
    d = mean_b.shape[-1]
    if mean_r.shape[-1] != d:
        raise ValueError(f"dimension mismatch: {d} vs {mean_r.shape[-1]}")
    prec, logdet = _precision_logdet(np.asarray(cov_r, dtype=float))
    trace = np.einsum("rij,bji->br", prec, np.asarray(cov_b, dtype=float))
    diff = mean_r[None, :, :] - mean_b[:, None, :]
    maha = np.einsum("bri,rij,brj->br", diff, prec, diff)
    return -0.5 * (d * LOG_2PI + logdet[None, :] + trace + maha)


def gaussian_logpdf(x, mean, cov) -> np.ndarray:
    """Log-density of every row of ``x`` (``(N, d)``) under ``K`` Gaussians -> ``(N, K)``."""
    x = np.asarray(x, dtype=float)
    chol = _cholesky(np.asarray(cov, dtype=float))
    d = x.shape[-1]
    mean = np.asarray(mean, dtype=float)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    if d == 1:
        z2 = ((x[:, None, 0] - mean[None, :, 0]) / chol[None, :, 0, 0]) ** 2
    else:
        # (K, d, N): solve L z = (x - mean) per component
        diff = x.T[None, :, :] - mean[:, :, None]
        z = np.linalg.solve(chol, diff)
        z2 = np.sum(z * z, axis=1).T
    return -0.5 * (d * LOG_2PI + logdet[None, :] + z2)


@dataclass(frozen=True, eq=False)
class Gaussian:
    """Multivariate normal with full covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(f"mean {mean.shape} and cov {cov.shape} disagree")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise CovarianceError("covariance is not symmetric")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(cov))

    @property
    def d(self) -> int:
        return self.mean.size


@dataclass(frozen=True, eq=False)
class GMM:
    """Gaussian mixture stored as stacked arrays.

    ``weights`` has shape ``(M,)``, ``means`` ``(M, d)`` and ``covs``
    ``(M, d, d)``.  Use :meth:`from_components` to build one from a list
    of :class:`Gaussian`.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        means = np.asarray(self.means, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 1:
            covs = covs[:, None, None]
        M, d = means.shape
        if w.shape != (M,) or covs.shape != (M, d, d):
            raise ValueError(f"inconsistent GMM shapes {w.shape}, {means.shape}, {covs.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"GMM weights must be a probability vector, got {w}")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "covs", _frozen(covs))

    @classmethod
    def from_components(cls, weights, components) -> GMM:
        components = list(components)
        dims = {g.d for g in components}
        if len(dims) != 1:
            raise ValueError(f"components disagree on dimension: {sorted(dims)}")
        return cls(
            weights,
            np.stack([g.mean for g in components]),
            np.stack([g.cov for g in components]),
        )

    @property
    def M(self) -> int:
        return self.weights.size

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[Gaussian]:
        return [Gaussian(m, c) for m, c in zip(self.means, self.covs)]


def expected_gauss_ll(base: Gaussian, reduced: Gaussian) -> float:
    """Expected log-density of ``reduced`` for samples drawn from ``base``.

    Raises
    ------
    ValueError
        If the dimensions differ.
    CovarianceError
        If ``reduced.cov`` cannot be inverted.
    """
    if base.d != reduced.d:
        raise ValueError(f"dimension mismatch: {base.d} vs {reduced.d}")
    out = pairwise_expected_loglik(
        base.mean[None], base.cov[None], reduced.mean[None], reduced.cov[None]
    )
    return float(out[0, 0])


def log_responsibilities(log_weights_r, ell) -> np.ndarray:
    """Row-wise log-softmax of ``log_weights_r + ell`` along the last axis."""
    scores = np.asarray(ell) + np.asarray(log_weights_r)
    return scores - logsumexp(scores, axis=-1, keepdims=True)


def _ell_table(base: GMM, reduced: GMM) -> np.ndarray:
    if base.d != reduced.d:
        raise ValueError(f"dimension mismatch: {base.d} vs {reduced.d}")
    return pairwise_expected_loglik(base.means, base.covs, reduced.means, reduced.covs)


def gmm_variational_estep(base: GMM, reduced: GMM) -> np.ndarray:
    """Optimal responsibility matrix between the components of two GMMs.

    Row ``m`` gives, for an observation from base component ``m``, the
    probability that it is explained by each reduced component.
    Returns an ``(M_base, M_reduced)`` row-stochastic array.
    """
    ell = _ell_table(base, reduced)
    with np.errstate(divide="ignore"):
        log_c = np.log(reduced.weights)
    return np.exp(log_responsibilities(log_c, ell))


def gmm_lower_bound(base: GMM, reduced: GMM, eta: np.ndarray) -> float:
    """Variational lower bound on ``E_base[log reduced(y)]`` for a given ``eta``."""
    eta = np.asarray(eta, dtype=float)
    ell = _ell_table(base, reduced)
    with np.errstate(divide="ignore"):
        log_c = np.log(reduced.weights)
    # 0 * log 0 terms are dropped; eta > 0 on a zero-weight component gives -inf
    inner = xlogy(eta, np.exp(log_c)[None, :]) - xlogy(eta, eta) + eta * ell
    return float(base.weights @ inner.sum(axis=1))
