"""Exact Cholesky likelihood and Gaussian conditioning (the dense oracle)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .errors import NumericFailure

LOG_2PI = math.log(2 * math.pi)


def _chol(cov, what="covariance"):
    try:
        return cholesky(np.asarray(cov, float), lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericFailure(f"{what} matrix is not positive definite") from exc


def cholesky_loglik(residuals, cov) -> float:
    """Gaussian log-density of ``residuals`` under N(0, cov)."""
    r = np.asarray(residuals, float)
    if r.size == 0:
        return 0.0
    L = _chol(cov)
    z = solve_triangular(L, r, lower=True)
    return float(-0.5 * z @ z - np.sum(np.log(np.diag(L))) - 0.5 * r.size * LOG_2PI)


@dataclass
class GaussianConditional:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def sd(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def conditional_gaussian(obs_values, cross_cov, obs_cov, pred_cov, obs_mean=None,
                         pred_mean=None) -> GaussianConditional:
    """Distribution of the prediction block given the observed block.

    ``cross_cov`` is cov(pred, obs) with shape (p, n).
    """
    y = np.asarray(obs_values, float)
    cross = np.atleast_2d(np.asarray(cross_cov, float))
    pred_cov = np.atleast_2d(np.asarray(pred_cov, float))
    p = pred_cov.shape[0]
    obs_mean = np.zeros_like(y) if obs_mean is None else np.asarray(obs_mean, float)
    pred_mean = np.zeros(p) if pred_mean is None else np.asarray(pred_mean, float)
    if y.size == 0:
        return GaussianConditional(pred_mean.copy(), pred_cov.copy())
    cf = (_chol(obs_cov, "observation"), True)
    alpha = cho_solve(cf, y - obs_mean)
    mean = pred_mean + cross @ alpha
    V = solve_triangular(cf[0], cross.T, lower=True)
    cov = pred_cov - V.T @ V
    return GaussianConditional(mean, 0.5 * (cov + cov.T))


class DenseFactor:
    """Cholesky factor of a covariance, exposing the same interface as SparseFactor."""

    def __init__(self, cov):
        self.L = _chol(cov)

    @property
    def n(self):
        return self.L.shape[0]

    def whiten(self, x):
        """L^{-1} x, so that whiten(a)^T whiten(b) = a^T cov^{-1} b."""
        return solve_triangular(self.L, np.asarray(x, float), lower=True)

    def loglik(self, residuals) -> float:
        r = np.asarray(residuals, float)
        if r.size == 0:
            return 0.0
        z = self.whiten(r)
        return float(-0.5 * z @ z - np.sum(np.log(np.diag(self.L))) - 0.5 * r.size * LOG_2PI)
