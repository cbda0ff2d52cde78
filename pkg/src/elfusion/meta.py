"""Fixed-effect (generalized least squares) pooling of parameter estimates."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .core import SYMMETRY_TOL, ExternalSummary
from .exceptions import DimensionMismatch, NotPositiveDefinite

__all__ = ["MetaEstimate", "gls_combine", "gls_objective", "combine_with_summaries"]


@dataclass(frozen=True)
class MetaEstimate:
    theta_meta: NDArray[np.float64]
    v_meta: NDArray[np.float64]
    sources: int


def _chol(cov: NDArray[np.float64], k: int):
    if np.max(np.abs(cov - cov.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(cov))):
        raise NotPositiveDefinite(f"source {k}: covariance is not symmetric")
    try:
        return cho_factor(cov, lower=True)
    except LinAlgError:
        raise NotPositiveDefinite(f"source {k}: covariance is not positive definite") from None


def gls_combine(estimates: Sequence[tuple]) -> MetaEstimate:
    """Pool ``(theta_k, cov_k)`` pairs by inverse-covariance weighting.

    ``cov_k`` is the covariance of ``theta_k`` itself.  Returns the minimiser
    of ``sum_k (theta - theta_k)' cov_k^-1 (theta - theta_k)`` and its
    covariance ``(sum_k cov_k^-1)^-1``.
    """
    if len(estimates) < 2:
        raise DimensionMismatch("need at least two sources to combine")
    thetas = [np.atleast_1d(np.asarray(t, dtype=float)) for t, _ in estimates]
    covs = [np.atleast_2d(np.asarray(c, dtype=float)) for _, c in estimates]
    q = thetas[0].shape[0]
    for k, (t, c) in enumerate(zip(thetas, covs)):
        if t.shape != (q,) or c.shape != (q, q):
            raise DimensionMismatch(f"source {k}: shapes {t.shape}, {c.shape}; expected ({q},), ({q}, {q})")
    eye = np.eye(q)
    precision = np.zeros((q, q))
    info_vec = np.zeros(q)
    for k, (t, c) in enumerate(zip(thetas, covs)):
        fac = _chol(c, k)
        precision += cho_solve(fac, eye)
        info_vec += cho_solve(fac, t)
    precision = 0.5 * (precision + precision.T)
    try:
        pfac = cho_factor(precision, lower=True)
    except LinAlgError:
        raise NotPositiveDefinite("pooled precision is not positive definite") from None
    theta = cho_solve(pfac, info_vec)
    v = cho_solve(pfac, eye)
    return MetaEstimate(theta_meta=theta, v_meta=0.5 * (v + v.T), sources=len(estimates))


def gls_objective(theta, estimates: Sequence[tuple]) -> float:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    total = 0.0
    for t, c in estimates:
        r = theta - np.atleast_1d(np.asarray(t, dtype=float))
        total += float(r @ np.linalg.solve(np.atleast_2d(c), r))
    return total


def combine_with_summaries(theta0, cov0, summaries: Sequence[ExternalSummary]) -> MetaEstimate:
    """Pool an internal estimate with external summaries (each entering as ``v_hat / n2``)."""
    return gls_combine([(theta0, cov0)] + [(s.theta_hat, s.cov) for s in summaries])
