"""Logistic regression: (weighted) maximum likelihood, score functions, reduced fits."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from functools import partial

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .core import Dataset, EstimatingFunctionSpec
from .estimating import sandwich_covariance
from .exceptions import InputError, NoConvergence, RankDeficient, Separation

__all__ = [
    "GlmFit",
    "fit_logistic",
    "score_reduced",
    "logistic_score_spec",
    "reduced_design",
    "full_design",
    "internal_reduced_fit",
    "SEPARATION_BOUND",
]

SCORE_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 25
SEPARATION_BOUND = 30.0


@dataclass(frozen=True)
class GlmFit:
    beta: NDArray[np.float64]
    cov: NDArray[np.float64]
    converged: bool
    iterations: int
    final_grad_norm: float


def _loglik(eta, y, w):
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def fit_logistic(design, y, weights=None, tol: float = SCORE_TOL, max_iter: int = MAX_ITER) -> GlmFit:
    """Logistic regression by Newton-Raphson with step halving.

    Solves ``sum_i w_i d_i (y_i - expit(d_i' beta)) = 0``; ``weights`` must be
    positive and sum to one, and default to ``1/n``.  The returned ``cov`` is
    the inverse expected information ``(n * sum_i w_i mu_i (1 - mu_i) d_i d_i')^-1``.
    """
    d = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = d.shape
    if y.shape != (n,):
        raise InputError(f"y has shape {y.shape}, expected ({n},)")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0):
        raise InputError("weights must be a non-negative vector of length n")
    if n <= k:
        raise RankDeficient(f"need n > d, got n={n}, d={k}")
    support = w > 0
    if np.linalg.matrix_rank(d[support]) < k:
        raise RankDeficient("design is not of full column rank on the support of the weights")

    beta = np.zeros(k)
    eta = d @ beta
    ll = _loglik(eta, y, w)
    for it in range(max_iter + 1):
        mu = expit(eta)
        score = d.T @ (w * (y - mu))
        gnorm = float(np.linalg.norm(score))
        info = (d * (w * mu * (1.0 - mu))[:, None]).T @ d
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise Separation("information matrix became singular") from None
        if gnorm < tol and np.linalg.norm(step) <= 1e-6 * (1.0 + np.linalg.norm(beta)):
            cand = beta + step
            cand_gnorm = float(np.linalg.norm(d.T @ (w * (y - expit(d @ cand)))))
            if cand_gnorm <= gnorm:
                beta, gnorm = cand, cand_gnorm
            cov = np.linalg.inv(n * info)
            return GlmFit(beta, 0.5 * (cov + cov.T), True, it, gnorm)
        if it == max_iter:
            break
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + t * step
            cand_eta = d @ cand
            cand_ll = _loglik(cand_eta, y, w)
            if cand_ll >= ll - 1e-12 * (1.0 + abs(ll)):
                break
            t *= 0.5
        else:
            raise NoConvergence(f"step halving failed at iteration {it + 1}")
        beta, eta, ll = cand, cand_eta, cand_ll
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise Separation(f"|beta| exceeded {SEPARATION_BOUND:g} at iteration {it + 1}")
    raise NoConvergence(f"no convergence in {max_iter} iterations (score norm {gnorm:.3e})")


def score_reduced(row, theta) -> NDArray[np.float64]:
    """Score of the reduced logistic model at one row ``(y, x)``."""
    y, x = row
    u = np.concatenate(([1.0], np.atleast_1d(np.asarray(x, dtype=float))))
    return u * (float(y) - expit(u @ np.asarray(theta, dtype=float)))


def reduced_design(data: Dataset) -> NDArray[np.float64]:
    return np.column_stack([np.ones(data.n), data.x])


def full_design(data: Dataset) -> NDArray[np.float64]:
    return np.column_stack([np.ones(data.n), data.x, data.z])


def _logistic_eval(design, data, b):
    d = design(data)
    return d * (data.y - expit(d @ b))[:, None]


def _logistic_jac(design, data, b):
    d = design(data)
    mu = expit(d @ b)
    return -(mu * (1.0 - mu))[:, None, None] * d[:, :, None] * d[:, None, :]


def _logistic_wjac(design, data, b, w):
    d = design(data)
    mu = expit(d @ b)
    return -(d * (w * mu * (1.0 - mu))[:, None]).T @ d


def logistic_score_spec(
    design: Callable[[Dataset], NDArray[np.float64]], dim: int, name: str = "logistic score"
) -> EstimatingFunctionSpec:
    """Estimating function ``d(row) * (y - expit(d(row)' b))`` for a design builder.

    Picklable whenever ``design`` is a module-level function.
    """
    return EstimatingFunctionSpec(
        dim_param=dim,
        dim_value=dim,
        eval=partial(_logistic_eval, design),
        jac=partial(_logistic_jac, design),
        wjac=partial(_logistic_wjac, design),
        name=name,
        param_bound=SEPARATION_BOUND,
        divergence_error=Separation,
    )


def internal_reduced_fit(data: Dataset, covariance: str = "sandwich"):
    """Reduced-model logistic fit of y on (1, X) from internal data.

    Returns ``(theta, cov)`` where ``cov`` estimates the covariance of
    ``theta`` itself.  ``covariance="model"`` gives the inverse information
    instead of the sandwich.
    """
    d = reduced_design(data)
    fit = fit_logistic(d, data.y)
    if covariance == "model":
        return fit.beta, fit.cov
    if covariance != "sandwich":
        raise ValueError(f"unknown covariance {covariance!r}")
    spec = logistic_score_spec(reduced_design, d.shape[1], name="reduced score")
    return fit.beta, sandwich_covariance(spec, data, fit.beta)
