"""Constrained maximum likelihood (CML) and generalized integration model (GIM).

Both maximise the profiled empirical log-likelihood

    h(mu) = min_lam [ -sum_i log(1 + lam' phi_i(beta, theta)) ]
            + sum_i log f(y_i | x_i, z_i; beta)
            - n2 (theta_hat - theta)' V^-1 (theta_hat - theta) / 2

over ``mu = (beta, theta)`` (GIM) or over ``beta`` with ``theta`` frozen at
the external estimate and no penalty (CML).  ``phi_i`` is the conditional
expectation of the external logistic score under the internal logistic
model, available in closed form for binary outcomes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .core import Dataset, ExternalSummary, validate_summary
from .el import solve_multiplier
from .exceptions import (
    DimensionMismatch,
    InnerInfeasible,
    NoConvergence,
    NumericalError,
    Oscillation,
    ZeroNotInHull,
)
from .glm import fit_logistic, full_design, reduced_design

__all__ = ["GimFit", "phi1_binary", "fit_cml", "fit_gim", "profiled_objective"]

GRAD_TOL = 1e-7
MAX_OUTER = 100
TRACE_SLACK = 1e-10
ARMIJO = 1e-4
ROUNDING = 1e-13
INNER_TOL = 1e-11
# Newton decrement, relative to |h|, below which h cannot resolve progress
DECREMENT_FLOOR = 1e-16


@dataclass(frozen=True)
class GimFit:
    beta: NDArray[np.float64]
    theta: NDArray[np.float64]
    lam: NDArray[np.float64]
    p: NDArray[np.float64]
    converged: bool
    objective_trace: NDArray[np.float64]
    timing: float
    iterations: int = 0
    grad_norm: float = float("nan")

    @property
    def objective(self) -> float:
        return float(self.objective_trace[-1])


def phi1_binary(x, z, beta, theta) -> NDArray[np.float64]:
    """``E[psi(Y, x; theta) | x, z; beta]`` for the logistic reduced score."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    u = np.concatenate(([1.0], x))
    d = np.concatenate((u, z))
    return u * (expit(d @ np.asarray(beta, dtype=float)) - expit(u @ np.asarray(theta, dtype=float)))


class _Profile:
    """Profiled objective and its derivatives for one dataset and summary."""

    def __init__(self, data: Dataset, summary: ExternalSummary | None, free_theta: bool):
        self.d = full_design(data)
        self.u = reduced_design(data)
        self.y = data.y
        self.n, self.p = self.d.shape
        self.summary = summary
        self.free_theta = free_theta and summary is not None
        if summary is not None:
            validate_summary(summary)
            if summary.q != self.u.shape[1]:
                raise DimensionMismatch(
                    f"summary has dimension {summary.q}, reduced model has {self.u.shape[1]}"
                )
            self.theta_hat = summary.theta_hat
            self.q = summary.q
            # n2 * V^-1, the curvature of the penalty
            self.prec = summary.n2 * np.linalg.solve(summary.v_hat, np.eye(self.q))
            self.prec = 0.5 * (self.prec + self.prec.T)
        else:
            self.q = 0
            self.theta_hat = np.zeros(0)
        self.dim = self.p + (self.q if self.free_theta else 0)

    def split(self, mu):
        beta = mu[: self.p]
        theta = mu[self.p:] if self.free_theta else self.theta_hat
        return beta, theta

    def phi(self, beta, theta):
        mu1 = expit(self.d @ beta)
        mu2 = expit(self.u @ theta)
        return self.u * (mu1 - mu2)[:, None], mu1, mu2

    def evaluate(self, mu, lam0):
        """Inner solve at ``mu``; returns ``(h, lam, p, cache)``."""
        beta, theta = self.split(mu)
        eta = self.d @ beta
        loglik = float(np.sum(self.y * eta - np.logaddexp(0.0, eta)))
        if self.q == 0:
            return loglik, np.zeros(0), np.full(self.n, 1.0 / self.n), None
        phi, mu1, mu2 = self.phi(beta, theta)
        w = solve_multiplier(phi, init=lam0, tol=INNER_TOL)
        h = w.objective + loglik
        if self.free_theta:
            r = self.theta_hat - theta
            h -= 0.5 * float(r @ self.prec @ r)
        return h, w.rho, w.p, (phi, mu1, mu2, theta)

    def derivatives(self, mu, lam, cache):
        """Gradient and Hessian of ``h`` at ``mu`` given the inner solution ``lam``."""
        beta, theta = self.split(mu)
        d, u, p = self.d, self.u, self.p
        if cache is None:
            mu1 = expit(d @ beta)
            v1 = mu1 * (1.0 - mu1)
            grad = d.T @ (self.y - mu1)
            hess = -(d * v1[:, None]).T @ d
            return grad, hess
        phi, mu1, mu2, theta = cache
        v1 = mu1 * (1.0 - mu1)
        v2 = mu2 * (1.0 - mu2)
        s = 1.0 + phi @ lam
        c = u @ lam
        ft = self.free_theta
        # G_i = d(lam' phi_i)/d mu
        g_rows = d * (c * v1)[:, None]
        if ft:
            g_rows = np.hstack([g_rows, -u * (c * v2)[:, None]])
        gs = g_rows / s[:, None]
        grad = -gs.sum(axis=0)
        grad[:p] += d.T @ (self.y - mu1)
        hmm = gs.T @ gs
        hmm[:p, :p] -= (d * (c * v1 * (1.0 - 2.0 * mu1) / s)[:, None]).T @ d
        hmm[:p, :p] -= (d * v1[:, None]).T @ d
        if ft:
            r = self.theta_hat - theta
            grad[p:] += self.prec @ r
            hmm[p:, p:] += (u * (c * v2 * (1.0 - 2.0 * mu2) / s)[:, None]).T @ u
            hmm[p:, p:] -= self.prec
        # cross derivative d^2 l / d mu d lam and inner curvature
        ps = phi / s[:, None]
        l_ll = ps.T @ ps
        l_ml = gs.T @ ps
        l_ml[:p] -= (d * (v1 / s)[:, None]).T @ u
        if ft:
            l_ml[p:] += (u * (v2 / s)[:, None]).T @ u
        # first-order correction for the residual of the inner solve
        l_l = -ps.sum(axis=0)
        corr = np.linalg.solve(l_ll, np.column_stack([l_ml.T, l_l]))
        grad = grad - l_ml @ corr[:, -1]
        hess = hmm - l_ml @ corr[:, :-1]
        return grad, 0.5 * (hess + hess.T)


def _ascent_direction(grad, hess):
    """Newton direction for maximisation, regularised until ``-hess`` is PD."""
    neg = -hess
    tau = 0.0
    scale = max(1e-8, float(np.max(np.abs(np.diag(neg)))))
    for _ in range(60):
        try:
            fac = np.linalg.cholesky(neg + tau * np.eye(len(grad)))
            break
        except np.linalg.LinAlgError:
            tau = max(2.0 * tau, 1e-8 * scale)
    else:
        raise NoConvergence("could not regularise the profiled Hessian")
    return np.linalg.solve(fac.T, np.linalg.solve(fac, grad))


def _maximize(prob: _Profile, mu0) -> GimFit:
    t_start = time.perf_counter()
    mu = np.array(mu0, dtype=float)
    try:
        h, lam, p, cache = prob.evaluate(mu, None)
    except ZeroNotInHull as exc:
        raise InnerInfeasible(f"constraint infeasible at the starting point: {exc}") from None
    trace = [h]
    gnorm = np.inf
    for it in range(MAX_OUTER + 1):
        grad, hess = prob.derivatives(mu, lam, cache)
        gnorm = float(np.linalg.norm(grad))
        if gnorm < GRAD_TOL:
            break
        if it == MAX_OUTER:
            raise NoConvergence(f"no convergence in {MAX_OUTER} outer iterations, |grad|={gnorm:.3e}")
        step = _ascent_direction(grad, hess)
        slope = float(grad @ step)
        if slope < DECREMENT_FLOOR * (1.0 + abs(h)):
            break
        t = 1.0
        accepted = False
        while t > 1e-12:
            cand = mu + t * step
            try:
                h_new, lam_new, p_new, cache_new = prob.evaluate(cand, lam)
            except NumericalError:
                t *= 0.5
                continue
            if h_new >= h + ARMIJO * t * slope - ROUNDING * (1.0 + abs(h)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # at the floating-point floor the Newton decrement is negligible
            if slope < 1e-10:
                break
            raise NoConvergence(f"line search failed at outer iteration {it + 1}, |grad|={gnorm:.3e}")
        if h_new < h - TRACE_SLACK:
            raise Oscillation(f"objective decreased from {h:.12g} to {h_new:.12g}")
        mu, h, lam, p, cache = cand, h_new, lam_new, p_new, cache_new
        trace.append(h)
    beta, theta = prob.split(mu)
    return GimFit(
        beta=beta.copy(),
        theta=np.array(theta, dtype=float) if prob.q else np.zeros(0),
        lam=lam,
        p=p,
        converged=True,
        objective_trace=np.array(trace),
        timing=time.perf_counter() - t_start,
        iterations=len(trace) - 1,
        grad_norm=gnorm,
    )


def _beta_init(data: Dataset, init):
    if init is not None:
        return np.asarray(init, dtype=float)
    return fit_logistic(full_design(data), data.y).beta


def _centered_beta(prob: _Profile, beta0, max_iter: int = 50):
    """Minimum-norm move from ``beta0`` to a point where ``sum_i phi_i = 0``.

    There the uniform weights satisfy the constraint, so ``lam = 0`` is a
    feasible inner solution.
    """
    beta = np.array(beta0, dtype=float)
    theta = prob.theta_hat
    for _ in range(max_iter):
        phi, mu1, _ = prob.phi(beta, theta)
        r = phi.sum(axis=0)
        if np.linalg.norm(r) <= 1e-10 * prob.n:
            return beta
        jac = (prob.u * (mu1 * (1.0 - mu1))[:, None]).T @ prob.d
        beta = beta - np.linalg.lstsq(jac, r, rcond=None)[0]
    raise InnerInfeasible("could not find a feasible starting point for the constraint")


def fit_cml(data: Dataset, summary: ExternalSummary | None, init=None) -> GimFit:
    """CML: the external estimate is treated as exact (theta frozen, no penalty).

    Starts at ``init`` (internal MLE by default); when the constraint is
    infeasible there, restarts from the nearest point where it holds with
    uniform weights.
    """
    t0 = time.perf_counter()
    prob = _Profile(data, summary, free_theta=False)
    beta0 = _beta_init(data, init)
    try:
        fit = _maximize(prob, beta0)
    except InnerInfeasible:
        fit = _maximize(prob, _centered_beta(prob, beta0))
    return _with_timing(fit, time.perf_counter() - t0)


def fit_gim(data: Dataset, summary: ExternalSummary | None, init=None,
            theta_start: str = "internal") -> GimFit:
    """GIM: joint maximisation over (beta, theta) with the quadratic penalty.

    ``init`` is the starting ``beta`` (internal MLE when omitted).  With
    ``theta_start="internal"`` theta starts at the internal reduced-model
    fit, where the constraint holds exactly with ``lam = 0``;
    ``"external"`` starts at the external estimate, which may lie outside
    the feasible region.  ``summary=None`` drops the constraint and the fit
    reduces to maximum likelihood.
    """
    t0 = time.perf_counter()
    prob = _Profile(data, summary, free_theta=True)
    beta0 = _beta_init(data, init)
    if not prob.free_theta:
        mu0 = beta0
    elif theta_start == "internal":
        mu0 = np.concatenate([beta0, fit_logistic(prob.u, data.y).beta])
    elif theta_start == "external":
        mu0 = np.concatenate([beta0, summary.theta_hat])
    else:
        raise ValueError(f"unknown theta_start {theta_start!r}")
    fit = _maximize(prob, mu0)
    return _with_timing(fit, time.perf_counter() - t0)


def _with_timing(fit: GimFit, seconds: float) -> GimFit:
    return GimFit(**{**fit.__dict__, "timing": seconds})


def profiled_objective(data: Dataset, summary: ExternalSummary, beta, theta=None,
                       penalize: bool = False) -> float:
    """Value of the profiled objective at given parameters (inner problem solved)."""
    prob = _Profile(data, summary, free_theta=penalize)
    mu = np.asarray(beta, dtype=float)
    if penalize:
        mu = np.concatenate([mu, np.asarray(theta, dtype=float)])
    elif theta is not None and not np.allclose(theta, summary.theta_hat):
        raise ValueError("theta is frozen at theta_hat unless penalize=True")
    return prob.evaluate(mu, None)[0]
