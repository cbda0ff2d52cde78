"""Empirical-likelihood weights from a matrix of moment evaluations.

For rows ``psi_i`` the weights ``p_i = 1 / (n (1 + rho' psi_i))`` maximise
``sum log p_i`` subject to ``sum p_i = 1`` and ``sum p_i psi_i = 0``.  The
multiplier ``rho`` minimises the convex dual

    l(rho) = -sum_i log(1 + rho' psi_i)

over the open set where every ``1 + rho' psi_i`` is positive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linprog

from .exceptions import InfeasibleMultiplier, InputError, NoConvergence, ZeroNotInHull

__all__ = [
    "ELWeights",
    "solve_multiplier",
    "weights_from_multiplier",
    "dual_objective",
    "zero_in_hull_interior",
]

log = logging.getLogger(__name__)

GRAD_TOL = 1e-9
MAX_ITER = 100
ARMIJO = 1e-4
RHO_BLOWUP = 1e10
ROUNDING = 1e-13


@dataclass(frozen=True)
class ELWeights:
    p: NDArray[np.float64]
    rho: NDArray[np.float64]
    converged: bool
    objective: float
    iterations: int = 0
    grad_norm: float = float("nan")

    @property
    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.p**2))


def _as_matrix(psi) -> NDArray[np.float64]:
    m = np.asarray(psi, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise InputError(f"psi must be an n x q matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError("psi contains non-finite entries")
    return m


def dual_objective(psi, rho) -> float:
    """``-sum log(1 + rho' psi_i)``; ``+inf`` outside the feasible set."""
    s = 1.0 + _as_matrix(psi) @ np.atleast_1d(np.asarray(rho, dtype=float))
    if np.any(s <= 0):
        return np.inf
    return float(-np.sum(np.log(s)))


def weights_from_multiplier(psi, rho) -> NDArray[np.float64]:
    """``p_i = 1 / (n (1 + rho' psi_i))``."""
    m = _as_matrix(psi)
    s = 1.0 + m @ np.atleast_1d(np.asarray(rho, dtype=float))
    if np.any(s <= 0):
        bad = int(np.argmin(s))
        raise InfeasibleMultiplier(f"1 + rho'psi_i = {s[bad]:.3g} <= 0 at row {bad}")
    return 1.0 / (m.shape[0] * s)


def zero_in_hull_interior(psi, margin: float = 1e-12) -> bool:
    """Whether a strictly positive probability vector has ``sum p_i psi_i = 0``.

    Solved as the linear program ``max t`` s.t. ``p_i >= t``, ``sum p = 1``,
    ``psi' p = 0``.
    """
    m = _as_matrix(psi)
    n, q = m.shape
    c = np.zeros(n + 1)
    c[-1] = -1.0
    a_ub = np.hstack([-np.eye(n), np.ones((n, 1))])
    a_eq = np.vstack([np.append(np.ones(n), 0.0), np.hstack([m.T, np.zeros((q, 1))])])
    b_eq = np.zeros(q + 1)
    b_eq[0] = 1.0
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(n), A_eq=a_eq, b_eq=b_eq,
                  bounds=[(0, None)] * n + [(None, 1.0)], method="highs")
    return bool(res.status == 0 and -res.fun > margin)


def _newton(m: NDArray[np.float64], rho: NDArray[np.float64], tol: float, max_iter: int):
    n = m.shape[0]
    floor = 1.0 / n**2
    s = 1.0 + m @ rho
    f = -np.sum(np.log(s))
    for it in range(max_iter + 1):
        ms = m / s[:, None]
        grad = -ms.sum(axis=0)
        gnorm = float(np.linalg.norm(grad))
        hess = ms.T @ ms
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
        slope = float(grad @ step)
        # a small gradient alone is not enough: when 0 is outside the hull the
        # gradient also decays as |rho| -> inf, but the Newton decrement does not
        if gnorm <= tol and -slope <= tol:
            return rho, f, it, gnorm, "converged"
        if it == max_iter or np.linalg.norm(rho) > RHO_BLOWUP:
            return rho, f, it, gnorm, "diverging"
        if slope >= 0 or not np.all(np.isfinite(step)):
            return rho, f, it, gnorm, "stalled"
        t = 1.0
        while True:
            cand = rho + t * step
            s_new = 1.0 + m @ cand
            if np.all(s_new > floor):
                f_new = -np.sum(np.log(s_new))
                # rounding slack: near the optimum f is flat to machine precision
                if f_new <= f + ARMIJO * t * slope + ROUNDING * (1.0 + abs(f)):
                    break
            t *= 0.5
            if t < 1e-20:
                # no progress possible in floating point near the optimum
                if -slope < 1e-24:
                    return rho, f, it, gnorm, "converged"
                return rho, f, it, gnorm, "stalled"
        rho, s, f = cand, s_new, f_new
    raise AssertionError("unreachable")


def solve_multiplier(psi, init=None, tol: float = GRAD_TOL, max_iter: int = MAX_ITER,
                     adjusted: bool = False) -> ELWeights:
    """Lagrange multiplier and weights for the moment rows ``psi`` (n x q).

    Damped Newton on the convex dual, started at ``init`` (default zero) with
    a line search that keeps every ``1 + rho' psi_i`` above ``1/n^2``.

    ``adjusted=True`` appends the pseudo-row ``-max(1, log(n)/2) * mean(psi)``
    before solving (adjusted empirical likelihood), which guarantees a
    solution for small samples; the returned weights are those of the
    original rows, renormalised to sum to one, so the moment constraint then
    holds only approximately.
    """
    m = _as_matrix(psi)
    n, q = m.shape
    if n <= q:
        raise InputError(f"need n > q, got n={n}, q={q}")
    if adjusted:
        a_n = max(1.0, np.log(n) / 2.0)
        m_solve = np.vstack([m, -a_n * m.mean(axis=0)])
    else:
        m_solve = m
    rho0 = np.zeros(q) if init is None else np.array(init, dtype=float).reshape(q)
    if np.any(1.0 + m_solve @ rho0 <= 1.0 / m_solve.shape[0] ** 2):
        rho0 = np.zeros(q)
    rho, f, it, gnorm, status = _newton(m_solve, rho0, tol, max_iter)
    if status != "converged":
        if not zero_in_hull_interior(m_solve):
            raise ZeroNotInHull("zero is not in the interior of the convex hull of the moment rows")
        raise NoConvergence(f"multiplier solve {status} after {it} iterations, |grad|={gnorm:.3e}")
    if adjusted:
        p = 1.0 / (1.0 + m @ rho)
        p /= p.sum()
    else:
        p = 1.0 / (n * (1.0 + m @ rho))
    return ELWeights(p=p, rho=rho, converged=True, objective=float(f), iterations=it, grad_norm=gnorm)
