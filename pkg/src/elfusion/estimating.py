"""Newton root-finding and sandwich covariance for generic estimating equations."""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

from .core import Dataset, EstimatingFunctionSpec
from .exceptions import NoConvergence, SingularJacobian

__all__ = ["solve_estimating_equation", "sandwich_covariance", "uniform_weights"]


def uniform_weights(n: int) -> NDArray[np.float64]:
    return np.full(n, 1.0 / n)


def solve_estimating_equation(
    spec: EstimatingFunctionSpec,
    data: Dataset,
    weights,
    init,
    tol: float = 1e-8,
    step_tol: float = 1e-6,
    max_iter: int = 100,
    max_halvings: int = 25,
) -> tuple[NDArray[np.float64], int, float]:
    """Find a root of ``sum_i w_i g(row_i; param)``.

    Newton steps with step halving on the squared residual norm.  A point is
    accepted as a root only when the residual is below ``tol`` *and* the
    Newton step is small, so a solver drifting along a flat direction toward
    infinity is reported as divergent instead of converged.

    Returns ``(param, iterations, residual_norm)``.
    """
    w = np.asarray(weights, dtype=float)
    param = np.array(init, dtype=float)
    if param.shape != (spec.dim_param,):
        raise ValueError(f"init has shape {param.shape}, expected ({spec.dim_param},)")
    resid = spec.weighted_sum(data, param, w)
    rnorm = float(np.linalg.norm(resid))
    for it in range(1, max_iter + 1):
        jac = spec.weighted_jacobian(data, param, w)
        try:
            step = np.linalg.solve(jac, -resid)
        except np.linalg.LinAlgError:
            raise SingularJacobian(f"{spec.name}: singular Jacobian at iteration {it}") from None
        if not np.all(np.isfinite(step)):
            raise SingularJacobian(f"{spec.name}: non-finite Newton step at iteration {it}")
        if rnorm <= tol and np.linalg.norm(step) <= step_tol * (1.0 + np.linalg.norm(param)):
            # the pending step is tiny; taking it costs one evaluation and
            # buys close to full precision
            cand = param + step
            cand_norm = float(np.linalg.norm(spec.weighted_sum(data, cand, w)))
            if cand_norm <= rnorm:
                return cand, it, cand_norm
            return param, it - 1, rnorm
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = param + t * step
            cand_resid = spec.weighted_sum(data, cand, w)
            cand_norm = float(np.linalg.norm(cand_resid))
            if np.isfinite(cand_norm) and cand_norm <= rnorm * (1.0 + 1e-12) + 1e-300:
                break
            t *= 0.5
        else:
            # no decrease along the Newton direction; accept only a root
            if rnorm <= tol:
                return param, it - 1, rnorm
            raise NoConvergence(f"{spec.name}: line search failed, residual {rnorm:.3e}")
        param, resid, rnorm = cand, cand_resid, cand_norm
        if np.max(np.abs(param)) > spec.param_bound:
            raise spec.divergence_error(
                f"{spec.name}: |parameter| exceeded {spec.param_bound:g} at iteration {it}"
            )
    raise NoConvergence(f"{spec.name}: no convergence in {max_iter} iterations (residual {rnorm:.3e})")


def sandwich_covariance(spec: EstimatingFunctionSpec, data: Dataset, param) -> NDArray[np.float64]:
    """Robust covariance ``A^-1 B A^-T / n`` of an M-estimator.

    ``A`` is the mean Jacobian and ``B`` the mean outer product of the
    estimating function at ``param``.  The result is the covariance of the
    estimate itself, not of its root-n scaled version.
    """
    n = data.n
    vals = spec.values(data, param)
    a_mat = spec.weighted_jacobian(data, param, np.full(n, 1.0 / n))
    b_mat = vals.T @ vals / n
    a_inv_b = np.linalg.solve(a_mat, b_mat)
    cov = np.linalg.solve(a_mat, a_inv_b.T).T / n
    return 0.5 * (cov + cov.T)
