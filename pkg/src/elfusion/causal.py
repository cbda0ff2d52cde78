"""IPTW estimation of a marginal structural logistic model, with and without
external-summary integration through the stacked estimating function."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from functools import partial

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .core import Dataset, EstimatingFunctionSpec, ExternalSummary
from .el import ELWeights
from .estimating import solve_estimating_equation, uniform_weights
from .exceptions import ExtremePropensity, InputError, Separation, Unidentified
from .glm import SEPARATION_BOUND, fit_logistic, logistic_score_spec
from .integrator import fit_integrated, stage

__all__ = [
    "CausalFit",
    "ps_design",
    "external_design",
    "stacked_g",
    "stacked_spec",
    "external_score_spec",
    "fit_iptw",
    "fit_integrated_iptw",
    "PS_BOUND",
]

PS_BOUND = 1e-6


@dataclass(frozen=True)
class CausalFit:
    beta_msm: NDArray[np.float64]
    gamma: NDArray[np.float64]
    weights_el: ELWeights | None
    converged: bool
    theta_meta: NDArray[np.float64] | None = None

    @property
    def log_odds_ratio(self) -> float:
        return float(self.beta_msm[1])


def ps_design(data: Dataset) -> NDArray[np.float64]:
    """Propensity-score design ``(1, X, Z)``."""
    return np.column_stack([np.ones(data.n), data.x, data.z])


def external_design(data: Dataset) -> NDArray[np.float64]:
    """Design of the external conventional regression ``(1, A, Z, X)``."""
    return np.column_stack([np.ones(data.n), data.a, data.z, data.x])


def _require_exposure(data: Dataset):
    if data.a is None:
        raise InputError("dataset has no exposure column")


def stacked_g(row, beta, eta) -> NDArray[np.float64]:
    """Stacked IPTW-MSM and propensity-score estimating function at one row.

    ``row`` is ``(y, a, x, z)``; the propensity design is ``(1, x, z)``.
    """
    y, a, x, z = row
    dps = np.concatenate(([1.0], np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(z, float))))
    e = expit(dps @ np.asarray(eta, dtype=float))
    pi = e if a == 1 else 1.0 - e
    mu = expit(beta[0] + beta[1] * a)
    return np.concatenate((np.array([1.0, a]) * (y - mu) / pi, dps * (a - e)))


def _stacked_parts(data, param):
    dps = ps_design(data)
    beta, eta = param[:2], param[2:]
    a = data.a
    e = expit(dps @ eta)
    pi = np.where(a == 1, e, 1.0 - e)
    mu = expit(beta[0] + beta[1] * a)
    xa = np.column_stack([np.ones(data.n), a])
    return dps, a, e, pi, mu, xa


def _stacked_eval(data, param):
    dps, a, e, pi, mu, xa = _stacked_parts(data, param)
    return np.hstack([xa * ((data.y - mu) / pi)[:, None], dps * (a - e)[:, None]])


def _stacked_jac(data, param):
    dps, a, e, pi, mu, xa = _stacked_parts(data, param)
    n, k = dps.shape
    out = np.zeros((n, 2 + k, 2 + k))
    out[:, :2, :2] = -(mu * (1.0 - mu) / pi)[:, None, None] * xa[:, :, None] * xa[:, None, :]
    # d(1/pi)/d eta = -(2a - 1) e (1 - e) / pi^2 * dps
    dinv = -(2.0 * a - 1.0) * e * (1.0 - e) / pi**2
    out[:, :2, 2:] = ((data.y - mu) * dinv)[:, None, None] * xa[:, :, None] * dps[:, None, :]
    out[:, 2:, 2:] = -(e * (1.0 - e))[:, None, None] * dps[:, :, None] * dps[:, None, :]
    return out


def _stacked_wjac(data, param, w):
    dps, a, e, pi, mu, xa = _stacked_parts(data, param)
    k = dps.shape[1]
    out = np.zeros((2 + k, 2 + k))
    out[:2, :2] = -(xa * (w * mu * (1.0 - mu) / pi)[:, None]).T @ xa
    dinv = -(2.0 * a - 1.0) * e * (1.0 - e) / pi**2
    out[:2, 2:] = (xa * (w * (data.y - mu) * dinv)[:, None]).T @ dps
    out[2:, 2:] = -(dps * (w * e * (1.0 - e))[:, None]).T @ dps
    return out


def stacked_spec(data: Dataset) -> EstimatingFunctionSpec:
    """Stacked estimating function over ``(beta0, beta1, eta)``."""
    k = 1 + data.p_x + data.p_z
    return EstimatingFunctionSpec(
        dim_param=2 + k,
        dim_value=2 + k,
        eval=_stacked_eval,
        jac=_stacked_jac,
        wjac=_stacked_wjac,
        name="stacked IPTW",
        param_bound=SEPARATION_BOUND,
        divergence_error=Separation,
    )


def external_score_spec(data: Dataset) -> EstimatingFunctionSpec:
    return logistic_score_spec(external_design, 2 + data.p_x + data.p_z, name="external score")


def _check_propensity(data: Dataset, eta):
    e = expit(ps_design(data) @ eta)
    if np.min(e) < PS_BOUND or np.max(e) > 1.0 - PS_BOUND:
        raise ExtremePropensity(f"fitted propensity scores span [{np.min(e):.3g}, {np.max(e):.3g}]")


def _two_stage_start(data: Dataset):
    _require_exposure(data)
    n1 = int(data.a.sum())
    if n1 == 0 or n1 == data.n:
        raise Unidentified("exposure is constant; the causal log-odds ratio is not identified")
    with stage("propensity_fit"):
        eta = fit_logistic(ps_design(data), data.a).beta
    _check_propensity(data, eta)
    e = expit(ps_design(data) @ eta)
    ipw = np.where(data.a == 1, 1.0 / e, 1.0 / (1.0 - e))
    with stage("msm_fit"):
        beta = fit_logistic(np.column_stack([np.ones(data.n), data.a]), data.y, ipw / ipw.sum()).beta
    return np.concatenate([beta, eta])


def fit_iptw(data: Dataset) -> CausalFit:
    """Classic IPTW estimate of the MSM, solved jointly with the propensity model."""
    init = _two_stage_start(data)
    g = stacked_spec(data)
    with stage("stacked_solve"):
        param, _, _ = solve_estimating_equation(g, data, uniform_weights(data.n), init)
    _check_propensity(data, param[2:])
    return CausalFit(beta_msm=param[:2], gamma=param[2:], weights_el=None, converged=True)


def fit_integrated_iptw(data: Dataset, summaries: ExternalSummary | Sequence[ExternalSummary],
                        init=None) -> CausalFit:
    """IPTW estimate with EL weights carrying the external regression summaries."""
    if isinstance(summaries, ExternalSummary):
        summaries = [summaries]
    if init is None:
        init = fit_iptw(data)
        init = np.concatenate([init.beta_msm, init.gamma])
    fit = fit_integrated(data, summaries, external_score_spec(data), stacked_spec(data), init)
    _check_propensity(data, fit.beta[2:])
    return CausalFit(
        beta_msm=fit.beta[:2],
        gamma=fit.beta[2:],
        weights_el=fit.weights,
        converged=True,
        theta_meta=fit.theta_meta.theta_meta,
    )
