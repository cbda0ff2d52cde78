"""Two-step weighted estimator integrating external summary statistics.

Step 1 pools the internal reduced-model estimate with the external
summaries by GLS.  Step 2 computes empirical-likelihood weights from the
reduced-model estimating function evaluated at the pooled estimate.  The
target parameters then solve the weighted estimating equation
``sum_i p_i g(row_i; beta) = 0``.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from numpy.typing import NDArray

from .core import Dataset, EstimatingFunctionSpec, ExternalSummary, validate_summary
from .el import ELWeights, solve_multiplier
from .estimating import sandwich_covariance, solve_estimating_equation, uniform_weights
from .exceptions import (
    DimensionMismatch,
    ElfusionError,
    InputError,
    NumericalError,
    TooManyFailures,
)
from .meta import MetaEstimate, combine_with_summaries
from .parallel import map_ordered

__all__ = [
    "IntegrationWeights",
    "IntegratedFit",
    "integration_weights",
    "solve_weighted_ee",
    "fit_integrated",
    "bootstrap_draws",
    "bootstrap_cov",
]

log = logging.getLogger(__name__)

MAX_BOOTSTRAP_FAILURE = 0.05


@contextmanager
def stage(name: str, timing: dict | None = None):
    """Label errors raised inside the block with the pipeline stage ``name``."""
    t0 = time.perf_counter()
    try:
        yield
    except ElfusionError as exc:
        if exc.stage is None:
            exc.stage = name
        raise
    finally:
        if timing is not None:
            timing[name] = time.perf_counter() - t0


@dataclass(frozen=True)
class IntegrationWeights:
    """Output of steps 1 and 2: everything that does not depend on ``g``."""

    weights: ELWeights
    theta_meta: MetaEstimate
    theta_internal: NDArray[np.float64]
    cov_internal: NDArray[np.float64]
    timing: dict = field(default_factory=dict)


@dataclass(frozen=True)
class IntegratedFit:
    beta: NDArray[np.float64]
    weights: ELWeights
    theta_meta: MetaEstimate
    theta_internal: NDArray[np.float64]
    cov_internal: NDArray[np.float64]
    iterations: int
    residual_norm: float
    cov: NDArray[np.float64] | None = None
    timing: dict = field(default_factory=dict)


def integration_weights(
    data: Dataset,
    summaries: Sequence[ExternalSummary],
    psi: EstimatingFunctionSpec,
    reduced_init=None,
    adjusted: bool = False,
) -> IntegrationWeights:
    """Steps 1 and 2: pooled reduced-model estimate and EL weights."""
    if not summaries:
        raise InputError("at least one external summary is required")
    for k, s in enumerate(summaries):
        validate_summary(s)
        if s.q != psi.dim_param or psi.dim_value != psi.dim_param:
            raise DimensionMismatch(
                f"summary {k} has dimension {s.q}; psi maps {psi.dim_param} -> {psi.dim_value}"
            )
    timing: dict = {}
    with stage("internal_reduced_fit", timing):
        # start from zero: the internal fit must not depend on external values
        init = np.zeros(psi.dim_param) if reduced_init is None else reduced_init
        theta0, _, _ = solve_estimating_equation(psi, data, uniform_weights(data.n), init)
        cov0 = sandwich_covariance(psi, data, theta0)
    with stage("gls_combine", timing):
        meta = combine_with_summaries(theta0, cov0, summaries)
    with stage("solve_multiplier", timing):
        weights = solve_multiplier(psi.values(data, meta.theta_meta), adjusted=adjusted)
    return IntegrationWeights(weights, meta, theta0, cov0, timing)


def solve_weighted_ee(g: EstimatingFunctionSpec, data: Dataset, weights, init) -> NDArray[np.float64]:
    """Root of ``sum_i w_i g(row_i; .)`` by Newton's method from ``init``."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (data.n,) or np.any(w <= 0):
        raise InputError("weights must be a positive vector with one entry per row")
    if abs(w.sum() - 1.0) > 1e-8:
        raise InputError(f"weights must sum to 1, got {w.sum():.12g}")
    if g.dim_value != g.dim_param:
        raise DimensionMismatch("g must be square (dim_value == dim_param)")
    beta, _, _ = solve_estimating_equation(g, data, w, init)
    return beta


def fit_integrated(
    data: Dataset,
    summaries: Sequence[ExternalSummary],
    psi: EstimatingFunctionSpec,
    g: EstimatingFunctionSpec,
    init,
    reduced_init=None,
    weights: IntegrationWeights | None = None,
) -> IntegratedFit:
    """Run the full two-step pipeline and the weighted solve.

    ``weights`` may carry a previously computed :class:`IntegrationWeights`
    for the same data and summaries; they do not depend on ``g``.
    """
    t0 = time.perf_counter()
    iw = integration_weights(data, summaries, psi, reduced_init) if weights is None else weights
    timing = dict(iw.timing)
    with stage("solve_weighted_ee", timing):
        if g.dim_value != g.dim_param:
            raise DimensionMismatch("g must be square (dim_value == dim_param)")
        beta, iters, rnorm = solve_estimating_equation(g, data, iw.weights.p, init)
    timing["total"] = time.perf_counter() - t0
    return IntegratedFit(
        beta=beta,
        weights=iw.weights,
        theta_meta=iw.theta_meta,
        theta_internal=iw.theta_internal,
        cov_internal=iw.cov_internal,
        iterations=iters,
        residual_norm=rnorm,
        timing=timing,
    )


def _bootstrap_stream(seed: int, b: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(b,))))


def _bootstrap_one(b, data, summaries, psi, g, init, seed):
    rng = _bootstrap_stream(seed, b)
    idx = rng.integers(0, data.n, size=data.n)
    perturbed = [
        ExternalSummary(rng.multivariate_normal(s.theta_hat, s.cov, method="cholesky"), s.v_hat, s.n2)
        for s in summaries
    ]
    try:
        return fit_integrated(data.take(idx), perturbed, psi, g, init).beta
    except NumericalError as exc:
        log.debug("bootstrap replicate %d failed: %s", b, exc)
        return None


def bootstrap_draws(data, summaries, psi, g, init, B: int, seed: int, threads: int | None = 1):
    """Bootstrap replicates of the integrated estimate.

    Internal rows are resampled with replacement and every external
    estimate is redrawn from ``N(theta_hat_k, v_hat_k / n_k)``.  Returns
    ``(draws, failures)`` where failed replicates are dropped.
    """
    if B < 100:
        raise InputError("bootstrap needs B >= 100")
    fn = partial(_bootstrap_one, data=data, summaries=list(summaries), psi=psi, g=g,
                 init=np.asarray(init, dtype=float), seed=int(seed))
    out = map_ordered(fn, range(B), threads=threads)
    draws = [d for d in out if d is not None]
    failures = B - len(draws)
    if failures:
        log.warning("bootstrap: dropped %d of %d failed replicates", failures, B)
    if failures > MAX_BOOTSTRAP_FAILURE * B:
        raise TooManyFailures(f"bootstrap: {failures} of {B} replicates failed")
    return np.array(draws), failures


def bootstrap_cov(data, summaries, psi, g, init, B: int, seed: int, threads: int | None = 1):
    """Bootstrap covariance matrix of the integrated estimate."""
    draws, _ = bootstrap_draws(data, summaries, psi, g, init, B, seed, threads)
    return np.atleast_2d(np.cov(draws, rowvar=False))
