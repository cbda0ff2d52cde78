import numpy as np
import pytest

from elfusion.core import Dataset, EstimatingFunctionSpec, ExternalSummary
from elfusion.estimating import sandwich_covariance
from elfusion.exceptions import InputError, Separation, ZeroNotInHull
from elfusion.glm import fit_logistic, full_design, internal_reduced_fit, logistic_score_spec, reduced_design
from elfusion.integrator import (
    bootstrap_cov,
    bootstrap_draws,
    fit_integrated,
    integration_weights,
    solve_weighted_ee,
)
from elfusion.simulation import ScenarioConfig, external_summary_glm, gen_glm_scenario, replicate_stream, run_monte_carlo


@pytest.fixture(scope="module")
def scenario():
    internal = gen_glm_scenario(600, replicate_stream(21, 0, 0))
    external = gen_glm_scenario(3000, replicate_stream(21, 0, 1))
    psi = logistic_score_spec(reduced_design, 4)
    g = logistic_score_spec(full_design, 5)
    mle = fit_logistic(full_design(internal), internal.y).beta
    return internal, external_summary_glm(external), psi, g, mle


def test_noninformative_external_gives_mle(scenario):
    data, s, psi, g, mle = scenario
    fit = fit_integrated(data, [s.scaled(1e12)], psi, g, mle)
    np.testing.assert_allclose(fit.beta, mle, atol=1e-6)


def test_self_summary_gives_zero_multiplier(scenario):
    data, _, psi, g, mle = scenario
    theta0, cov0 = internal_reduced_fit(data)
    s = ExternalSummary(theta0, data.n * cov0, data.n)
    fit = fit_integrated(data, [s], psi, g, mle)
    np.testing.assert_allclose(fit.weights.rho, 0.0, atol=1e-8)
    np.testing.assert_allclose(fit.beta, mle, atol=1e-8)


def test_informative_external_moves_estimate(scenario):
    data, s, psi, g, mle = scenario
    fit = fit_integrated(data, [s], psi, g, mle)
    assert np.linalg.norm(fit.weights.rho) > 1e-3
    assert fit.weights.p.sum() == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(fit.weights.p @ psi.values(data, fit.theta_meta.theta_meta), 0.0, atol=1e-8)
    assert set(fit.timing) >= {"internal_reduced_fit", "gls_combine", "solve_multiplier", "solve_weighted_ee"}


def test_uniform_weighted_solve_equals_mle(scenario):
    data, _, _, g, mle = scenario
    beta = solve_weighted_ee(g, data, np.full(data.n, 1 / data.n), np.zeros(5))
    np.testing.assert_allclose(beta, mle, atol=1e-10)


def _ls_eval(data, b):
    d = full_design(data)
    return d * (data.y - d @ b)[:, None]


def _ls_jac(data, b):
    d = full_design(data)
    return -d[:, :, None] * d[:, None, :]


def test_linear_score_normal_equations():
    rng = np.random.default_rng(4)
    n = 200
    x = rng.normal(size=(n, 2))
    y = x @ [1.0, -2.0] + rng.normal(size=n)
    data = Dataset(y=y, x=x, z=rng.normal(size=(n, 1)), binary=False)
    spec = EstimatingFunctionSpec(dim_param=4, dim_value=4, eval=_ls_eval, jac=_ls_jac, name="least squares")
    w = rng.dirichlet(np.ones(n))
    beta = solve_weighted_ee(spec, data, w, np.zeros(4))
    d = full_design(data)
    oracle = np.linalg.solve(d.T @ (w[:, None] * d), d.T @ (w * y))
    np.testing.assert_allclose(beta, oracle, atol=1e-10)


def test_concentrated_weights_flag_separation():
    n = 20
    y = np.zeros(n)
    y[0] = 1.0
    data = Dataset(y=y, x=np.zeros((n, 0)))
    eps = 1e-14
    w = np.full(n, eps / (n - 1))
    w[0] = 1 - eps
    spec = logistic_score_spec(lambda d: np.ones((d.n, 1)), 1, name="intercept")
    with pytest.raises(Separation):
        solve_weighted_ee(spec, data, w, np.zeros(1))


def test_weight_validation(scenario):
    data, _, _, g, mle = scenario
    with pytest.raises(InputError):
        solve_weighted_ee(g, data, np.full(data.n, 2 / data.n), mle)
    w = np.full(data.n, 1 / data.n)
    w[0] = 0.0
    with pytest.raises(InputError):
        solve_weighted_ee(g, data, w, mle)


def test_weights_decoupled_from_g(scenario):
    data, s, psi, g, mle = scenario
    iw = integration_weights(data, [s], psi)
    g_reduced = logistic_score_spec(reduced_design, 4)
    a = fit_integrated(data, [s], psi, g, mle, weights=iw)
    b = fit_integrated(data, [s], psi, g_reduced, np.zeros(4), weights=iw)
    c = fit_integrated(data, [s], psi, g_reduced, np.zeros(4))
    assert a.weights is b.weights
    np.testing.assert_array_equal(c.weights.p, iw.weights.p)
    # reduced-model fit under the EL weights reproduces the pooled theta
    np.testing.assert_allclose(b.beta, iw.theta_meta.theta_meta, atol=1e-8)


def test_pipeline_deterministic(scenario):
    data, s, psi, g, mle = scenario
    a = fit_integrated(data, [s], psi, g, mle)
    b = fit_integrated(data, [s], psi, g, mle)
    np.testing.assert_array_equal(a.beta, b.beta)
    np.testing.assert_array_equal(a.weights.p, b.weights.p)


def test_multiple_sources(scenario):
    data, s, psi, g, mle = scenario
    other = external_summary_glm(gen_glm_scenario(1500, replicate_stream(22, 0, 1)))
    fit = fit_integrated(data, [s, other], psi, g, mle)
    assert fit.theta_meta.sources == 3
    one = fit_integrated(data, [s], psi, g, mle)
    assert not np.allclose(fit.beta, one.beta)


def test_bootstrap_seed_determinism_and_minimum(scenario):
    data, s, psi, g, mle = scenario
    a = bootstrap_cov(data, [s], psi, g, mle, B=100, seed=3)
    b = bootstrap_cov(data, [s], psi, g, mle, B=100, seed=3)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(InputError):
        bootstrap_cov(data, [s], psi, g, mle, B=50, seed=3)


@pytest.mark.slow
def test_bootstrap_sd_matches_monte_carlo(scenario):
    data, s, psi, g, mle = scenario
    cov = bootstrap_cov(data, [s], psi, g, mle, B=200, seed=1)
    table = run_monte_carlo(ScenarioConfig("glm", 600, 5.0, 300, 77, ("MLE", "IB_New")))
    mc = table.estimates["IB_New"].std(axis=0, ddof=1)
    np.testing.assert_allclose(np.sqrt(np.diag(cov)), mc, rtol=0.25)


def _mle_bootstrap_sd(data, B, seed):
    out = []
    for b in range(B):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(b,))))
        idx = rng.integers(0, data.n, size=data.n)
        sub = data.take(idx)
        out.append(fit_logistic(full_design(sub), sub.y).beta)
    return np.std(out, axis=0, ddof=1)


@pytest.mark.slow
def test_bootstrap_noninformative_matches_mle_bootstrap(scenario):
    data, s, psi, g, mle = scenario
    draws, fails = bootstrap_draws(data, [s.scaled(1e12)], psi, g, mle, B=200, seed=5)
    assert fails == 0
    np.testing.assert_allclose(draws.std(axis=0, ddof=1), _mle_bootstrap_sd(data, 200, 5), rtol=0.25)


def test_sandwich_matches_model_for_full_score(scenario):
    data, _, _, g, mle = scenario
    sand = sandwich_covariance(g, data, mle)
    model = fit_logistic(full_design(data), data.y).cov
    np.testing.assert_allclose(np.diag(sand), np.diag(model), rtol=0.3)


def _mean_eval(data, t):
    return (data.y - t[0])[:, None]


def _mean_jac(data, t):
    return -np.ones((data.n, 1, 1))


def test_hull_failure_is_labelled_with_stage():
    rng = np.random.default_rng(6)
    data = Dataset(y=rng.uniform(size=50), x=np.zeros((50, 0)), binary=False)
    psi = EstimatingFunctionSpec(dim_param=1, dim_value=1, eval=_mean_eval, jac=_mean_jac, name="mean")
    far = ExternalSummary(np.array([3.0]), np.array([[1e-4]]), 10_000)
    with pytest.raises(ZeroNotInHull) as exc:
        integration_weights(data, [far], psi)
    assert exc.value.stage == "solve_multiplier"
    assert str(exc.value).startswith("[solve_multiplier]")
