import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elfusion.core import ExternalSummary
from elfusion.exceptions import DimensionMismatch, InputError, NotPositiveDefinite
from elfusion.meta import combine_with_summaries, gls_combine, gls_objective

from oracles import quadratic_minimizer


def _spd(rng, k):
    a = rng.normal(size=(k, k))
    return a @ a.T + 0.5 * np.eye(k)


def _closed_form(estimates):
    precs = [np.linalg.inv(c) for _, c in estimates]
    v = np.linalg.inv(sum(precs))
    return v @ sum(p @ t for (t, _), p in zip(estimates, precs)), v


def test_identical_estimates():
    t, v = np.array([0.3, -1.0]), np.array([[2.0, 0.4], [0.4, 1.0]])
    m = gls_combine([(t, v), (t, v)])
    np.testing.assert_allclose(m.theta_meta, t, atol=1e-14)
    np.testing.assert_allclose(m.v_meta, v / 2, atol=1e-14)


@pytest.mark.parametrize("a,b,expect", [((0.0, 1.0), (2.0, 1.0), (1.0, 0.5)), ((0.0, 1.0), (4.0, 3.0), (1.0, 0.75))])
def test_scalar_examples(a, b, expect):
    m = gls_combine([(np.array([a[0]]), np.array([[a[1]]])), (np.array([b[0]]), np.array([[b[1]]]))])
    assert m.theta_meta[0] == pytest.approx(expect[0], abs=1e-14)
    assert m.v_meta[0, 0] == pytest.approx(expect[1], abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(2, 4))
def test_closed_form_and_minimizer(seed, k, sources):
    rng = np.random.default_rng(seed)
    est = [(rng.normal(size=k), _spd(rng, k)) for _ in range(sources)]
    m = gls_combine(est)
    theta, v = _closed_form(est)
    np.testing.assert_allclose(m.theta_meta, theta, atol=1e-10)
    np.testing.assert_allclose(m.v_meta, v, atol=1e-10)
    np.testing.assert_allclose(m.theta_meta, quadratic_minimizer(est, np.zeros(k)), atol=1e-8)


def test_permutation_invariance():
    rng = np.random.default_rng(0)
    est = [(rng.normal(size=3), _spd(rng, 3)) for _ in range(4)]
    ref = gls_combine(est).theta_meta
    for perm in itertools.permutations(range(4)):
        np.testing.assert_allclose(gls_combine([est[i] for i in perm]).theta_meta, ref, atol=1e-12)


def test_noninformative_source_ignored():
    rng = np.random.default_rng(1)
    est = [(rng.normal(size=2), _spd(rng, 2)) for _ in range(2)]
    ref = gls_combine(est).theta_meta
    extra = (rng.normal(size=2) * 10, _spd(rng, 2) * 1e12)
    np.testing.assert_allclose(gls_combine(est + [extra]).theta_meta, ref, atol=1e-9)


def test_objective_minimal_at_meta():
    rng = np.random.default_rng(2)
    est = [(rng.normal(size=3), _spd(rng, 3)) for _ in range(3)]
    m = gls_combine(est)
    best = gls_objective(m.theta_meta, est)
    assert all(best <= gls_objective(t, est) for t, _ in est)


def test_errors():
    with pytest.raises(InputError):
        gls_combine([(np.zeros(2), np.eye(2))])
    with pytest.raises(DimensionMismatch):
        gls_combine([(np.zeros(2), np.eye(2)), (np.zeros(3), np.eye(3))])
    with pytest.raises(NotPositiveDefinite):
        gls_combine([(np.zeros(2), np.eye(2)), (np.zeros(2), -np.eye(2))])


def test_combine_with_summaries_scaling():
    s = ExternalSummary(np.array([1.0]), np.array([[30.0]]), 10)
    m = combine_with_summaries(np.array([0.0]), np.array([[3.0]]), [s])
    assert m.theta_meta[0] == pytest.approx(0.5)
    assert m.sources == 2
