import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ohcgp.errors import InvalidArgument
from ohcgp.fields import (FIELD_NAMES, LN20, Hyperparams, KnotGrid, ParameterFieldSet, basis_log_prior,
                          constrain_fields, default_hyperparams, effective_range_gp, effective_range_prior,
                          evaluate_field, hyper_with_overrides, mean_at, prior_correlation,
                          prior_range_from_effective, theta_from_effective_range)
from ohcgp.geometry import Location, pairwise_cyl_distance


def small_grid():
    return KnotGrid.regular(20.0, 40.0, (-20.0, 20.0), (-40.0, 40.0))


def random_fields(seed=0, knots=None):
    knots = knots or small_grid()
    f = ParameterFieldSet.at_prior_mean(knots, default_hyperparams())
    rng = np.random.default_rng(seed)
    for name in FIELD_NAMES:
        f = f.with_basis(name, rng.standard_normal(len(knots)))
    return f


def test_prior_correlation_examples():
    x = Location(0, 0)
    assert prior_correlation(x, x, 5.0) == 1.0
    assert prior_correlation(x, Location(0, 5.0 * LN20), 5.0) == pytest.approx(0.05)
    assert prior_correlation(x, Location(3, 4), 5.0) == pytest.approx(math.exp(-1))


def test_evaluate_field_examples():
    knots = small_grid()
    t = np.array([[3.0, 7.0], [-11.0, 33.0]])
    h = Hyperparams(2.5, 1.3, 10.0, "identity")
    np.testing.assert_allclose(evaluate_field(h, np.zeros(len(knots)), knots, t), 2.5)
    h = Hyperparams(0.0, 1.3, 10.0, "exponential")
    np.testing.assert_allclose(evaluate_field(h, np.zeros(len(knots)), knots, t), 1.0)
    one = KnotGrid([[5.0, 5.0]])
    h = Hyperparams(2.0, 3.0, 10.0, "identity")
    assert evaluate_field(h, [0.7], one, [[5.0, 5.0]])[0] == pytest.approx(2.0 + 3.0 * 0.7)


def test_kriging_at_knots_is_the_cholesky_factor():
    knots = small_grid()
    A = knots.kriging_matrix(knots.knots, 7.0)
    np.testing.assert_allclose(A, knots.chol(7.0), atol=1e-12)


def test_basis_log_prior_examples():
    assert basis_log_prior([0.0]) == pytest.approx(-0.9189385332, abs=1e-9)
    assert basis_log_prior([0.0, 0.0]) == pytest.approx(-1.8378770664, abs=1e-9)
    assert basis_log_prior([1.0, 0.0]) == pytest.approx(basis_log_prior([0.0, 0.0]) - 0.5)


def test_effective_ranges():
    assert float(effective_range_gp(1.0)) == pytest.approx(2.4477, abs=1e-4)
    # root of exp(-d^2/2) = 0.05
    assert math.exp(-float(effective_range_gp(1.0)) ** 2 / 2) == pytest.approx(0.05, rel=1e-12)
    assert float(effective_range_prior(1.0)) == pytest.approx(2.9957, abs=1e-4)
    for g in (0.5, 12.0, 90.13):
        assert float(effective_range_gp(theta_from_effective_range(g))) == pytest.approx(g, rel=1e-12)
        assert float(effective_range_prior(prior_range_from_effective(g))) == pytest.approx(g, rel=1e-12)


def test_mean_at_examples():
    knots = KnotGrid([[0.0, 0.0]])
    h = default_hyperparams()
    h["mu2007"] = Hyperparams(10.0, 1.0, h["mu2007"].range_deg, "identity")
    h["beta"] = Hyperparams(1.0, 1.0, h["mu2007"].range_deg, "identity")
    f = ParameterFieldSet.at_prior_mean(knots, h)
    x = Location(0, 0)
    assert mean_at(f, x, 2007) == pytest.approx(10.0)
    assert mean_at(f, x, 2016) == pytest.approx(19.0)
    h["beta"] = Hyperparams(0.0, 1.0, h["mu2007"].range_deg, "identity")
    f0 = ParameterFieldSet.at_prior_mean(knots, h)
    assert mean_at(f0, x, 2007) == mean_at(f0, x, 2030)


@given(st.floats(-3, 3), st.integers(0, 10_000))
def test_evaluate_is_affine_in_b(alpha, seed):
    knots = small_grid()
    rng = np.random.default_rng(seed)
    b1, b2 = rng.standard_normal((2, len(knots)))
    h = Hyperparams(1.5, 2.0, 9.0, "identity")
    t = np.column_stack([rng.uniform(-20, 20, 7), rng.uniform(-40, 40, 7)])
    lhs = evaluate_field(h, alpha * b1 + b2, knots, t) - h.mu
    rhs = alpha * (evaluate_field(h, b1, knots, t) - h.mu) + (evaluate_field(h, b2, knots, t) - h.mu)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@given(st.lists(st.floats(-30, 30), min_size=6, max_size=6))
def test_exponential_link_positive(b):
    knots = small_grid()
    h = Hyperparams(-2.0, 3.0, 9.0, "exponential")
    t = np.array([[1.0, 2.0], [-19.0, 39.0]])
    assert np.all(evaluate_field(h, np.array(b[: len(knots)]), knots, t) > 0)


def test_prior_samples_reproduce_knot_covariance():
    knots = small_grid()
    h = Hyperparams(0.0, 1.7, 25.0, "identity")
    rng = np.random.default_rng(5)
    draws = np.array([evaluate_field(h, rng.standard_normal(len(knots)), knots, knots.knots)
                      for _ in range(10_000)])
    emp = np.cov(draws.T)
    want = h.sd**2 * np.exp(-pairwise_cyl_distance(knots.knots) / h.range_deg)
    np.testing.assert_allclose(emp, want, rtol=0.05, atol=0.05 * h.sd**2)


def test_fields_json_round_trip_is_bit_exact():
    f = random_fields(3)
    g = ParameterFieldSet.from_json(f.to_json())
    for k in FIELD_NAMES:
        assert g.basis[k].tobytes() == f.basis[k].tobytes()
        assert g.hyper[k] == f.hyper[k]
    assert g.knots.knots.tobytes() == f.knots.knots.tobytes()
    assert g.to_json() == f.to_json()


def test_field_set_validation():
    knots = small_grid()
    h = default_hyperparams()
    with pytest.raises(InvalidArgument):
        ParameterFieldSet(knots, h, {k: np.zeros(len(knots) + 1) for k in FIELD_NAMES})
    bad = dict(h)
    bad["beta"] = Hyperparams(0.0, 1.0, h["beta"].range_deg + 1, "identity")
    with pytest.raises(InvalidArgument):
        ParameterFieldSet.at_prior_mean(knots, bad)
    with pytest.raises(InvalidArgument):
        Hyperparams(0.0, -1.0, 1.0)
    with pytest.raises(InvalidArgument):
        KnotGrid([[0.0, 0.0], [0.0, 0.0]])
    with pytest.raises(InvalidArgument):
        hyper_with_overrides({"mu2007": {"range_deg": 3.0}})


def test_default_hyperparams_match_reported_medians():
    h = default_hyperparams()
    assert h["beta"].mu == 0.0
    assert math.exp(h["nugget_ratio"].mu) == pytest.approx(0.04)
    assert math.sqrt(math.exp(h["phi"].mu)) == pytest.approx(2.25)
    assert float(effective_range_gp(math.exp(h["theta_lat"].mu))) == pytest.approx(2.50)
    assert float(effective_range_prior(h["mu2007"].range_deg)) == pytest.approx(34.88)
    assert h["mu2007"].range_deg == h["beta"].range_deg


def test_constrained_field_is_constant_at_knot_median():
    f = random_fields(4)
    c = constrain_fields(f, ("theta_lon",))
    assert c.basis["theta_lon"].size == 1
    t = np.array([[0.0, 0.0], [15.0, -35.0], [-5.0, 12.0]])
    vals = c.evaluate("theta_lon", t)
    np.testing.assert_allclose(vals, vals[0], rtol=1e-15)
    # median on the link scale (log for theta_lon)
    want = math.exp(np.median(np.log(f.evaluate("theta_lon", f.knots.knots))))
    assert vals[0] == pytest.approx(want, rel=1e-12)
    np.testing.assert_array_equal(c.evaluate("phi", t), f.evaluate("phi", t))
