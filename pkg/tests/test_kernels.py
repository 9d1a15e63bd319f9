import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import cholesky

from oracles import circle_convolution, line_convolution
from ohcgp.errors import InvalidArgument
from ohcgp.geometry import Location
from ohcgp.kernels import (ConvolutionMode, LocalKernelParams, PointParams, circular_convolution_exact,
                           circular_convolution_gaussian, correlation_pairs, covariance_matrix,
                           euclidean_convolution, gaussian_convolution, nonstationary_correlation)

thetas = st.floats(1e-3, 2.0)
angles = st.floats(-math.pi, math.pi)
MODES = list(ConvolutionMode)


def test_gaussian_convolution_examples():
    inf = np.inf
    assert gaussian_convolution(-inf, inf, 0, 0, 1, 1) == pytest.approx(1.2533141373155, rel=1e-12)
    assert gaussian_convolution(0, 0, 0, 0, 1, 1) == 0
    assert gaussian_convolution(-inf, inf, 0, 2, 1, 1) == pytest.approx(line_convolution(-inf, inf, 0, 2, 1, 1),
                                                                           rel=1e-10)
    with pytest.raises(InvalidArgument):
        gaussian_convolution(0, 1, 0, 0, 0, 1)


@given(st.floats(-3, 3), st.floats(0, 3), st.floats(-2, 2), st.floats(-2, 2), thetas, thetas)
def test_gaussian_convolution_matches_quadrature(a, width, x, y, tx, ty):
    b = a + width
    want = line_convolution(a, b, x, y, tx, ty)
    got = gaussian_convolution(a, b, x, y, tx, ty)
    if want < 1e-280:
        assert got < 1e-270
    else:
        assert got == pytest.approx(want, rel=1e-8)


def test_gaussian_convolution_far_tail_stable():
    # both limits deep in the upper tail; naive CDF differences cancel to zero
    want = line_convolution(10, 11, 0, 0, 1, 1)
    assert gaussian_convolution(10, 11, 0, 0, 1, 1) == pytest.approx(want, rel=1e-8)


def test_euclidean_convolution_examples():
    assert euclidean_convolution(0.3, 0.3, 0.5, 0.5) == pytest.approx(math.sqrt(math.pi * 0.5 / 2))
    assert euclidean_convolution(0, 10, 1, 1) == pytest.approx(math.sqrt(math.pi / 2) * math.exp(-50), rel=1e-12)
    assert euclidean_convolution(0.1, 0.7, 0.3, 1.1) == pytest.approx(
        gaussian_convolution(-np.inf, np.inf, 0.1, 0.7, 0.3, 1.1), rel=1e-12)


def test_circular_exact_examples():
    th = 0.01
    assert circular_convolution_exact(0.4, 0.4, th, th) == pytest.approx(math.sqrt(math.pi * th / 2), rel=1e-12)
    want = circle_convolution(0, math.pi, 0.7, 0.7)
    assert circular_convolution_exact(0, math.pi, 0.7, 0.7) == pytest.approx(want, rel=1e-10)
    assert circular_convolution_exact(0, math.pi, 0.7, 0.7) == pytest.approx(
        circular_convolution_exact(0, -math.pi, 0.7, 0.7), rel=1e-14)


@given(angles, angles, thetas, thetas)
def test_circular_exact_matches_quadrature(x, y, tx, ty):
    want = circle_convolution(x, y, tx, ty)
    got = circular_convolution_exact(x, y, tx, ty)
    if want < 1e-280:
        assert got < 1e-270
    else:
        assert got == pytest.approx(want, rel=1e-10)


@given(angles, angles, st.floats(-math.pi, math.pi), thetas, thetas)
def test_circular_exact_rotation_invariant(x, y, r, tx, ty):
    a = circular_convolution_exact(x, y, tx, ty)
    b = circular_convolution_exact(x + r, y + r, tx, ty)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-300)


def test_circular_gaussian_examples():
    assert circular_convolution_gaussian(1, 1, 0.3, 0.7) == pytest.approx(math.sqrt(math.pi * 0.21))
    th, d = 0.4, 1.1
    assert circular_convolution_gaussian(0.0, d, th, th) == pytest.approx(
        math.sqrt(math.pi * th / 2) * math.exp(-d * d / (2 * th)), rel=1e-13)
    # wraparound at the dateline
    assert circular_convolution_gaussian(3.1, -3.1, th, th) == pytest.approx(
        circular_convolution_gaussian(0.0, 2 * math.pi - 6.2, th, th), rel=1e-13)


@given(angles, angles, thetas, thetas)
def test_circular_gaussian_matches_its_quadrature(x, y, tx, ty):
    d = abs(x - y) % (2 * math.pi)
    d = min(d, 2 * math.pi - d)
    want = line_convolution(-np.inf, np.inf, 0.0, d, tx, ty)
    got = circular_convolution_gaussian(x, y, tx, ty)
    if want < 1e-280:
        assert got < 1e-270
    else:
        assert got == pytest.approx(want, rel=1e-8)


@pytest.mark.parametrize("d", [0.0, 0.5, 1.0, 2.0, 3.0, math.pi])
def test_small_theta_approximation_agrees_with_exact(d):
    th = 0.01
    exact = circular_convolution_exact(0.0, d, th, th)
    approx = circular_convolution_gaussian(0.0, d, th, th)
    peak = circular_convolution_exact(0.0, 0.0, th, th)
    if d < 3.0:
        assert approx == pytest.approx(exact, rel=1e-9)
    else:
        # near the antipode both are ~exp(-d^2/0.02) times the peak; see decisions ledger
        assert abs(approx - exact) <= 1e-9 * peak


@pytest.mark.parametrize("mode", MODES)
def test_self_correlation_is_one(mode):
    rng = np.random.default_rng(1)
    n = 30
    lat, lon = rng.uniform(-80, 80, n), rng.uniform(-180, 180, n)
    tl, tn = np.exp(rng.uniform(-3, 6, n)), np.exp(rng.uniform(-3, 8, n))
    c = correlation_pairs(lat, lon, tl, tn, lat, lon, tl, tn, mode)
    np.testing.assert_allclose(c, 1.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("mode", MODES)
def test_correlation_symmetric_and_bounded(mode):
    rng = np.random.default_rng(2)
    n = 200
    a = [rng.uniform(-80, 80, n), rng.uniform(-180, 180, n), np.exp(rng.uniform(-2, 5, n)),
         np.exp(rng.uniform(-2, 7, n))]
    b = [rng.uniform(-80, 80, n), rng.uniform(-180, 180, n), np.exp(rng.uniform(-2, 5, n)),
         np.exp(rng.uniform(-2, 7, n))]
    cab = correlation_pairs(*a, *b, mode)
    cba = correlation_pairs(*b, *a, mode)
    np.testing.assert_allclose(cab, cba, rtol=0, atol=1e-12)
    assert np.all(cab >= 0) and np.all(cab <= 1 + 1e-12)


@given(st.floats(-60, 60), st.floats(-179, 179), st.floats(-60, 60), st.floats(-179, 179),
       st.floats(0.1, 50), st.floats(0.1, 50))
def test_constant_fields_reduce_to_squared_exponential(la1, lo1, la2, lo2, tl, tn):
    got = correlation_pairs(la1, lo1, tl, tn, la2, lo2, tl, tn)
    dlon = abs(lo1 - lo2) % 360
    dlon = min(dlon, 360 - dlon)
    want = math.exp(-((la1 - la2) ** 2) / (2 * tl)) * math.exp(-dlon**2 / (2 * tn))
    assert got == pytest.approx(want, rel=1e-10, abs=1e-300)


def test_normalized_factor_matches_quadrature():
    # latitude factor: Paciorek-scaled line convolution of two differing kernels
    tx, ty, d = 3.0, 7.0, 2.5
    raw = line_convolution(-np.inf, np.inf, 0.0, d, tx, ty)
    scale = math.sqrt(2) / ((tx * ty) ** 0.25 * math.sqrt(math.pi))
    got = correlation_pairs(0.0, 0.0, tx, 1.0, d, 0.0, ty, 1.0)
    assert got == pytest.approx(raw * scale, rel=1e-10)


def test_exact_mode_matches_circle_quadrature():
    # longitudinal factor in exact mode: circle integral over self-integrals
    tx, ty = 400.0, 900.0
    r = math.pi / 180
    lx, ly = -170.0, 150.0
    raw = circle_convolution(lx * r, ly * r, tx * r * r, ty * r * r)
    sx = circle_convolution(0.0, 0.0, tx * r * r, tx * r * r)
    sy = circle_convolution(0.0, 0.0, ty * r * r, ty * r * r)
    got = correlation_pairs(0.0, lx, 1.0, tx, 0.0, ly, 1.0, ty, ConvolutionMode.EXACT_CIRCULAR)
    assert got == pytest.approx(raw / math.sqrt(sx * sy), rel=1e-10)


def test_nonstationary_correlation_api():
    p = LocalKernelParams(2.0, 5.0, 1.0, 0.1)
    x = Location(1.0, 2.0)
    assert nonstationary_correlation(x, x, p, p) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(InvalidArgument):
        LocalKernelParams(0.0, 1.0, 1.0)


def test_chordal_mode_ignores_theta_lon():
    c1 = correlation_pairs(0, 0, 4.0, 1.0, 3, 40, 9.0, 1.0, ConvolutionMode.CHORDAL_ISOTROPIC)
    c2 = correlation_pairs(0, 0, 4.0, 77.0, 3, 40, 9.0, 0.5, ConvolutionMode.CHORDAL_ISOTROPIC)
    assert c1 == c2


def test_covariance_matrix_examples():
    C = covariance_matrix([Location(0, 0)], {"phi": [4.0], "theta_lat": [1.0], "theta_lon": [1.0], "sigma2": [1.0]})
    np.testing.assert_array_equal(C, [[5.0]])
    C = covariance_matrix([Location(0, 0), Location(0, 0)],
                          {"phi": [1.0, 1.0], "theta_lat": [1.0, 1.0], "theta_lon": [1.0, 1.0]},
                          include_nugget=False)
    np.testing.assert_allclose(C, np.ones((2, 2)), atol=1e-15)
    with pytest.raises(InvalidArgument):
        covariance_matrix([Location(0, 0)], {"phi": [1.0, 2.0], "theta_lat": [1.0], "theta_lon": [1.0]})


def test_covariance_years_block_diagonal():
    ll = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]])
    pp = PointParams(ll, 1.0, 4.0, 4.0, 0.1)
    C = covariance_matrix(ll, pp, years=[2007, 2008, 2007])
    assert C[0, 1] == 0 and C[1, 2] == 0 and C[0, 2] > 0


@pytest.mark.parametrize("seed", range(100))
def test_covariance_with_nugget_is_positive_definite(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    ll = np.column_stack([rng.uniform(-60, 60, n), rng.uniform(-180, 180, n)])
    phi = np.exp(rng.uniform(-1, 2, n))
    pp = PointParams(ll, phi, np.exp(rng.uniform(-1, 4, n)), np.exp(rng.uniform(-1, 6, n)), 0.05 * phi,
                     MODES[seed % 3])
    C = pp.cov_matrix()
    np.testing.assert_allclose(C, C.T, atol=1e-14)
    cholesky(C, lower=True)


def test_point_params_validation():
    with pytest.raises(InvalidArgument):
        PointParams(np.zeros((2, 2)), 1.0, -1.0, 1.0, 0.0)
    with pytest.raises(InvalidArgument):
        PointParams(np.zeros((2, 2)), np.nan, 1.0, 1.0, 0.0)
