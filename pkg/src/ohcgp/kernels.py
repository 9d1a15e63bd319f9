"""Kernel-convolution correlations on the lat/lon cylinder.

The latitude dimension uses the Euclidean closed form; the longitude
dimension uses either the exact circular convolution (two truncated
Gaussian integrals) or its Gaussian approximation. Each one-dimensional
factor is scaled so that a point correlates with itself at exactly one.

Convention: kernels are exp(-(u - x)^2 / theta), so with constant theta
the normalized factor reduces to exp(-delta^2 / (2 theta)).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, log_ndtr

from .errors import InvalidArgument
from .geometry import as_latlon, chord_distance_deg, circular_lon_distance

DEG2RAD = np.pi / 180.0
_LOG_SQRT_PI = 0.5 * np.log(np.pi)


class ConvolutionMode(str, enum.Enum):
    EXACT_CIRCULAR = "exact_circular"
    GAUSSIAN_APPROX = "gaussian_approx"
    CHORDAL_ISOTROPIC = "chordal_isotropic"


def _check_theta(*thetas):
    for t in thetas:
        t = np.asarray(t, dtype=float)
        if np.any(~np.isfinite(t)) or np.any(t <= 0):
            raise InvalidArgument("theta must be positive and finite")


def _log_interval_prob(za, zb):
    """log(Phi(zb) - Phi(za)) for za <= zb, stable in both tails."""
    za, zb = np.broadcast_arrays(np.asarray(za, float), np.asarray(zb, float))
    upper = za > 0
    # upper tail: Phi(zb) - Phi(za) = Q(za) - Q(zb) = Phi(-za) - Phi(-zb)
    hi = np.where(upper, -za, zb)
    lo = np.where(upper, -zb, za)
    lhi = log_ndtr(hi)
    llo = log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = np.exp(llo - lhi)
        out = lhi + np.log1p(-diff)
    return np.where(zb > za, out, -np.inf)


def log_gaussian_convolution(a, b, x, y, theta_x, theta_y):
    """Log of the truncated Gaussian convolution integral (see gaussian_convolution)."""
    _check_theta(theta_x, theta_y)
    x, y = np.asarray(x, float), np.asarray(y, float)
    tx, ty = np.asarray(theta_x, float), np.asarray(theta_y, float)
    tsum = tx + ty
    txy = tx * ty / tsum
    # precision-weighted centre: each point is weighted by the other's scale
    m = (x * ty + y * tx) / tsum
    s = np.sqrt(txy / 2.0)  # sd of the normal whose density matches exp(-(u-m)^2/txy)
    with np.errstate(invalid="ignore"):
        za = (np.asarray(a, float) - m) / s
        zb = (np.asarray(b, float) - m) / s
    logp = _log_interval_prob(za, zb)
    return _LOG_SQRT_PI + 0.5 * np.log(txy) - (y - x) ** 2 / tsum + logp


def gaussian_convolution(a, b, x, y, theta_x, theta_y):
    """Integral over [a, b] of exp(-(u-x)^2/theta_x - (u-y)^2/theta_y) du.

    Computed by completing the square and evaluating the normal CDF
    difference in log space; infinite limits are allowed.
    """
    out = np.exp(log_gaussian_convolution(a, b, x, y, theta_x, theta_y))
    return float(out) if np.ndim(out) == 0 else out


def euclidean_convolution(x, y, theta_x, theta_y):
    _check_theta(theta_x, theta_y)
    tx, ty = np.asarray(theta_x, float), np.asarray(theta_y, float)
    tsum = tx + ty
    d = np.asarray(x, float) - np.asarray(y, float)
    out = np.sqrt(np.pi * tx * ty / tsum) * np.exp(-(d**2) / tsum)
    return float(out) if np.ndim(out) == 0 else out


def _gc_rad(x, y):
    d = np.mod(np.abs(np.asarray(x, float) - np.asarray(y, float)), 2 * np.pi)
    return np.minimum(d, 2 * np.pi - d)


def circular_convolution_exact(x, y, theta_x, theta_y):
    """Convolution of two wrapped-distance Gaussian kernels over u in [-pi, pi].

    Angles in radians. Rotates x to 0 and y to their circular distance, then
    splits the integral where the distance to y wraps around.
    """
    _check_theta(theta_x, theta_y)
    yp = _gc_rad(x, y)
    first = log_gaussian_convolution(-np.pi, yp - np.pi, 0.0, yp - 2 * np.pi, theta_x, theta_y)
    second = log_gaussian_convolution(yp - np.pi, np.pi, 0.0, yp, theta_x, theta_y)
    out = np.exp(np.logaddexp(first, second))
    return float(out) if np.ndim(out) == 0 else out


def circular_convolution_gaussian(x, y, theta_x, theta_y):
    """Euclidean closed form evaluated at the wraparound distance (radians)."""
    _check_theta(theta_x, theta_y)
    tx, ty = np.asarray(theta_x, float), np.asarray(theta_y, float)
    tsum = tx + ty
    d = _gc_rad(x, y)
    out = np.sqrt(np.pi * tx * ty / tsum) * np.exp(-(d**2) / tsum)
    return float(out) if np.ndim(out) == 0 else out


def paciorek_scale(theta_x, theta_y):
    """sqrt(2) / (theta_x^(1/4) theta_y^(1/4) sqrt(pi))."""
    return np.sqrt(2.0) / ((np.asarray(theta_x) * np.asarray(theta_y)) ** 0.25 * np.sqrt(np.pi))


# ---------------------------------------------------------------------------
# vectorized, normalized one-dimensional factors


def _euclid_factor(delta, tx, ty):
    tsum = tx + ty
    return np.sqrt(2.0 * np.sqrt(tx * ty) / tsum) * np.exp(-(delta**2) / tsum)


def _circular_exact_factor(lon_x, lon_y, tx_deg, ty_deg):
    tx = tx_deg * DEG2RAD**2
    ty = ty_deg * DEG2RAD**2
    raw = circular_convolution_exact(lon_x * DEG2RAD, lon_y * DEG2RAD, tx, ty)
    # self-convolution on the circle is erf(pi sqrt(2/theta)) after the Paciorek
    # scale; dividing it out makes the diagonal exactly one for any theta.
    self_x = erf(np.pi * np.sqrt(2.0 / tx))
    self_y = erf(np.pi * np.sqrt(2.0 / ty))
    return raw * paciorek_scale(tx, ty) / np.sqrt(self_x * self_y)


def correlation_pairs(lat_x, lon_x, tlat_x, tlon_x, lat_y, lon_y, tlat_y, tlon_y,
                      mode=ConvolutionMode.GAUSSIAN_APPROX):
    """Normalized non-stationary correlation, broadcasting over all inputs.

    Longitudes and length scales are in degrees / degrees squared.
    """
    mode = ConvolutionMode(mode)
    lat_x, lat_y = np.asarray(lat_x, float), np.asarray(lat_y, float)
    tlat_x, tlat_y = np.asarray(tlat_x, float), np.asarray(tlat_y, float)
    if mode is ConvolutionMode.CHORDAL_ISOTROPIC:
        ax = np.stack(np.broadcast_arrays(lat_x, np.asarray(lon_x, float)), axis=-1)
        ay = np.stack(np.broadcast_arrays(lat_y, np.asarray(lon_y, float)), axis=-1)
        chord = chord_distance_deg(ax, ay)
        tsum = tlat_x + tlat_y
        return (2.0 * np.sqrt(tlat_x * tlat_y) / tsum) ** 1.5 * np.exp(-(chord**2) / tsum)
    tlon_x, tlon_y = np.asarray(tlon_x, float), np.asarray(tlon_y, float)
    lat_part = _euclid_factor(lat_x - lat_y, tlat_x, tlat_y)
    if mode is ConvolutionMode.GAUSSIAN_APPROX:
        dlon = circular_lon_distance(lon_x, lon_y)
        lon_part = _euclid_factor(dlon, tlon_x, tlon_y)
    else:
        lon_part = _circular_exact_factor(np.asarray(lon_x, float), np.asarray(lon_y, float),
                                          tlon_x, tlon_y)
    return lat_part * lon_part


@dataclass(frozen=True)
class LocalKernelParams:
    theta_lat: float
    theta_lon: float
    phi: float
    sigma2: float = 0.0

    def __post_init__(self):
        vals = (self.theta_lat, self.theta_lon, self.phi, self.sigma2)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidArgument("kernel parameters must be finite")
        if self.theta_lat <= 0 or self.theta_lon <= 0:
            raise InvalidArgument("length scales must be positive")
        if self.phi < 0 or self.sigma2 < 0:
            raise InvalidArgument("variances must be nonnegative")


def nonstationary_correlation(x, y, px: LocalKernelParams, py: LocalKernelParams,
                              mode=ConvolutionMode.GAUSSIAN_APPROX) -> float:
    return float(correlation_pairs(x.lat, x.lon, px.theta_lat, px.theta_lon,
                                   y.lat, y.lon, py.theta_lat, py.theta_lon, mode))


@dataclass
class PointParams:
    """Covariance-relevant parameter values at a set of points.

    ``sigma2`` is the nugget variance; it only ever enters on the diagonal.
    """

    latlon: np.ndarray
    phi: np.ndarray
    theta_lat: np.ndarray
    theta_lon: np.ndarray
    sigma2: np.ndarray
    mode: ConvolutionMode = ConvolutionMode.GAUSSIAN_APPROX

    def __post_init__(self):
        self.latlon = as_latlon(self.latlon)
        n = len(self.latlon)
        for name in ("phi", "theta_lat", "theta_lon", "sigma2"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), float), (n,)).copy()
            if not np.all(np.isfinite(arr)):
                raise InvalidArgument(f"non-finite {name}")
            setattr(self, name, arr)
        if np.any(self.theta_lat <= 0) or np.any(self.theta_lon <= 0):
            raise InvalidArgument("length scales must be positive")
        if np.any(self.phi < 0) or np.any(self.sigma2 < 0):
            raise InvalidArgument("variances must be nonnegative")
        self.mode = ConvolutionMode(self.mode)

    def __len__(self):
        return len(self.latlon)

    def subset(self, idx) -> "PointParams":
        idx = np.asarray(idx, dtype=int)
        return PointParams(self.latlon[idx], self.phi[idx], self.theta_lat[idx],
                           self.theta_lon[idx], self.sigma2[idx], self.mode)

    def concat(self, other: "PointParams") -> "PointParams":
        return PointParams(np.vstack([self.latlon, other.latlon]),
                           np.concatenate([self.phi, other.phi]),
                           np.concatenate([self.theta_lat, other.theta_lat]),
                           np.concatenate([self.theta_lon, other.theta_lon]),
                           np.concatenate([self.sigma2, other.sigma2]), self.mode)

    def cov_pairs(self, i, j, include_nugget=True) -> np.ndarray:
        """Covariance between points i and j (broadcast index arrays)."""
        i = np.asarray(i, dtype=int)
        j = np.asarray(j, dtype=int)
        ll = self.latlon
        corr = correlation_pairs(ll[i, 0], ll[i, 1], self.theta_lat[i], self.theta_lon[i],
                                 ll[j, 0], ll[j, 1], self.theta_lat[j], self.theta_lon[j],
                                 self.mode)
        cov = np.sqrt(self.phi[i] * self.phi[j]) * corr
        if include_nugget:
            cov = cov + np.where(i == j, self.sigma2[i], 0.0)
        return cov

    def cov_matrix(self, rows=None, cols=None, include_nugget=True) -> np.ndarray:
        n = len(self)
        rows = np.arange(n) if rows is None else np.asarray(rows, dtype=int)
        cols = rows if cols is None else np.asarray(cols, dtype=int)
        return self.cov_pairs(rows[:, None], cols[None, :], include_nugget)


def covariance_matrix(locs, params, mode=ConvolutionMode.GAUSSIAN_APPROX,
                      include_nugget=True, years=None) -> np.ndarray:
    """Dense covariance among ``locs``.

    ``params`` is a PointParams or a mapping with per-point arrays ``phi``,
    ``theta_lat``, ``theta_lon`` and ``sigma2``. When ``years`` is given,
    entries between different years are zero.
    """
    latlon = as_latlon(locs)
    if isinstance(params, PointParams):
        pp = params
        if len(pp) != len(latlon):
            raise InvalidArgument("parameter/location length mismatch")
        pp = PointParams(latlon, pp.phi, pp.theta_lat, pp.theta_lon, pp.sigma2, mode)
    else:
        arrays = {k: np.asarray(params[k], float) for k in ("phi", "theta_lat", "theta_lon")}
        sigma2 = np.asarray(params.get("sigma2", 0.0), float)
        for k, v in arrays.items():
            if v.ndim and len(v) != len(latlon):
                raise InvalidArgument(f"{k} has length {len(v)}, expected {len(latlon)}")
        pp = PointParams(latlon, arrays["phi"], arrays["theta_lat"], arrays["theta_lon"],
                         sigma2, mode)
    cov = pp.cov_matrix(include_nugget=include_nugget)
    if years is not None:
        years = np.asarray(years)
        if len(years) != len(latlon):
            raise InvalidArgument("years/location length mismatch")
        cov = np.where(years[:, None] == years[None, :], cov, 0.0)
    return cov
