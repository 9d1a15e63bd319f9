"""Starting configuration: moving-window local fits, hyper-GP fits, kriging to knots."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize, minimize_scalar

from .dense import LOG_2PI
from .errors import InvalidArgument, NumericFailure
from .fields import (BASE_YEAR, COVARIANCE_FIELDS, FIELD_NAMES, LINKS, Hyperparams, KnotGrid,
                     ParameterFieldSet, effective_range_gp, link_inverse, theta_from_effective_range)
from .geometry import Location, as_latlon, circular_lon_distance, pairwise_cyl_distance
from .kernels import ConvolutionMode, PointParams

KRIGING_JITTER = 1e-6
# window fits whose effective range exceeds this multiple of the window are
# treated as unidentified and excluded downstream
MAX_RANGE_WINDOWS = 3.0
MIN_NUGGET_RATIO = 1e-4


@dataclass
class WindowEstimate:
    center: Location
    theta_lat: float = float("nan")
    theta_lon: float = float("nan")
    phi: float = float("nan")
    sigma2: float = float("nan")
    mu: float = float("nan")
    beta: float = float("nan")
    n_obs_in_window: int = 0
    converged: bool = False
    loglik: float = float("nan")
    note: str = ""

    def field_value(self, name):
        return {"phi": self.phi, "theta_lat": self.theta_lat, "theta_lon": self.theta_lon,
                "nugget_ratio": self.sigma2 / self.phi if self.phi > 0 else float("nan"),
                "mu2007": self.mu, "beta": self.beta}[name]


# ---------------------------------------------------------------------------
# local stationary likelihood


def _stationary_cov(latlon, years, theta_lat, theta_lon, phi, sigma2, mode):
    p = PointParams(latlon, phi, theta_lat, theta_lon, sigma2, mode)
    C = p.cov_matrix()
    C[years[:, None] != years[None, :]] = 0.0
    return C


def profiled_loglik(logpar, latlon, years, values, mode=ConvolutionMode.GAUSSIAN_APPROX):
    """Stationary log-likelihood with mu and beta profiled out by GLS.

    ``logpar`` is (log theta_lat, log theta_lon, log phi, log sigma2).
    Returns (loglik, mu_hat, beta_hat).
    """
    tl, tn, ph, s2 = np.exp(np.asarray(logpar, float))
    C = _stationary_cov(latlon, years, tl, tn, ph, s2, mode)
    try:
        L = cholesky(C, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, np.nan, np.nan
    dt = years - BASE_YEAR
    X = np.column_stack([np.ones(len(values)), dt]) if np.ptp(dt) > 0 else np.ones((len(values), 1))
    WX = solve_triangular(L, X, lower=True)
    wy = solve_triangular(L, values, lower=True)
    coef, *_ = np.linalg.lstsq(WX, wy, rcond=None)
    r = wy - WX @ coef
    ll = -0.5 * r @ r - np.sum(np.log(np.diag(L))) - 0.5 * len(values) * LOG_2PI
    beta = float(coef[1]) if len(coef) > 1 else 0.0
    return float(ll), float(coef[0]), beta


def _window_starts(latlon, values, window_deg):
    v = float(np.var(values)) if len(values) > 1 else 1.0
    v = max(v, 1e-12)
    starts = []
    for gamma, frac in ((window_deg / 4, 0.2), (window_deg / 2, 0.1), (window_deg, 0.02)):
        th = math.log(theta_from_effective_range(gamma))
        starts.append(np.array([th, th, math.log(v * (1 - frac)), math.log(v * frac)]))
    return starts


def fit_window(latlon, years, values, window_deg=20.0, n_starts=3, mode=ConvolutionMode.GAUSSIAN_APPROX,
               maxiter=600):
    """Multi-start Nelder-Mead on the four log covariance parameters."""
    latlon = as_latlon(latlon)
    years = np.asarray(years, int)
    values = np.asarray(values, float)
    bound = 25.0

    def obj(x):
        if np.any(np.abs(x) > bound):
            return 1e300
        ll, _, _ = profiled_loglik(x, latlon, years, values, mode)
        return -ll if np.isfinite(ll) else 1e300

    best = None
    for x0 in _window_starts(latlon, values, window_deg)[:n_starts]:
        res = minimize(obj, x0, method="Nelder-Mead",
                       options={"maxiter": maxiter, "xatol": 1e-4, "fatol": 1e-6})
        if best is None or res.fun < best.fun:
            best = res
    return best


def _in_window(latlon, center, half):
    return (np.abs(latlon[:, 0] - center[0]) <= half) & (circular_lon_distance(latlon[:, 1], center[1]) <= half)


def window_centers(grid_deg=6.0, lat_range=(-90.0, 90.0), lon_range=(-180.0, 180.0)):
    lats = np.arange(lat_range[0] + grid_deg / 2, lat_range[1], grid_deg)
    lons = np.arange(lon_range[0] + grid_deg / 2, lon_range[1], grid_deg)
    return np.array([(a, o) for a in lats for o in lons], dtype=float)


def moving_window_mle(obs, window_deg=20.0, grid_deg=6.0, min_obs=10, lat_range=(-90.0, 90.0),
                      lon_range=(-180.0, 180.0), mode=ConvolutionMode.GAUSSIAN_APPROX, n_starts=3,
                      centers=None):
    """Local stationary anisotropic MLE in a window around each grid point."""
    if min_obs < 10:
        raise InvalidArgument("min_obs must be at least 10")
    centers = window_centers(grid_deg, lat_range, lon_range) if centers is None else as_latlon(centers)
    out = []
    for c in centers:
        est = WindowEstimate(Location(*c))
        sel = np.flatnonzero(_in_window(obs.latlon, c, window_deg / 2)) if len(obs) else np.zeros(0, int)
        est.n_obs_in_window = int(sel.size)
        if sel.size < min_obs:
            est.note = "too few observations"
            out.append(est)
            continue
        ll, yr, v = obs.latlon[sel], obs.year[sel], obs.value[sel]
        res = fit_window(ll, yr, v, window_deg, n_starts, mode)
        if res is None or not np.isfinite(res.fun) or res.fun >= 1e299:
            est.note = "optimization failed"
            out.append(est)
            continue
        loglik, mu, beta = profiled_loglik(res.x, ll, yr, v, mode)
        tl, tn, ph, s2 = np.exp(res.x)
        est.theta_lat, est.theta_lon, est.phi, est.sigma2 = map(float, (tl, tn, ph, s2))
        est.mu, est.beta, est.loglik = mu, beta, loglik
        est.sigma2 = max(est.sigma2, MIN_NUGGET_RATIO * est.phi)
        est.converged = bool(res.success)
        if not res.success:
            est.note = str(res.message)
        elif max(effective_range_gp(tl), effective_range_gp(tn)) > MAX_RANGE_WINDOWS * window_deg:
            est.converged = False
            est.note = "range unidentified within window"
        out.append(est)
    return out


# ---------------------------------------------------------------------------
# hyper-GP fits


@dataclass
class HyperFit:
    hyper: Hyperparams
    boundary: bool = False      # variance estimate hit zero
    loglik: float = float("nan")


def _exp_gp_profile(D, vals_list, log_range, fixed_mu_list):
    """Profile loglik of exponential GPs sharing one range; means by GLS unless fixed."""
    R = np.exp(-D / math.exp(log_range))
    R[np.diag_indices_from(R)] += 1e-10
    try:
        cf = (cholesky(R, lower=True), True)
    except np.linalg.LinAlgError:
        return -np.inf, []
    logdet = 2 * np.sum(np.log(np.diag(cf[0])))
    n = len(D)
    one = np.ones(n)
    Ri1 = cho_solve(cf, one)
    total, parts = 0.0, []
    for v, mu_fixed in zip(vals_list, fixed_mu_list):
        mu = float(Ri1 @ v / (one @ Ri1)) if mu_fixed is None else float(mu_fixed)
        r = v - mu
        q = float(r @ cho_solve(cf, r))
        phi = q / n
        if phi <= 1e-300:
            parts.append((mu, 0.0))
            total += 0.0
            continue
        total += -0.5 * n * (math.log(phi) + 1 + math.log(2 * math.pi)) - 0.5 * logdet
        parts.append((mu, phi))
    return total, parts


def _fit_exp_gp(centers, vals_list, fixed_mu_list, links):
    D = pairwise_cyl_distance(centers)
    if np.allclose([np.ptp(v) for v in vals_list], 0.0):
        fits = [HyperFit(Hyperparams(float(v[0]) if m is None else float(m), 1e-12, 10.0, link),
                         boundary=True)
                for v, m, link in zip(vals_list, fixed_mu_list, links)]
        return fits
    pos = D[D > 0]
    lo, hi = math.log(max(pos.min() / 10, 1e-3)), math.log(pos.max() * 20)
    res = minimize_scalar(lambda t: -_exp_gp_profile(D, vals_list, t, fixed_mu_list)[0],
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
    ll, parts = _exp_gp_profile(D, vals_list, res.x, fixed_mu_list)
    rng = math.exp(res.x)
    fits = []
    for (mu, phi), link in zip(parts, links):
        fits.append(HyperFit(Hyperparams(mu, math.sqrt(max(phi, 1e-24)), rng, link), phi <= 1e-24, ll))
    return fits


def fit_hyperparameters(estimates, links=None, min_windows=10) -> dict:
    """Exponential-correlation hyper-GP MLE per field on link-scale window values.

    The beta hyper-mean is fixed at 0; mu2007 and beta share one range.
    Returns {field: HyperFit}.
    """
    links = dict(LINKS if links is None else links)
    good = [e for e in estimates if e.converged]
    if len(good) < min_windows:
        raise InvalidArgument(f"only {len(good)} converged windows; need {min_windows}")
    centers = np.array([e.center.as_tuple() for e in good])
    out = {}
    for name in COVARIANCE_FIELDS:
        v = link_inverse(links[name], np.array([e.field_value(name) for e in good]))
        out[name] = _fit_exp_gp(centers, [v], [None], [links[name]])[0]
    vm = link_inverse(links["mu2007"], np.array([e.mu for e in good]))
    vb = link_inverse(links["beta"], np.array([e.beta for e in good]))
    out["mu2007"], out["beta"] = _fit_exp_gp(centers, [vm, vb], [None, 0.0], [links["mu2007"], links["beta"]])
    return out


# ---------------------------------------------------------------------------
# kriging to knots


def _krige(centers, values, targets, hyper: Hyperparams):
    R = np.exp(-pairwise_cyl_distance(centers) / hyper.range_deg)
    R[np.diag_indices_from(R)] += KRIGING_JITTER
    try:
        cf = (cholesky(R, lower=True), True)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure("window kriging matrix is not positive definite") from exc
    cross = np.exp(-pairwise_cyl_distance(targets, centers) / hyper.range_deg)
    return hyper.mu + cross @ cho_solve(cf, values - hyper.mu)


def basis_from_knot_values(knot_values, hyper: Hyperparams, knots: KnotGrid):
    """Invert the knot map: b = L^{-1} (v - mu) / sd, with v on the link scale."""
    L = knots.chol(hyper.range_deg)
    return solve_triangular(L, np.asarray(knot_values, float) - hyper.mu, lower=True) / hyper.sd


def krige_initial_basis(estimates, hyper: dict, knots: KnotGrid, constrained=()) -> ParameterFieldSet:
    """Krige link-scale window values to the knots and whiten them into bases.

    A constrained (stationary) field gets the scalar that reproduces the
    median of its unconstrained kriged knot values.
    """
    good = [e for e in estimates if e.converged]
    if not good:
        raise InvalidArgument("no converged window estimates")
    centers = np.array([e.center.as_tuple() for e in good])
    basis = {}
    for name in FIELD_NAMES:
        h = hyper[name]
        v = link_inverse(h.link, np.array([e.field_value(name) for e in good]))
        kv = _krige(centers, v, knots.knots, h)
        if name in constrained:
            basis[name] = np.array([(np.median(kv) - h.mu) / h.sd])
        else:
            basis[name] = basis_from_knot_values(kv, h, knots)
    return ParameterFieldSet(knots, hyper, basis, frozenset(constrained))


@dataclass
class Initialization:
    estimates: list
    hyper_fits: dict
    fields: ParameterFieldSet
    notes: list = field(default_factory=list)


def initialize(obs, knots: KnotGrid, window_deg=20.0, grid_deg=6.0, min_obs=10, lat_range=(-90.0, 90.0),
               lon_range=(-180.0, 180.0), mode=ConvolutionMode.GAUSSIAN_APPROX, constrained=(),
               fit_hyper=True, fallback_hyper=None) -> Initialization:
    """Window MLEs, then (optionally) hyper fits, then kriging to knots.

    With ``fit_hyper=False`` the supplied ``fallback_hyper`` is used as is.
    """
    est = moving_window_mle(obs, window_deg, grid_deg, min_obs, lat_range, lon_range, mode)
    notes = []
    if fit_hyper:
        fits = fit_hyperparameters(est)
        hyper = {k: f.hyper for k, f in fits.items()}
        notes += [f"{k}: hyper variance at zero boundary" for k, f in fits.items() if f.boundary]
    else:
        if fallback_hyper is None:
            raise InvalidArgument("fallback_hyper required when fit_hyper is False")
        fits = {}
        hyper = dict(fallback_hyper)
    return Initialization(est, fits, krige_initial_basis(est, hyper, knots, constrained), notes)


def write_window_csv(path, estimates):
    cols = ["lat", "lon", "theta_lat", "theta_lon", "phi", "sigma2", "mu", "beta", "n_obs", "converged", "note"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for e in estimates:
            w.writerow(["%.17g" % e.center.lat, "%.17g" % e.center.lon]
                       + ["%.17g" % x for x in (e.theta_lat, e.theta_lon, e.phi, e.sigma2, e.mu, e.beta)]
                       + [e.n_obs_in_window, int(e.converged), e.note])
