"""Desk-scale experiments shared by the acceptance tests and scripts/.

approximation_study: MLE bias of the Gaussian approximation to the circular
convolution on simulated circle data.
vecchia_m_study: Vecchia OHC accuracy against the dense path as m grows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import minimize_scalar

from .data_io import SimulationLayout, simulate_dataset
from .fields import LN20, KnotGrid, ParameterFieldSet, default_hyperparams, theta_from_effective_range
from .kernels import _circular_exact_factor, _euclid_factor
from .geometry import circular_lon_distance
from .ohc import areal_weights, ohc_posterior_dense, ohc_posterior_vecchia

# ---------------------------------------------------------------------------
# Gaussian vs exact circular convolution


def circle_correlation(lon, theta, exact: bool):
    """Correlation matrix on the circle (degrees) with per-point theta (deg^2)."""
    lon = np.asarray(lon, float)
    theta = np.broadcast_to(np.asarray(theta, float), lon.shape)
    X, Y = lon[:, None], lon[None, :]
    TX, TY = theta[:, None], theta[None, :]
    if exact:
        return _circular_exact_factor(X, Y, TX, TY)
    return _euclid_factor(circular_lon_distance(X, Y), TX, TY)


def _negloglik(y, lon, theta, nugget, exact):
    C = circle_correlation(lon, theta, exact)
    C[np.diag_indices_from(C)] += nugget
    try:
        L = cholesky(C, lower=True)
    except np.linalg.LinAlgError:
        return 1e300
    z = solve_triangular(L, y, lower=True)
    return 0.5 * z @ z + np.sum(np.log(np.diag(L)))


def theta_mle(y, lon, shape, nugget, exact, log_bounds):
    """MLE of the scalar theta in theta(x) = theta * shape(x)."""
    res = minimize_scalar(lambda t: _negloglik(y, lon, math.exp(t) * shape, nugget, exact),
                          bounds=log_bounds, method="bounded", options={"xatol": 1e-9})
    return math.exp(res.x)


@dataclass
class ApproxRow:
    effective_range: float
    structure: str
    theta_exact: float
    theta_approx: float

    @property
    def fractional_error(self):
        return (self.theta_approx - self.theta_exact) / self.theta_exact


def approximation_study(effective_ranges=(30.0, 45.0, 65.40, 80.0, 90.13), n_rep=100, n_points=100,
                        nugget=0.04, seed=0):
    """Average MLEs under exact and approximate correlations, per range and structure.

    Data are simulated from the exact convolution. Stationary: theta(x) = theta;
    non-stationary: theta(x) = theta (1 + cos(x) / 2).
    """
    ss = np.random.SeedSequence(seed)
    rows = []
    for gamma, child in zip(effective_ranges, ss.spawn(len(effective_ranges))):
        rng = np.random.default_rng(child)
        theta = float(theta_from_effective_range(gamma))
        lon = rng.uniform(-180.0, 180.0, n_points)
        shapes = {"stationary": np.ones(n_points), "nonstationary": 1.0 + 0.5 * np.cos(np.radians(lon))}
        bounds = (math.log(theta) - 1.5, math.log(theta) + 1.5)
        for name, shape in shapes.items():
            C = circle_correlation(lon, theta * shape, exact=True)
            C[np.diag_indices_from(C)] += nugget
            L = cholesky(C, lower=True)
            ex, ap = [], []
            for _ in range(n_rep):
                y = L @ rng.standard_normal(n_points)
                ex.append(theta_mle(y, lon, shape, nugget, True, bounds))
                ap.append(theta_mle(y, lon, shape, nugget, False, bounds))
            rows.append(ApproxRow(gamma, name, float(np.mean(ex)), float(np.mean(ap))))
    return rows


# ---------------------------------------------------------------------------
# Vecchia OHC accuracy versus m


@dataclass
class MStudyRow:
    m: int
    mu_error: float       # |mu_vecchia - mu_dense| / |mu_dense|
    sigma_error: float    # |sigma_vecchia - sigma_dense| / sigma_dense


def m_study_instance(n=500, seed=0, lat_range=(-30.0, 30.0), lon_range=(-90.0, 90.0), basis_scale=0.5,
                     theta_shift=1.0):
    """A fixed non-stationary synthetic instance: (fields, observations of one year)."""
    knots = KnotGrid.regular(15.0, 30.0, lat_range, lon_range)
    h = default_hyperparams()
    base = ParameterFieldSet.at_prior_mean(knots, h)
    rng = np.random.default_rng(seed)
    f = base
    for name in ("theta_lat", "theta_lon", "phi", "nugget_ratio"):
        f = f.with_basis(name, basis_scale * rng.standard_normal(len(knots)))
    # theta_shift > 1 lengthens the correlation of both range fields
    for name, shift in (("theta_lat", math.log(theta_shift)), ("theta_lon", math.log(theta_shift))):
        hh = f.hyper[name]
        f = ParameterFieldSet(f.knots, {**f.hyper, name: type(hh)(hh.mu + shift, hh.sd, hh.range_deg, hh.link)},
                              f.basis, f.constrained)
    obs, _ = simulate_dataset(f, SimulationLayout(n, (2010,), lat_range, lon_range), seed)
    return f, obs


def vecchia_m_study(ms=(10, 25, 50), n=500, seed=0, resolution_deg=5.0, basis_scale=0.5, theta_shift=1.0):
    f, obs = m_study_instance(n, seed, basis_scale=basis_scale, theta_shift=theta_shift)
    grid = areal_weights(resolution_deg, None, (-30.0, 30.0), (-90.0, 90.0))
    dense = ohc_posterior_dense(f, obs.latlon, obs.value, 2010, grid)
    scale = abs(dense.mu)
    rows = []
    for m in ms:
        v = ohc_posterior_vecchia(f, obs.latlon, obs.value, 2010, grid, m=m)
        rows.append(MStudyRow(m, abs(v.mu - dense.mu) / scale, abs(v.sigma - dense.sigma) / dense.sigma))
    return rows, dense


def effective_range_from_theta(theta):
    return math.sqrt(2.0 * theta * LN20)


# ---------------------------------------------------------------------------
# sampler recovery on simulated data

RECOVERY_LAT = (-20.0, 20.0)
RECOVERY_LON = (-40.0, 40.0)
SUMMARY_NAMES = ("theta_lat", "theta_lon", "phi", "nugget_ratio", "mu2007", "beta")


def recovery_instance(n_per_year=300, years=(2007, 2008, 2009), seed=0, lat_range=RECOVERY_LAT,
                      lon_range=RECOVERY_LON, knot_steps=(20.0, 40.0), basis_scale=0.5):
    """Smooth truth fields (prior mean plus basis_scale * N(0, I)) and simulated data."""
    knots = KnotGrid.regular(knot_steps[0], knot_steps[1], lat_range, lon_range)
    truth = ParameterFieldSet.at_prior_mean(knots, default_hyperparams())
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    for name in truth.basis:
        truth = truth.with_basis(name, basis_scale * rng.standard_normal(len(knots)))
    layout = SimulationLayout(n_per_year, tuple(years), lat_range, lon_range)
    obs, _ = simulate_dataset(truth, layout, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,))))
    return truth, obs


def field_summaries(fields, grid) -> dict:
    """Area-weighted domain averages of each field (sigma^2/phi for the nugget ratio)."""
    w = grid.weights / grid.weights.sum()
    return {name: float(w @ fields.evaluate(name, grid.latlon)) for name in SUMMARY_NAMES}


@dataclass
class RecoveryResult:
    truth: dict
    median: dict
    sd: dict
    acceptance: dict
    init: dict

    def z_scores(self) -> dict:
        return {k: (self.median[k] - self.truth[k]) / self.sd[k] for k in self.truth}


def sampler_recovery(n_iterations=5000, burn_in=2500, initial_proposal_sd=0.1, m=25, seed=0,
                     window_deg=20.0, grid_deg=8.0, summary_every=5, likelihood="vecchia"):
    """Simulate, initialize with the true hyperparameters, run one chain, summarize."""
    from .initialization import initialize
    from .sampler import SamplerConfig, prepare_data, run_chain

    truth, obs = recovery_instance(seed=seed)
    ini = initialize(obs, truth.knots, window_deg, grid_deg, 10, RECOVERY_LAT, RECOVERY_LON,
                     fit_hyper=False, fallback_hyper=truth.hyper)
    cfg = SamplerConfig(n_iterations=n_iterations, burn_in=burn_in, initial_proposal_sd=initial_proposal_sd,
                        m=m, likelihood=likelihood, seed=seed)
    data = prepare_data(obs, ini.fields, likelihood, m)
    chain = run_chain(cfg, ini.fields, data)
    grid = areal_weights(2.0, None, RECOVERY_LAT, RECOVERY_LON)
    keep = chain.retained(burn_in)[::summary_every]
    draws = [field_summaries(chain.fields_at(k), grid) for k in keep]
    med = {n: float(np.median([d[n] for d in draws])) for n in SUMMARY_NAMES}
    sd = {n: float(np.std([d[n] for d in draws], ddof=1)) for n in SUMMARY_NAMES}
    return RecoveryResult(field_summaries(truth, grid), med, sd, dict(chain.acceptance),
                          field_summaries(ini.fields, grid))


# ---------------------------------------------------------------------------
# credible-interval calibration

CALIB_LAT = (-10.0, 10.0)
CALIB_LON = (-20.0, 20.0)


@dataclass
class CalibrationResult:
    covered: np.ndarray     # (replicates,) bool
    truth: np.ndarray       # integrated latent field per replicate
    intervals: list         # (lo, hi) per replicate

    @property
    def coverage(self):
        return float(np.mean(self.covered))


def calibration_replicate(seed, n_obs=50, year=2007, n_iterations=200, ohc_every=4, level=0.95,
                          resolution_deg=5.0):
    """One replicate: truth basis drawn from the prior, obs and the grid drawn jointly.

    Because the truth is a prior draw, it is also an exact posterior draw given
    the data, so a chain started there is already stationary and its
    credible intervals cover at the nominal rate.
    """
    from .ohc import OhcEngine, ohc_intervals
    from .sampler import SamplerConfig, prepare_data, run_chain

    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_truth, s_data, s_chain, s_iv = ss.spawn(4)
    knots = KnotGrid.regular(10.0, 20.0, CALIB_LAT, CALIB_LON)
    truth = ParameterFieldSet.at_prior_mean(knots, default_hyperparams())
    g = np.random.default_rng(s_truth)
    for name in truth.basis:
        truth = truth.with_basis(name, g.standard_normal(len(knots)))
    grid = areal_weights(resolution_deg, None, CALIB_LAT, CALIB_LON)
    obs, sim = simulate_dataset(truth, SimulationLayout(n_obs, (year,), CALIB_LAT, CALIB_LON),
                                np.random.default_rng(s_data), extra_locations=grid.latlon)
    target = float(grid.weights @ sim.extra_latent[year])
    data = prepare_data(obs, truth, "dense")
    cfg = SamplerConfig(n_iterations=n_iterations, burn_in=n_iterations // 2, initial_proposal_sd=0.1,
                        likelihood="dense", ohc_every=ohc_every)
    engine = OhcEngine(data, grid, truth, method="dense")
    chain = run_chain(cfg, truth, data, ohc_fn=engine, rng=np.random.default_rng(s_chain))
    iv = ohc_intervals(chain, level, 100, np.random.default_rng(s_iv), burn_in=0)[year]["credible"]
    return target, iv


def calibration_study(n_replicates=200, seed=0, **kw) -> CalibrationResult:
    truths, ivs = [], []
    for child in np.random.SeedSequence(seed).spawn(n_replicates):
        t, iv = calibration_replicate(child, **kw)
        truths.append(t)
        ivs.append(iv)
    truths = np.array(truths)
    covered = np.array([lo <= t <= hi for t, (lo, hi) in zip(truths, ivs)])
    return CalibrationResult(covered, truths, ivs)


# ---------------------------------------------------------------------------
# cross-validation ranking on strongly non-stationary data

CV_LAT = (-20.0, 20.0)
CV_LON = (-60.0, 60.0)


def nonstationary_truth(knots, strength=1.0):
    """Smooth fields whose ranges, anisotropy and variance change across the domain.

    West: long zonal ranges and low variance. East: short, nearly isotropic
    ranges and high variance. Values are set at the knots on the link scale
    and converted to bases.
    """
    from .initialization import basis_from_knot_values

    h = default_hyperparams()
    lat, lon = knots.knots[:, 0], knots.knots[:, 1]
    s = np.clip(lon / CV_LON[1], -1.0, 1.0)           # -1 west, +1 east
    gamma_lat = np.exp(math.log(6.0) - 0.8 * strength * s)
    gamma_lon = np.exp(math.log(12.0) - 1.4 * strength * s)
    targets = {
        "theta_lat": np.log(theta_from_effective_range(gamma_lat)),
        "theta_lon": np.log(theta_from_effective_range(gamma_lon)),
        "phi": math.log(4.0) + 1.0 * strength * s,
        "nugget_ratio": np.full(len(knots), math.log(0.03)),
        "mu2007": 50.0 + 10.0 * np.sin(np.radians(3 * lat)) + 5.0 * s,
        "beta": np.zeros(len(knots)),
    }
    f = ParameterFieldSet.at_prior_mean(knots, h)
    for name, v in targets.items():
        f = f.with_basis(name, basis_from_knot_values(v, h[name], knots))
    return f


@dataclass
class CvOrderingResult:
    mae: dict
    rmse: dict
    crps: dict


def cv_ordering_study(n_per_year=400, years=(2007, 2008), seed=0, strength=1.0, window_deg=20.0, grid_deg=10.0):
    """LOFO scores of the initialized non-stationary fit, its stationary version and Levitus."""
    from .fields import constrain_fields
    from .initialization import initialize
    from .validation import lofo_folds, run_cv

    knots = KnotGrid.regular(10.0, 20.0, CV_LAT, CV_LON)
    truth = nonstationary_truth(knots, strength)
    ss = np.random.SeedSequence(seed)
    obs, _ = simulate_dataset(truth, SimulationLayout(n_per_year, tuple(years), CV_LAT, CV_LON),
                              np.random.default_rng(ss.spawn(1)[0]))
    ini = initialize(obs, knots, window_deg, grid_deg, 10, CV_LAT, CV_LON, fit_hyper=False,
                     fallback_hyper=default_hyperparams())
    full = ini.fields
    stationary = constrain_fields(full, ("theta_lat", "theta_lon", "nugget_ratio", "phi"))
    folds = lofo_folds(obs)
    reports = {"full": run_cv(full, obs, folds), "stationary": run_cv(stationary, obs, folds),
               "levitus": run_cv("levitus", obs, folds)}
    return CvOrderingResult({k: r.mae for k, r in reports.items()}, {k: r.rmse for k, r in reports.items()},
                            {k: r.crps for k, r in reports.items()})
