"""Integrated heat content: areal weights, posterior OHC, intervals, trend maps.

OHC values are in model units times m^2 (GJ when fields are in GJ/m^2).
The integration target is the latent field; the nugget is excluded unless
``include_nugget`` asks for its areal contribution sum(a_i^2 sigma^2_i).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import brentq
from scipy.stats import norm

from .dense import _chol
from .errors import InvalidArgument
from .fields import ParameterFieldSet
from .geometry import as_latlon
from .kernels import ConvolutionMode, PointParams
from .vecchia import build_plan, extend_for_prediction, vecchia_predict

EARTH_RADIUS_M = 6_371_000.0
DENSE_GUARD = 5000


@dataclass
class IntegrationGrid:
    latlon: np.ndarray      # cell centres
    weights: np.ndarray     # m^2, zero where masked

    def __post_init__(self):
        self.latlon = as_latlon(self.latlon)
        self.weights = np.asarray(self.weights, float)
        if np.any(self.weights < 0):
            raise InvalidArgument("areal weights must be nonnegative")

    def active(self) -> "IntegrationGrid":
        keep = self.weights > 0
        return IntegrationGrid(self.latlon[keep], self.weights[keep])

    def __len__(self):
        return len(self.weights)


def areal_weights(resolution_deg=1.0, mask=None, lat_range=(-90.0, 90.0), lon_range=(-180.0, 180.0),
                  radius=EARTH_RADIUS_M) -> IntegrationGrid:
    """Cell-centre grid with exact spherical cell areas R^2 dlon (sin top - sin bottom)."""
    res = float(resolution_deg)
    if res <= 0 or not math.isclose(360.0 / res, round(360.0 / res)):
        raise InvalidArgument("resolution must divide 360")
    lat_edges = np.arange(lat_range[0], lat_range[1] + res / 2, res)
    lon_edges = np.arange(lon_range[0], lon_range[1] + res / 2, res)
    lat_c = 0.5 * (lat_edges[1:] + lat_edges[:-1])
    lon_c = 0.5 * (lon_edges[1:] + lon_edges[:-1])
    band = radius**2 * np.radians(res) * (np.sin(np.radians(lat_edges[1:])) - np.sin(np.radians(lat_edges[:-1])))
    LA, LO = np.meshgrid(lat_c, lon_c, indexing="ij")
    w = np.repeat(band, len(lon_c))
    ll = np.column_stack([LA.ravel(), LO.ravel()])
    if mask is not None:
        w = np.where(mask.contains(ll[:, 0], ll[:, 1]), w, 0.0)
    return IntegrationGrid(ll, w)


@dataclass
class OhcSummary:
    mu: float
    sigma: float

    def __iter__(self):
        return iter((self.mu, self.sigma))


def _latent(params: PointParams) -> PointParams:
    return PointParams(params.latlon, params.phi, params.theta_lat, params.theta_lon, 0.0, params.mode)


def _nugget_term(a, pparams, include_nugget):
    return float(np.sum(a**2 * pparams.sigma2)) if include_nugget else 0.0


def ohc_posterior_dense(fields: ParameterFieldSet, obs_latlon, obs_values, year, grid: IntegrationGrid,
                        mode=ConvolutionMode.GAUSSIAN_APPROX, include_nugget=False) -> OhcSummary:
    """Exact Gaussian conditioning of the grid-integrated latent field."""
    g = grid.active()
    if len(g) > DENSE_GUARD:
        raise InvalidArgument(f"{len(g)} grid cells exceed the dense limit {DENSE_GUARD}; use the Vecchia path")
    if len(g) == 0:
        return OhcSummary(0.0, 0.0)
    a = g.weights
    gp_full = fields.point_params(g.latlon, mode)
    gp = _latent(gp_full)
    mu_grid = fields.mean(g.latlon, np.full(len(g), year))
    Cgg_a = gp.cov_matrix(include_nugget=False) @ a
    var = float(a @ Cgg_a)
    mu = float(a @ mu_grid)
    obs_latlon = as_latlon(obs_latlon)
    if len(obs_latlon):
        op = fields.point_params(obs_latlon, mode)
        allp = op.concat(gp)
        n = len(op)
        Coo = allp.cov_matrix(np.arange(n))
        Cog = allp.cov_matrix(np.arange(n), np.arange(n, n + len(g)))
        L = _chol(Coo, "observation")
        r = np.asarray(obs_values, float) - fields.mean(obs_latlon, np.full(n, year))
        v = solve_triangular(L, Cog @ a, lower=True)
        z = solve_triangular(L, r, lower=True)
        mu += float(v @ z)
        var -= float(v @ v)
    var = max(var, 0.0) + _nugget_term(a, gp_full, include_nugget)
    return OhcSummary(mu, math.sqrt(var))


def ohc_posterior_vecchia(fields: ParameterFieldSet, obs_latlon, obs_values, year, grid: IntegrationGrid,
                          extension=None, m=25, mode=ConvolutionMode.GAUSSIAN_APPROX,
                          include_nugget=False, grid_kriging=None, obs_kriging=None) -> OhcSummary:
    """OHC through sparse solves with W = U_pp U_pp^T; no dense grid covariance."""
    g = grid.active()
    obs_latlon = as_latlon(obs_latlon)
    if len(g) == 0:
        return OhcSummary(0.0, 0.0)
    if extension is None:
        extension = extend_for_prediction(build_plan(obs_latlon, m), g.latlon)
    n = len(obs_latlon)
    op = fields.point_params(obs_latlon, mode, kriging=obs_kriging)
    gp_full = fields.point_params(g.latlon, mode, kriging=grid_kriging)
    params = op.concat(_latent(gp_full))
    obs_mean = fields.mean(obs_latlon, np.full(n, year), kriging=obs_kriging)
    grid_mean = fields.mean(g.latlon, np.full(len(g), year), kriging=grid_kriging)
    pred = vecchia_predict(extension, obs_values, obs_mean, params, pred_means=grid_mean)
    a = g.weights
    var = pred.quad_form(a) + _nugget_term(a, gp_full, include_nugget)
    return OhcSummary(float(a @ pred.mean), math.sqrt(max(var, 0.0)))


class OhcEngine:
    """Per-year OHC evaluation with cached extensions and kriging matrices.

    Callable as ``engine(fields, factors=None) -> {year: (mu, sigma)}`` so it
    plugs into the sampler.
    """

    def __init__(self, data, grid: IntegrationGrid, fields: ParameterFieldSet, method="vecchia", m=25,
                 mode=ConvolutionMode.GAUSSIAN_APPROX, include_nugget=False):
        self.data = data
        self.grid = grid.active()
        self.method = method
        self.mode = mode
        self.include_nugget = include_nugget
        names = ("phi", "theta_lat", "theta_lon", "nugget_ratio", "mu2007", "beta")
        self.grid_kriging = {k: fields.kriging(k, self.grid.latlon) for k in names}
        self.extensions = {}
        if method == "vecchia":
            for b in data.blocks:
                plan = b.plan if b.plan is not None and b.plan.m == m else build_plan(b.latlon, m)
                self.extensions[b.year] = extend_for_prediction(plan, self.grid.latlon)
        elif method != "dense":
            raise InvalidArgument("method must be 'vecchia' or 'dense'")

    def __call__(self, fields, factors=None):
        out = {}
        for b in self.data.blocks:
            if self.method == "dense":
                s = ohc_posterior_dense(fields, b.latlon, b.values, b.year, self.grid, self.mode,
                                        self.include_nugget)
            else:
                s = ohc_posterior_vecchia(fields, b.latlon, b.values, b.year, self.grid,
                                          self.extensions[b.year], mode=self.mode,
                                          include_nugget=self.include_nugget,
                                          grid_kriging=self.grid_kriging, obs_kriging=b.kriging)
            out[b.year] = (s.mu, s.sigma)
        return out


# ---------------------------------------------------------------------------
# intervals


def _ohc_by_year(chain, burn_in):
    if isinstance(chain, dict):
        return {yr: (np.asarray(v[0], float), np.asarray(v[1], float)) for yr, v in chain.items()}
    return chain.ohc_arrays(burn_in)


def ohc_intervals(chain, level=0.95, resamples_per_sample=100, rng=None, burn_in=0) -> dict:
    """Per-year confidence and credible intervals.

    Confidence: mu +- z sigma of the sample whose mu is the median.
    Credible: central ``level`` percentiles of N(mu_t, sigma_t) draws pooled
    across samples. ``chain`` is a PosteriorChain or {year: (mus, sigmas)}.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    data = _ohc_by_year(chain, burn_in)
    if not data or any(len(v[0]) == 0 for v in data.values()):
        raise InvalidArgument("chain has no OHC samples")
    z = norm.ppf(0.5 + level / 2)
    q = [50 * (1 - level), 50 * (1 + level)]
    out = {}
    for yr in sorted(data):
        mus, sds = data[yr]
        k = int(np.argsort(mus, kind="stable")[(len(mus) - 1) // 2])
        draws = (mus[:, None] + sds[:, None] * rng.standard_normal((len(mus), resamples_per_sample))).ravel()
        lo, hi = np.percentile(draws, q)
        out[yr] = {
            "median_mu": float(mus[k]),
            "median_sigma": float(sds[k]),
            "confidence": (float(mus[k] - z * sds[k]), float(mus[k] + z * sds[k])),
            "credible": (float(lo), float(hi)),
            "posterior_mean": float(np.mean(draws)),
        }
    return out


def mixture_quantile(p, mus, sds):
    """Quantile of an equal-weight Gaussian mixture (Brent root of the CDF)."""
    mus, sds = np.asarray(mus, float), np.asarray(sds, float)
    lo = float(np.min(mus - 10 * sds)) - 1.0
    hi = float(np.max(mus + 10 * sds)) + 1.0
    return brentq(lambda x: np.mean(norm.cdf((x - mus) / sds)) - p, lo, hi, xtol=1e-12)


# ---------------------------------------------------------------------------
# trend fields


@dataclass
class TrendResample:
    integrated: np.ndarray      # (draws,) integrated trend, OHC units per year
    fields: np.ndarray          # (draws, cells) trend on the active grid
    grid: IntegrationGrid

    def percentile_fields(self, qs=(5, 50, 95)) -> dict:
        return {q: np.percentile(self.fields, q, axis=0) for q in qs}

    def integrated_percentiles(self, qs=(5, 50, 95)) -> dict:
        return {q: float(np.percentile(self.integrated, q)) for q in qs}


def trend_resample_and_integrate(chain, data, grid: IntegrationGrid, resamples=10, rng=None, burn_in=0,
                                 mode=ConvolutionMode.GAUSSIAN_APPROX, samples=None) -> TrendResample:
    """Redraw the trend basis from its Gaussian conditional at each retained sample.

    The beta block of a joint [b_mu2007, b_beta] draw is an exact draw of its
    marginal; each is evaluated on the grid and integrated.
    """
    from .sampler import mean_trend_conditional

    rng = np.random.default_rng(0) if rng is None else rng
    g = grid.active()
    keep = chain.retained(burn_in) if samples is None else list(samples)
    if not keep:
        raise InvalidArgument("no retained samples")
    A = chain.template.kriging("beta", g.latlon) if len(g) else np.zeros((0, len(chain.template.knots)))
    all_fields = []
    for k in keep:
        f = chain.fields_at(k)
        mean, L, (k_mu, k_beta) = mean_trend_conditional(f, data, mode=mode)
        z = rng.standard_normal((len(mean), resamples))
        draws = mean[:, None] + solve_triangular(L.T, z, lower=False)
        bb = draws[k_mu:]
        h = f.hyper["beta"]
        if "beta" in f.constrained:
            vals = np.repeat(h.mu + h.sd * bb, len(g), axis=0).T
        else:
            vals = (h.mu + h.sd * (A @ bb)).T
        all_fields.append(vals)
    F = np.vstack(all_fields)
    return TrendResample(F @ g.weights, F, g)


def sign_agreement_map(trend_fields) -> np.ndarray:
    """Fraction of resampled trend fields that are positive in each cell."""
    F = np.atleast_2d(np.asarray(trend_fields, float))
    if F.shape[0] < 1:
        raise InvalidArgument("need at least one trend field")
    return np.mean(F > 0, axis=0)


# ---------------------------------------------------------------------------
# tables


def write_cell_csv(path, latlon, values, name="value"):
    latlon = as_latlon(latlon)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat", "lon", name])
        for (la, lo), v in zip(latlon, np.asarray(values, float)):
            w.writerow(["%.17g" % la, "%.17g" % lo, "%.17g" % v])


def write_interval_table(path, intervals: dict, scale=1.0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "median_mu", "median_sigma", "conf_lo", "conf_hi", "cred_lo", "cred_hi"])
        for yr in sorted(intervals):
            r = intervals[yr]
            vals = [r["median_mu"], r["median_sigma"], *r["confidence"], *r["credible"]]
            w.writerow([yr] + ["%.17g" % (v * scale) for v in vals])


def integrated_mean_field(fields: ParameterFieldSet, grid: IntegrationGrid, year) -> float:
    g = grid.active()
    return float(g.weights @ fields.mean(g.latlon, np.full(len(g), year)))

