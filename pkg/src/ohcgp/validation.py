"""Cross-validation folds, scoring, the Levitus-style reference, and OLS trends."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dense import conditional_gaussian
from .errors import InvalidArgument
from .fields import ParameterFieldSet
from .geometry import circular_lon_distance, pairwise_cyl_distance
from .kernels import ConvolutionMode, PointParams
from .vecchia import build_plan, extend_for_prediction, vecchia_predict

LEVITUS_RADIUS = 8.0
LEVITUS_SCALE = 4.0
CELL_DEG = 5.0


@dataclass
class Fold:
    key: str
    test: np.ndarray
    train: np.ndarray


def lofo_folds(obs) -> list:
    """One fold per (year, float): the float's profiles are held out of its year."""
    if len(obs) and np.any(np.char.str_len(obs.float_id.astype(str)) == 0):
        raise InvalidArgument("leave-one-float-out needs a float id on every observation")
    folds = []
    for yr in obs.years():
        idx = obs.year_indices(yr)
        ids = obs.float_id[idx]
        for fid in sorted(set(ids.tolist())):
            test = idx[ids == fid]
            folds.append(Fold(f"{yr}/{fid}", test, idx[ids != fid]))
    return folds


def windowed_folds(obs, window_deg=2.0) -> list:
    """One fold per observation; training drops everything within the window."""
    half = window_deg / 2
    folds = []
    for yr in obs.years():
        idx = obs.year_indices(yr)
        ll = obs.latlon[idx]
        for k, i in enumerate(idx):
            near = (np.abs(ll[:, 0] - ll[k, 0]) <= half) & (circular_lon_distance(ll[:, 1], ll[k, 1]) <= half)
            folds.append(Fold(f"{yr}/{i}", np.array([i]), idx[~near]))
    return folds


def crps_gaussian(y, mu, sigma):
    """Closed-form CRPS of N(mu, sigma^2) at y; sigma = 0 gives |y - mu|."""
    y, mu, sigma = np.broadcast_arrays(np.asarray(y, float), np.asarray(mu, float), np.asarray(sigma, float))
    if np.any(sigma < 0):
        raise InvalidArgument("sigma must be nonnegative")
    out = np.array(np.abs(y - mu), dtype=float)
    pos = sigma > 0
    if np.any(pos):
        s = sigma[pos]
        z = (y[pos] - mu[pos]) / s
        out[pos] = s * (z * (2 * stats.norm.cdf(z) - 1) + 2 * stats.norm.pdf(z) - 1 / math.sqrt(math.pi))
    return float(out) if out.ndim == 0 else out


@dataclass
class ScoreReport:
    mae: float
    rmse: float
    crps: float
    n: int
    cell_map: dict = field(default_factory=dict)       # (lat, lon) cell centre -> MAE
    improvement: dict = field(default_factory=dict)    # metric -> percent vs reference

    def to_dict(self):
        return {"mae": self.mae, "rmse": self.rmse, "crps": self.crps, "n": self.n,
                "improvement_percent": self.improvement}


def score_predictions(y, mu, sigma, latlon=None, cell_deg=CELL_DEG) -> ScoreReport:
    y, mu, sigma = (np.asarray(a, float).ravel() for a in (y, mu, sigma))
    if y.size == 0:
        raise InvalidArgument("nothing to score")
    err = y - mu
    cells = {}
    if latlon is not None:
        ll = np.asarray(latlon, float)
        i = np.floor((np.clip(ll[:, 0], -90, 90 - 1e-9) + 90) / cell_deg)
        j = np.floor(np.mod(ll[:, 1] + 180, 360) / cell_deg)
        keys = list(zip(i.astype(int), j.astype(int)))
        acc = {}
        for key, e in zip(keys, np.abs(err)):
            acc.setdefault(key, []).append(e)
        cells = {(-90 + (a + 0.5) * cell_deg, -180 + (b + 0.5) * cell_deg): float(np.mean(v))
                 for (a, b), v in sorted(acc.items())}
    return ScoreReport(float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2))),
                       float(np.mean(crps_gaussian(y, mu, sigma))), int(y.size), cells)


def percent_improvement(report: ScoreReport, reference: ScoreReport) -> dict:
    """Positive when ``report`` has lower error than ``reference``."""
    return {k: 100.0 * (getattr(reference, k) - getattr(report, k)) / getattr(reference, k)
            for k in ("mae", "rmse", "crps")}


def equivalent_obs_increase(improvement_percent):
    """Percent increase in observations that a relative accuracy gain p stands for.

    Under 1/sqrt(n) error decay a gain factor (1 + p) corresponds to
    (1 + p)^2 times the data; 11.2% maps to about 24%.
    """
    p = np.asarray(improvement_percent, float) / 100.0
    return 100.0 * ((1.0 + p) ** 2 - 1.0)


def levitus_predict(train_latlon, train_values, targets, radius_deg=LEVITUS_RADIUS, scale_deg=LEVITUS_SCALE):
    """Gaussian-weighted local mean and weighted sd within a fixed radius.

    Targets with no in-radius data, or a zero weighted sd, fall back to the
    global mean and sd of the training values.
    """
    if radius_deg <= 0 or scale_deg <= 0:
        raise InvalidArgument("radius and scale must be positive")
    y = np.asarray(train_values, float)
    tgt = np.atleast_2d(np.asarray(targets, float))
    gmean = float(np.mean(y)) if y.size else 0.0
    gsd = float(np.std(y)) if y.size else 0.0
    if y.size == 0:
        return np.full(len(tgt), gmean), np.full(len(tgt), gsd)
    d = pairwise_cyl_distance(tgt, np.asarray(train_latlon, float))
    w = np.where(d <= radius_deg, np.exp(-(d / scale_deg) ** 2), 0.0)
    sw = w.sum(axis=1)
    has = sw > 0
    mu = np.full(len(tgt), gmean)
    sd = np.full(len(tgt), gsd)
    mu[has] = (w[has] @ y) / sw[has]
    var = (w[has] * (y[None, :] - mu[has, None]) ** 2).sum(axis=1) / sw[has]
    s = np.sqrt(np.maximum(var, 0.0))
    sd[has] = np.where(s > 0, s, gsd)
    return mu, sd


@dataclass
class OlsTrend:
    slope: float
    intercept: float
    slope_ci: tuple
    p_value: float


def ols_trend(years, values, level=0.95) -> OlsTrend:
    t = np.asarray(years, float)
    v = np.asarray(values, float)
    if t.size < 3:
        raise InvalidArgument("OLS trend needs at least three years")
    if np.ptp(t) == 0:
        raise InvalidArgument("degenerate design: all years equal")
    res = stats.linregress(t, v)
    q = stats.t.ppf(0.5 + level / 2, t.size - 2)
    se = res.stderr if np.isfinite(res.stderr) else 0.0
    p = res.pvalue if np.isfinite(res.pvalue) else 0.0
    return OlsTrend(float(res.slope), float(res.intercept),
                    (float(res.slope - q * se), float(res.slope + q * se)), float(p))


# ---------------------------------------------------------------------------
# cross-validation runs


def gp_fold_predict(fields: ParameterFieldSet, obs, fold: Fold, m=None, mode=ConvolutionMode.GAUSSIAN_APPROX):
    """Predict the held-out observed values (latent plus nugget) of one fold.

    m=None uses exact dense kriging; otherwise a Vecchia extension with m neighbours.
    """
    yr = int(obs.year[fold.test[0]])
    tr, te = fold.train, fold.test
    tr_ll, te_ll = obs.latlon[tr], obs.latlon[te]
    tr_mean = fields.mean(tr_ll, np.full(len(tr), yr))
    te_mean = fields.mean(te_ll, np.full(len(te), yr))
    op = fields.point_params(tr_ll, mode)
    tp = fields.point_params(te_ll, mode)
    latent = PointParams(tp.latlon, tp.phi, tp.theta_lat, tp.theta_lon, 0.0, mode)
    if len(tr) == 0:
        return te_mean, np.sqrt(tp.phi + tp.sigma2)
    r_mean = obs.value[tr] - tr_mean
    if m is None:
        allp = op.concat(latent)
        n = len(tr)
        C = allp.cov_matrix()
        cond = conditional_gaussian(r_mean, C[n:, :n], C[:n, :n], C[n:, n:])
        return te_mean + cond.mean, np.sqrt(np.maximum(np.diag(cond.covariance), 0.0) + tp.sigma2)
    ext = extend_for_prediction(build_plan(tr_ll, int(m)), te_ll)
    pred = vecchia_predict(ext, r_mean, 0.0, op.concat(latent), pred_means=te_mean)
    return pred.mean, np.sqrt(np.maximum(pred.variances(), 0.0) + tp.sigma2)


def run_cv(variant, obs, folds, m=None, mode=ConvolutionMode.GAUSSIAN_APPROX,
           radius_deg=LEVITUS_RADIUS, scale_deg=LEVITUS_SCALE) -> ScoreReport:
    """Score a variant over folds; ``variant`` is "levitus" or a ParameterFieldSet."""
    ys, mus, sds, lls = [], [], [], []
    for fold in folds:
        te = fold.test
        if isinstance(variant, str):
            if variant != "levitus":
                raise InvalidArgument(f"unknown variant {variant!r}")
            mu, sd = levitus_predict(obs.latlon[fold.train], obs.value[fold.train], obs.latlon[te],
                                     radius_deg, scale_deg)
        else:
            mu, sd = gp_fold_predict(variant, obs, fold, m, mode)
        ys.append(obs.value[te])
        mus.append(mu)
        sds.append(sd)
        lls.append(obs.latlon[te])
    return score_predictions(np.concatenate(ys), np.concatenate(mus), np.concatenate(sds), np.vstack(lls))


def write_reports(path_json, reports: dict, reference=None):
    """Write {variant: ScoreReport}; adds percent improvement vs ``reference``."""
    doc = {}
    for name, rep in reports.items():
        if reference is not None and reference in reports and name != reference:
            rep.improvement = percent_improvement(rep, reports[reference])
        doc[name] = rep.to_dict()
    with open(path_json, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def write_cell_map(path, report: ScoreReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat", "lon", "mae"])
        for (la, lo), v in report.cell_map.items():
            w.writerow(["%.17g" % la, "%.17g" % lo, "%.17g" % v])
