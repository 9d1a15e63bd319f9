"""Knot-basis parameter fields.

Each field rho is stored as a whitened basis vector b on a knot grid and
reconstructed anywhere by kriging through its hyper-GP:

    rho(x) = g(mu + sd * R(x, knots) L^{-T} b),    R(knots, knots) = L L^T,

with R the exponential correlation exp(-d_cyl / range). At the knots this is
g(mu + sd * L b), so b ~ N(0, I) gives the knot prior covariance
sd^2 * R(knots, knots).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.stats import norm

from .errors import InvalidArgument, NumericFailure
from .geometry import as_latlon, pairwise_cyl_distance
from .kernels import ConvolutionMode, PointParams

LN20 = math.log(20.0)

FIELD_NAMES = ("phi", "theta_lat", "theta_lon", "nugget_ratio", "mu2007", "beta")
COVARIANCE_FIELDS = ("theta_lat", "theta_lon", "nugget_ratio", "phi")
MEAN_FIELDS = ("mu2007", "beta")
LINKS = {
    "phi": "exponential",
    "theta_lat": "exponential",
    "theta_lon": "exponential",
    "nugget_ratio": "exponential",
    "mu2007": "identity",
    "beta": "identity",
}
BASE_YEAR = 2007


def link_forward(link, z):
    if link == "identity":
        return np.asarray(z, float)
    if link == "exponential":
        return np.exp(z)
    raise InvalidArgument(f"unknown link {link!r}")


def link_inverse(link, v):
    if link == "identity":
        return np.asarray(v, float)
    if link == "exponential":
        v = np.asarray(v, float)
        if np.any(v <= 0):
            raise InvalidArgument("exponential-link values must be positive")
        return np.log(v)
    raise InvalidArgument(f"unknown link {link!r}")


@dataclass(frozen=True)
class Hyperparams:
    """Hyper-GP of one field on the link scale: mean, sd and exponential range."""

    mu: float
    sd: float
    range_deg: float
    link: str = "identity"

    def __post_init__(self):
        if not (self.sd > 0 and self.range_deg > 0):
            raise InvalidArgument("hyper sd and range must be positive")
        if self.link not in ("identity", "exponential"):
            raise InvalidArgument(f"unknown link {self.link!r}")


# effective ranges: distance where correlation falls to 0.05

def effective_range_gp(theta):
    """Squared-exponential field: exp(-d^2 / (2 theta)) = 0.05."""
    return np.sqrt(2.0 * np.asarray(theta, float) * LN20)


def theta_from_effective_range(gamma):
    return np.asarray(gamma, float) ** 2 / (2.0 * LN20)


def effective_range_prior(theta_rho):
    """Exponential hyper-GP: exp(-d / theta_rho) = 0.05."""
    return np.asarray(theta_rho, float) * LN20


def prior_range_from_effective(gamma):
    return np.asarray(gamma, float) / LN20


def prior_correlation(x, y, theta_rho):
    x, y = as_latlon(x), as_latlon(y)
    out = np.exp(-pairwise_cyl_distance(x, y) / theta_rho)
    return float(out[0, 0]) if out.size == 1 else out


def basis_log_prior(b) -> float:
    b = np.asarray(b, float)
    return float(-0.5 * np.dot(b, b) - 0.5 * b.size * math.log(2 * math.pi))


class KnotGrid:
    """Knot locations plus cached Cholesky factors of their prior correlation."""

    def __init__(self, knots):
        self.knots = as_latlon(knots)
        if len(self.knots) < 1:
            raise InvalidArgument("knot grid needs at least one knot")
        d = pairwise_cyl_distance(self.knots)
        np.fill_diagonal(d, np.inf)
        if np.any(d == 0):
            raise InvalidArgument("knots must be distinct")
        self._chol = {}

    @classmethod
    def regular(cls, lat_step=8.0, lon_step=16.0, lat_range=(-90.0, 90.0),
                lon_range=(-180.0, 180.0), mask=None):
        lats = np.arange(lat_range[0] + lat_step / 2, lat_range[1], lat_step)
        lons = np.arange(lon_range[0] + lon_step / 2, lon_range[1], lon_step)
        grid = np.array([(la, lo) for la in lats for lo in lons], dtype=float)
        if mask is not None:
            keep = mask.contains(grid[:, 0], grid[:, 1])
            grid = grid[keep]
        return cls(grid)

    def __len__(self):
        return len(self.knots)

    def chol(self, range_deg) -> np.ndarray:
        key = float(range_deg)
        if key not in self._chol:
            corr = np.exp(-pairwise_cyl_distance(self.knots) / key)
            try:
                L = cholesky(corr, lower=True)
            except np.linalg.LinAlgError:
                corr = corr + 1e-8 * np.mean(np.diag(corr)) * np.eye(len(corr))
                try:
                    L = cholesky(corr, lower=True)
                except np.linalg.LinAlgError as exc:
                    raise NumericFailure("knot prior correlation is not positive definite") from exc
            self._chol[key] = L
        return self._chol[key]

    def kriging_matrix(self, targets, range_deg) -> np.ndarray:
        """A with rho_link(targets) = mu + sd * A b; shape (n_targets, n_knots)."""
        targets = as_latlon(targets)
        L = self.chol(range_deg)
        cross = np.exp(-pairwise_cyl_distance(self.knots, targets) / float(range_deg))
        return solve_triangular(L, cross, lower=True).T


def evaluate_field(hyper: Hyperparams, b, knots: KnotGrid, targets=None, kriging=None):
    """Field values at ``targets`` (or through a precomputed kriging matrix)."""
    b = np.asarray(b, float)
    if b.size == 1 and len(knots) != 1:
        n = len(as_latlon(targets)) if kriging is None else kriging.shape[0]
        z = np.full(n, hyper.mu + hyper.sd * b[0])
    else:
        A = knots.kriging_matrix(targets, hyper.range_deg) if kriging is None else kriging
        z = hyper.mu + hyper.sd * (A @ b)
    return link_forward(hyper.link, z)


@dataclass
class ParameterFieldSet:
    """The six parameter fields sharing one knot grid.

    A field listed in ``constrained`` is stationary: its basis is a single
    scalar c and the field equals g(mu + sd * c) everywhere.
    """

    knots: KnotGrid
    hyper: Mapping[str, Hyperparams]
    basis: Mapping[str, np.ndarray]
    constrained: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.hyper = dict(self.hyper)
        self.basis = {k: np.array(v, dtype=float).ravel() for k, v in self.basis.items()}
        self.constrained = frozenset(self.constrained)
        missing = set(FIELD_NAMES) - set(self.hyper) | set(FIELD_NAMES) - set(self.basis)
        if missing:
            raise InvalidArgument(f"missing fields: {sorted(missing)}")
        for name in FIELD_NAMES:
            if self.hyper[name].link != LINKS[name]:
                raise InvalidArgument(f"{name} must use the {LINKS[name]} link")
            expected = 1 if name in self.constrained else len(self.knots)
            if self.basis[name].size != expected:
                raise InvalidArgument(f"basis for {name} has length {self.basis[name].size}, expected {expected}")
            if not np.all(np.isfinite(self.basis[name])):
                raise InvalidArgument(f"non-finite basis for {name}")
        if self.hyper["mu2007"].range_deg != self.hyper["beta"].range_deg:
            raise InvalidArgument("mu2007 and beta must share their hyper range")

    @classmethod
    def at_prior_mean(cls, knots, hyper, constrained=()):
        n = len(knots)
        basis = {k: np.zeros(1 if k in constrained else n) for k in FIELD_NAMES}
        return cls(knots, hyper, basis, frozenset(constrained))

    def with_basis(self, name, b) -> "ParameterFieldSet":
        basis = dict(self.basis)
        basis[name] = np.array(b, dtype=float).ravel()
        return replace(self, basis=basis)

    def kriging(self, name, targets):
        return self.knots.kriging_matrix(targets, self.hyper[name].range_deg)

    def evaluate(self, name, targets, kriging=None) -> np.ndarray:
        return evaluate_field(self.hyper[name], self.basis[name], self.knots, targets, kriging)

    def point_params(self, targets, mode=ConvolutionMode.GAUSSIAN_APPROX, kriging=None) -> PointParams:
        """Covariance parameters at ``targets``; nugget = ratio * phi."""
        targets = as_latlon(targets)
        vals = {}
        for name in COVARIANCE_FIELDS:
            A = None if kriging is None else kriging[name]
            vals[name] = self.evaluate(name, targets, A)
        return PointParams(targets, vals["phi"], vals["theta_lat"], vals["theta_lon"],
                           vals["nugget_ratio"] * vals["phi"], mode)

    def mean(self, targets, years, kriging=None) -> np.ndarray:
        """mu2007(x) + beta(x) (year - 2007)."""
        targets = as_latlon(targets)
        A = None if kriging is None else kriging["mu2007"]
        mu = self.evaluate("mu2007", targets, A)
        A = None if kriging is None else kriging["beta"]
        beta = self.evaluate("beta", targets, A)
        return mu + beta * (np.asarray(years, float) - BASE_YEAR)

    def log_prior(self) -> float:
        return sum(basis_log_prior(self.basis[k]) for k in FIELD_NAMES)

    # serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "ohcgp.fields/1",
            "knots": self.knots.knots.tolist(),
            "constrained": sorted(self.constrained),
            "fields": {
                name: {
                    "mu": self.hyper[name].mu,
                    "sd": self.hyper[name].sd,
                    "range_deg": self.hyper[name].range_deg,
                    "link": self.hyper[name].link,
                    "basis": self.basis[name].tolist(),
                }
                for name in FIELD_NAMES
            },
        }

    @classmethod
    def from_dict(cls, d, knots: KnotGrid | None = None) -> "ParameterFieldSet":
        if d.get("format") != "ohcgp.fields/1":
            raise InvalidArgument("not a parameter-field document")
        if knots is None:
            knots = KnotGrid(np.array(d["knots"], dtype=float))
        hyper = {k: Hyperparams(v["mu"], v["sd"], v["range_deg"], v["link"]) for k, v in d["fields"].items()}
        basis = {k: np.array(v["basis"], dtype=float) for k, v in d["fields"].items()}
        return cls(knots, hyper, basis, frozenset(d.get("constrained", ())))

    def to_json(self) -> str:
        # float repr is shortest-round-trip, so serialization is bit-exact
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text, knots=None) -> "ParameterFieldSet":
        return cls.from_dict(json.loads(text), knots)


def mean_at(fields: ParameterFieldSet, x, year) -> np.ndarray:
    out = fields.mean(as_latlon(x), np.atleast_1d(year))
    return float(out[0]) if out.size == 1 else out


def hyper_from_quantiles(q25, q50, q75, link, range_deg, transform_power=1.0):
    """Back-solve (mu, sd) on the link scale from reported quartiles.

    ``transform_power`` maps the reported quantity to the field: the field is
    reported**power up to a constant (e.g. 2 for sqrt(phi) -> phi).
    """
    z = norm.ppf(0.75)
    if link == "exponential":
        lq = np.log([q25, q50, q75]) * transform_power
    else:
        lq = np.array([q25, q50, q75], float) * transform_power
    mu = lq[1]
    sd = 0.5 * ((lq[2] - lq[1]) + (lq[1] - lq[0])) / z
    return Hyperparams(float(mu), float(sd), float(range_deg), link)


def default_hyperparams() -> dict:
    """Hyperparameters shipped with the package (heat content in GJ/m^2).

    Quartiles of the reported quantities are mapped to the link scale; length
    scales are reported as effective ranges, so theta = gamma^2 / (2 ln 20).
    """
    off = math.log(2.0 * LN20)
    h = {}
    for name, (q, rng) in {
        "theta_lat": ((0.89, 2.50, 6.98), 39.97),
        "theta_lon": ((0.88, 5.07, 29.08), 44.93),
    }.items():
        base = hyper_from_quantiles(*q, "exponential", prior_range_from_effective(rng), 2.0)
        h[name] = replace(base, mu=base.mu - off)
    h["nugget_ratio"] = hyper_from_quantiles(0.0034, 0.04, 0.47, "exponential",
                                             prior_range_from_effective(36.59))
    h["phi"] = hyper_from_quantiles(1.29, 2.25, 3.92, "exponential",
                                    prior_range_from_effective(39.24), 2.0)
    mean_range = prior_range_from_effective(34.88)
    h["mu2007"] = hyper_from_quantiles(19.70, 49.24, 78.78, "identity", mean_range)
    beta = hyper_from_quantiles(-1.53, 0.0, 1.53, "identity", mean_range)
    h["beta"] = replace(beta, mu=0.0)
    return h


def constrain_fields(fields: ParameterFieldSet, names) -> ParameterFieldSet:
    """Make the named fields stationary at the median of their knot values (link scale)."""
    names = frozenset(names) | fields.constrained
    basis = dict(fields.basis)
    for name in names - fields.constrained:
        h = fields.hyper[name]
        z = link_inverse(h.link, fields.evaluate(name, fields.knots.knots))
        basis[name] = np.array([(float(np.median(z)) - h.mu) / h.sd])
    return ParameterFieldSet(fields.knots, fields.hyper, basis, names)


def hyper_with_overrides(overrides=None) -> dict:
    """Default hyperparameters with per-field {mu, sd, range_deg} replacements."""
    h = default_hyperparams()
    for name, vals in (overrides or {}).items():
        if name not in h:
            raise InvalidArgument(f"unknown field {name!r} in hyper overrides")
        bad = set(vals) - {"mu", "sd", "range_deg"}
        if bad:
            raise InvalidArgument(f"unknown hyper keys {sorted(bad)} for {name}")
        h[name] = replace(h[name], **{k: float(v) for k, v in vals.items()})
    if h["mu2007"].range_deg != h["beta"].range_deg:
        raise InvalidArgument("mu2007 and beta must share their hyper range")
    return h
