"""Small synthetic instances shared by tests."""
import numpy as np

from ohcgp.data_io import ObservationSet
from ohcgp.dense import cholesky_loglik
from ohcgp.fields import BASE_YEAR, FIELD_NAMES, KnotGrid, ParameterFieldSet, default_hyperparams


def toy_fields(knots, seed=0, scale=0.5, hyper=None):
    f = ParameterFieldSet.at_prior_mean(knots, hyper or default_hyperparams())
    rng = np.random.default_rng(seed)
    for name in FIELD_NAMES:
        f = f.with_basis(name, scale * rng.standard_normal(len(knots)))
    return f


def toy_obs(n, years=(2007,), seed=0, lat=(-10.0, 10.0), lon=(-20.0, 20.0), values=None):
    rng = np.random.default_rng(seed)
    yr = np.repeat(np.asarray(years), n)
    ll = np.column_stack([rng.uniform(*lat, len(yr)), rng.uniform(*lon, len(yr))])
    v = rng.normal(50.0, 3.0, len(yr)) if values is None else values
    fid = np.array([f"f{k // 3}" for k in range(len(yr))])
    return ObservationSet(yr, ll, v, fid, "GJ")


def two_knots():
    return KnotGrid([[0.0, -10.0], [0.0, 10.0]])


def three_knots():
    return KnotGrid([[0.0, -15.0], [0.0, 0.0], [5.0, 15.0]])


def oracle_log_target(fields, obs):
    """Dense log-likelihood summed over years plus every basis prior."""
    total = fields.log_prior()
    for yr in obs.years():
        idx = obs.year_indices(yr)
        ll = obs.latlon[idx]
        C = fields.point_params(ll).cov_matrix()
        r = obs.value[idx] - fields.mean(ll, np.full(len(idx), yr))
        total += cholesky_loglik(r, C)
    return total


def conjugate_oracle(fields, obs):
    """Bayesian linear regression: r = M b + e, e ~ N(0, Sigma), b ~ N(0, I)."""
    Ms, rs, Ss = [], [], []
    for yr in obs.years():
        idx = obs.year_indices(yr)
        ll = obs.latlon[idx]
        dt = yr - BASE_YEAR
        hm, hb = fields.hyper["mu2007"], fields.hyper["beta"]
        Am = fields.kriging("mu2007", ll)
        Ab = fields.kriging("beta", ll)
        Ms.append(np.hstack([hm.sd * Am, dt * hb.sd * Ab]))
        rs.append(obs.value[idx] - hm.mu - hb.mu * dt)
        Ss.append(fields.point_params(ll).cov_matrix())
    P = np.eye(Ms[0].shape[1])
    h = np.zeros(P.shape[0])
    for M, r, S in zip(Ms, rs, Ss):
        Si = np.linalg.inv(S)
        P += M.T @ Si @ M
        h += M.T @ Si @ r
    cov = np.linalg.inv(P)
    return cov @ h, cov
