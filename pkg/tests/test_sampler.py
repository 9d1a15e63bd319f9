import math

import numpy as np
import pytest
from scipy import stats

from helpers import conjugate_oracle, oracle_log_target, three_knots, toy_fields, toy_obs, two_knots
from ohcgp import sampler as smp
from ohcgp.errors import InvalidArgument, NumericFailure
from ohcgp.fields import constrain_fields
from ohcgp.sampler import (ChainState, ModelData, SamplerConfig, adapt_proposals, conditional_covariance,
                           gibbs_mean_trend, initial_state, log_posterior, mean_trend_conditional, mh_step,
                           prepare_data, propose_basis, resume_chain, run_chain, save_checkpoint)


def dense_setup(n=20, knots=None, years=(2007, 2010), seed=0):
    knots = knots or three_knots()
    f = toy_fields(knots, seed)
    obs = toy_obs(n // len(years), years, seed)
    return f, obs, prepare_data(obs, f, "dense")


def test_config_validation():
    with pytest.raises(InvalidArgument):
        SamplerConfig(target_acceptance=1.0)
    with pytest.raises(InvalidArgument):
        SamplerConfig(likelihood="cholesky")
    with pytest.raises(InvalidArgument):
        SamplerConfig(initial_proposal_sd=0)


def test_propose_basis():
    rng = np.random.default_rng(0)
    b = np.array([0.3, -1.2, 2.0])
    draws = np.array([propose_basis(b, 0.5, rng) for _ in range(10_000)])
    se = 0.5 / math.sqrt(10_000)
    assert np.all(np.abs(draws.mean(axis=0) - b) < 3 * se)
    assert np.allclose(propose_basis(b, 1e-300, rng), b)
    with pytest.raises(InvalidArgument):
        propose_basis(b, 0.0, rng)
    # symmetric random walk: q(b'|b) = q(b|b')
    bp = draws[0]
    q = lambda x, y: stats.norm.logpdf(x, y, 0.5).sum()
    assert q(bp, b) == pytest.approx(q(b, bp))


def test_identical_proposal_always_accepted():
    f, obs, data = dense_setup()
    cfg = SamplerConfig(initial_proposal_sd=1e-300, likelihood="dense")
    state = initial_state(f, data, cfg)
    rng = np.random.default_rng(1)
    for name in smp.UPDATE_ORDER:
        state.proposal_sd[name] = 1e-300
        for _ in range(20):
            state, acc = mh_step(name, state, data, cfg, rng)
            assert acc


def test_mh_acceptance_matches_analytic_ratio():
    knots = two_knots()
    f = toy_fields(knots, 3)
    obs = toy_obs(8, (2007,), 3)
    data = prepare_data(obs, f, "dense")
    cfg = SamplerConfig(likelihood="dense")
    state = initial_state(f, data, cfg)
    state.proposal_sd["theta_lon"] = 0.8
    rng = np.random.default_rng(7)
    accepted, probs = 0, []
    base = oracle_log_target(f, obs)
    for _ in range(3000):
        # replay the proposal the step will draw: z then u, from a copy of the stream
        peek = np.random.default_rng()
        peek.bit_generator.state = rng.bit_generator.state
        bp = f.basis["theta_lon"] + 0.8 * peek.standard_normal(2)
        ratio = oracle_log_target(f.with_basis("theta_lon", bp), obs) - base
        probs.append(min(1.0, math.exp(min(ratio, 0.0))))
        state.fields, state.factors, state.logliks = f, *smp.factors_and_loglik(f, data, cfg.mode)
        _, acc = mh_step("theta_lon", state, data, cfg, rng)
        accepted += acc
    probs = np.array(probs)
    sd = math.sqrt(np.sum(probs * (1 - probs)))
    assert abs(accepted - probs.sum()) < 4 * sd
    assert 0.05 < probs.mean() < 0.95


def test_two_knot_chain_matches_enumerated_posterior():
    # only theta_lon moves; its 2-d posterior is enumerated on a grid
    knots = two_knots()
    f = toy_fields(knots, 5)
    obs = toy_obs(6, (2007,), 5)
    data = prepare_data(obs, f, "dense")
    cfg = SamplerConfig(likelihood="dense")
    g = np.linspace(-4.5, 4.5, 91)
    logp = np.array([[oracle_log_target(f.with_basis("theta_lon", [a, b]), obs) for b in g] for a in g])
    post = np.exp(logp - logp.max())
    marg = post.sum(axis=1)
    marg /= marg.sum()
    cdf = np.cumsum(marg)
    edges = np.interp([0.2, 0.4, 0.6, 0.8], cdf, g + (g[1] - g[0]) / 2)
    state = initial_state(f, data, cfg)
    state.proposal_sd["theta_lon"] = 1.2
    rng = np.random.default_rng(11)
    draws = []
    for it in range(30_000):
        state, _ = mh_step("theta_lon", state, data, cfg, rng)
        if it >= 1000 and it % 15 == 0:
            draws.append(state.fields.basis["theta_lon"][0])
    counts = np.bincount(np.searchsorted(edges, draws), minlength=5)
    chi2 = stats.chisquare(counts, np.full(5, len(draws) / 5))
    assert chi2.pvalue > 0.01, (counts, chi2)


def test_gibbs_conditional_matches_conjugate_oracle():
    f, obs, data = dense_setup(20)
    mean, L, (k_mu, k_beta) = mean_trend_conditional(f, data)
    assert (k_mu, k_beta) == (3, 3)
    om, oc = conjugate_oracle(f, obs)
    np.testing.assert_allclose(mean, om, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(conditional_covariance(L), oc, rtol=1e-8, atol=1e-12)


def test_gibbs_vecchia_full_conditioning_matches_dense():
    f, obs, dense = dense_setup(20)
    vec = prepare_data(obs, f, "vecchia", m=19)
    m1, L1, _ = mean_trend_conditional(f, dense)
    m2, L2, _ = mean_trend_conditional(f, vec)
    np.testing.assert_allclose(m2, m1, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(L2, L1, rtol=1e-8, atol=1e-10)


def test_gibbs_without_data_is_prior():
    f = toy_fields(three_knots())
    empty = ModelData(toy_obs(0), [])
    mean, L, _ = mean_trend_conditional(f, empty, factors=[])
    np.testing.assert_array_equal(mean, np.zeros(6))
    np.testing.assert_allclose(L, np.eye(6))


def test_gibbs_huge_nugget_approaches_prior():
    knots = three_knots()
    f = toy_fields(knots)
    h = dict(f.hyper)
    f = f.with_basis("nugget_ratio", np.full(3, (math.log(1e12) - h["nugget_ratio"].mu) / h["nugget_ratio"].sd))
    f = f.with_basis("phi", np.full(3, (0.0 - h["phi"].mu) / h["phi"].sd))
    obs = toy_obs(10, (2007, 2009))
    data = prepare_data(obs, f, "dense")
    mean, L, _ = mean_trend_conditional(f, data)
    assert np.abs(mean).max() < 1e-3
    np.testing.assert_allclose(conditional_covariance(L), np.eye(6), atol=1e-3)


def test_gibbs_draw_moments():
    f, obs, data = dense_setup(20)
    cfg = SamplerConfig(likelihood="dense")
    state = initial_state(f, data, cfg)
    mean, L, _ = mean_trend_conditional(f, data, state.factors)
    cov = conditional_covariance(L)
    rng = np.random.default_rng(3)
    draws = []
    for _ in range(4000):
        s = gibbs_mean_trend(state, data, cfg, rng)
        draws.append(np.concatenate([s.fields.basis["mu2007"], s.fields.basis["beta"]]))
    draws = np.array(draws)
    se = np.sqrt(np.diag(cov) / len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 4 * se)
    np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.15 * np.abs(cov).max())


def test_gibbs_updates_cached_likelihood():
    f, obs, data = dense_setup(20)
    cfg = SamplerConfig(likelihood="dense")
    state = gibbs_mean_trend(initial_state(f, data, cfg), data, cfg, np.random.default_rng(0))
    assert state.log_post == pytest.approx(oracle_log_target(state.fields, obs), rel=1e-10)


def test_adaptation_steps():
    f, obs, data = dense_setup()
    cfg = SamplerConfig(likelihood="dense")
    state = initial_state(f, data, cfg)
    state.batch_attempts["phi"] = state.batch_accepted["phi"] = 50
    state.batch_attempts["theta_lat"], state.batch_accepted["theta_lat"] = 50, 0
    sd0 = dict(state.proposal_sd)
    state = adapt_proposals(state, cfg)
    assert math.log(state.proposal_sd["phi"] / sd0["phi"]) == pytest.approx(0.01)
    assert math.log(state.proposal_sd["theta_lat"] / sd0["theta_lat"]) == pytest.approx(-0.01)
    assert state.batch_attempts["phi"] == 0 and state.batch_accepted["phi"] == 0
    assert state.proposal_sd["theta_lon"] == sd0["theta_lon"]
    # the cap binds until batch_index^-1/2 falls below it, then the step shrinks to zero
    deltas = [min(cfg.adapt_max_delta, k ** -0.5) for k in (1, 100, 10**4, 10**6)]
    assert deltas[0] == 0.01 and deltas[-1] < 0.01 and deltas[-1] < deltas[-2]


def test_adaptation_frozen_after_burn_in():
    f, obs, data = dense_setup(10)
    cfg = SamplerConfig(n_iterations=20, burn_in=5, adapt_batch=5, likelihood="dense", ohc_every=0)
    chain = run_chain(cfg, f, data, rng=np.random.default_rng(0))
    assert chain.final_state.batch_index == 1


def test_log_posterior_properties():
    f, obs, data = dense_setup(20)
    empty = ModelData(toy_obs(0), [])
    assert log_posterior(f, empty) == pytest.approx(f.log_prior())
    assert log_posterior(f, data) == pytest.approx(oracle_log_target(f, obs), rel=1e-10)
    vec = prepare_data(obs, f, "vecchia", m=9)
    assert log_posterior(f, vec) == pytest.approx(oracle_log_target(f, obs), rel=1e-9)
    # pulling one residual toward its mean raises the likelihood when it is far out
    mu = f.mean(obs.latlon, obs.year)
    far = obs.value.copy()
    far[0] = mu[0] + 100.0
    vals = []
    for s in (1.0, 0.5, 0.0):
        v = far.copy()
        v[0] = mu[0] + s * 100.0
        o2 = type(obs)(obs.year, obs.latlon, v, obs.float_id, obs.units)
        vals.append(log_posterior(f, prepare_data(o2, f, "dense")))
    assert vals[0] < vals[1] < vals[2]


def test_numeric_failure_counts_as_reject(monkeypatch):
    f, obs, data = dense_setup()
    cfg = SamplerConfig(likelihood="dense")
    state = initial_state(f, data, cfg)

    def boom(*a, **k):
        raise NumericFailure("singular")
    monkeypatch.setattr(smp, "factors_and_loglik", boom)
    before = state.fields.basis["phi"].copy()
    state, acc = mh_step("phi", state, data, cfg, np.random.default_rng(0))
    assert not acc and state.failures["phi"] == 1
    np.testing.assert_array_equal(state.fields.basis["phi"], before)


def test_constrained_field_proposes_one_scalar():
    f, obs, _ = dense_setup()
    c = constrain_fields(f, ("phi",))
    data = prepare_data(obs, c, "dense")
    cfg = SamplerConfig(likelihood="dense")
    state = initial_state(c, data, cfg)
    state.proposal_sd["phi"] = 1e-3
    state, acc = mh_step("phi", state, data, cfg, np.random.default_rng(0))
    assert state.fields.basis["phi"].size == 1
    with pytest.raises(InvalidArgument):
        mh_step("mu2007", state, data, cfg, np.random.default_rng(0))


def test_zero_iterations_and_determinism():
    f, obs, data = dense_setup(10)
    cfg = SamplerConfig(n_iterations=0, likelihood="dense")
    chain = run_chain(cfg, f, data)
    assert chain.iterations == [0] and len(chain.samples) == 1
    cfg = SamplerConfig(n_iterations=15, burn_in=5, adapt_batch=5, likelihood="dense", seed=4)
    a = run_chain(cfg, f, data)
    b = run_chain(cfg, f, data)
    for sa, sb in zip(a.samples, b.samples):
        for k in sa:
            assert sa[k].tobytes() == sb[k].tobytes()
    assert a.log_post_trace == b.log_post_trace


def test_thinning_and_ohc_schedule():
    f, obs, data = dense_setup(10)
    cfg = SamplerConfig(n_iterations=12, burn_in=4, thin=3, ohc_every=4, likelihood="dense")
    calls = []
    chain = run_chain(cfg, f, data, ohc_fn=lambda fields, factors: calls.append(1) or {2007: (1.0, 0.1)})
    assert chain.iterations == [0, 3, 6, 9, 12]
    assert [it for it, _ in chain.ohc] == [0, 4, 8, 12]
    assert len(chain.log_post_trace) == 13


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    f, obs, data = dense_setup(10)
    full_cfg = SamplerConfig(n_iterations=16, burn_in=8, adapt_batch=4, likelihood="dense")
    full = run_chain(full_cfg, f, data, rng=np.random.default_rng(9))
    half_cfg = SamplerConfig(n_iterations=8, burn_in=8, adapt_batch=4, likelihood="dense")
    rng = np.random.default_rng(9)
    half = run_chain(half_cfg, f, data, rng=rng)
    save_checkpoint(tmp_path / "ck.json", half.final_state, half, rng)
    resumed = resume_chain(tmp_path / "ck.json", full_cfg, data)
    assert resumed.iterations == full.iterations
    for sa, sb in zip(resumed.samples, full.samples):
        for k in sa:
            np.testing.assert_array_equal(sa[k], sb[k])
    assert resumed.acceptance == full.acceptance


def test_samples_round_trip(tmp_path):
    f, obs, data = dense_setup(10)
    chain = run_chain(SamplerConfig(n_iterations=3, likelihood="dense"), f, data)
    chain.write_samples(tmp_path / "s.json")
    back = type(chain).read_samples(tmp_path / "s.json")
    assert back.iterations == chain.iterations
    np.testing.assert_array_equal(back.fields_at(2).basis["phi"], chain.fields_at(2).basis["phi"])
    chain.write_trace_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "iteration,log_posterior"


def test_chain_state_rejects_bad_sd():
    f = toy_fields(three_knots())
    with pytest.raises(InvalidArgument):
        ChainState(f, {"phi": 0.0})
