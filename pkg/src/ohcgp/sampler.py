"""Adaptive Metropolis-within-Gibbs sampler over the knot basis vectors.

Each iteration updates theta_lat, theta_lon, nugget_ratio and phi by
random-walk Metropolis on their whole basis vector, then draws the mean and
trend bases jointly from their Gaussian full conditional.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .data_io import ObservationSet
from .dense import DenseFactor
from .errors import InvalidArgument, NumericFailure
from .fields import BASE_YEAR, COVARIANCE_FIELDS, MEAN_FIELDS, ParameterFieldSet, basis_log_prior
from .kernels import ConvolutionMode
from .vecchia import VecchiaPlan, build_U, cached_plan

log = logging.getLogger(__name__)

UPDATE_ORDER = ("theta_lat", "theta_lon", "nugget_ratio", "phi")


@dataclass
class SamplerConfig:
    n_iterations: int = 1000
    burn_in: int = 500
    target_acceptance: float = 0.44
    adapt_batch: int = 50
    adapt_max_delta: float = 0.01
    initial_proposal_sd: float = 0.05
    ohc_every: int = 10
    thin: int = 1
    seed: int = 0
    stationarity_constraints: tuple = ()
    mode: str = ConvolutionMode.GAUSSIAN_APPROX.value
    likelihood: str = "vecchia"        # "vecchia" or "dense"
    m: int = 25
    grouping: bool = True
    n_threads: int = 1

    def __post_init__(self):
        if not 0 < self.target_acceptance < 1:
            raise InvalidArgument("target_acceptance must lie in (0, 1)")
        if self.likelihood not in ("vecchia", "dense"):
            raise InvalidArgument("likelihood must be 'vecchia' or 'dense'")
        if self.n_iterations < 0 or self.burn_in < 0 or self.adapt_batch < 1 or self.thin < 1:
            raise InvalidArgument("iteration counts must be nonnegative and batch/thin positive")
        if self.initial_proposal_sd <= 0:
            raise InvalidArgument("initial_proposal_sd must be positive")
        self.stationarity_constraints = tuple(self.stationarity_constraints)
        ConvolutionMode(self.mode)


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class YearBlock:
    year: int
    idx: np.ndarray
    latlon: np.ndarray
    values: np.ndarray
    kriging: dict
    plan: VecchiaPlan | None


@dataclass
class ModelData:
    obs: ObservationSet
    blocks: list

    @property
    def n(self):
        return len(self.obs)


def prepare_data(obs: ObservationSet, fields: ParameterFieldSet, likelihood="vecchia", m=25,
                 grouping=True, plan_cache=None) -> ModelData:
    """Split observations by year; cache kriging matrices and Vecchia plans."""
    blocks = []
    for yr in obs.years():
        idx = obs.year_indices(yr)
        ll = obs.latlon[idx]
        kr = {name: fields.kriging(name, ll) for name in COVARIANCE_FIELDS + MEAN_FIELDS}
        plan = cached_plan(ll, m, plan_cache, grouping) if likelihood == "vecchia" else None
        blocks.append(YearBlock(yr, idx, ll, obs.value[idx], kr, plan))
    return ModelData(obs, blocks)


def _factor(fields, block, mode):
    params = fields.point_params(block.latlon, mode, kriging=block.kriging)
    if block.plan is None:
        return DenseFactor(params.cov_matrix())
    return build_U(block.plan, params)


def _residual(fields, block):
    return block.values - fields.mean(block.latlon, np.full(len(block.idx), block.year), kriging=block.kriging)


def _map(fn, items, n_threads):
    if n_threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n_threads) as ex:
        return list(ex.map(fn, items))


def factors_and_loglik(fields, data: ModelData, mode, n_threads=1):
    """Per-year factors and log-likelihoods, summed in year order."""
    def one(block):
        f = _factor(fields, block, mode)
        return f, f.loglik(_residual(fields, block))
    out = _map(one, data.blocks, n_threads)
    return [o[0] for o in out], [o[1] for o in out]


def log_posterior(fields: ParameterFieldSet, data: ModelData, mode=ConvolutionMode.GAUSSIAN_APPROX,
                  n_threads=1) -> float:
    """Sum over years of the (Vecchia or dense) log-likelihood plus all basis priors."""
    _, ll = factors_and_loglik(fields, data, mode, n_threads)
    return float(math.fsum(ll) + fields.log_prior())


# ---------------------------------------------------------------------------
# chain state


@dataclass
class ChainState:
    fields: ParameterFieldSet
    proposal_sd: dict
    iteration: int = 0
    batch_accepted: dict = field(default_factory=dict)
    batch_attempts: dict = field(default_factory=dict)
    total_accepted: dict = field(default_factory=dict)
    total_attempts: dict = field(default_factory=dict)
    post_accepted: dict = field(default_factory=dict)
    post_attempts: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    batch_index: int = 0
    factors: list = field(default_factory=list, repr=False)
    logliks: list = field(default_factory=list)
    log_post: float = float("nan")

    def __post_init__(self):
        if any(v <= 0 for v in self.proposal_sd.values()):
            raise InvalidArgument("proposal sds must be positive")
        for d in (self.batch_accepted, self.batch_attempts, self.total_accepted, self.total_attempts,
                  self.post_accepted, self.post_attempts, self.failures):
            for name in COVARIANCE_FIELDS:
                d.setdefault(name, 0)

    def acceptance_rates(self, post_burn_in=True) -> dict:
        acc, att = (self.post_accepted, self.post_attempts) if post_burn_in else (self.total_accepted, self.total_attempts)
        return {k: (acc[k] / att[k] if att[k] else float("nan")) for k in COVARIANCE_FIELDS}


def initial_state(fields, data, config: SamplerConfig) -> ChainState:
    state = ChainState(fields, {k: float(config.initial_proposal_sd) for k in COVARIANCE_FIELDS})
    state.factors, state.logliks = factors_and_loglik(fields, data, config.mode, config.n_threads)
    state.log_post = float(math.fsum(state.logliks) + fields.log_prior())
    return state


def propose_basis(b, sd, rng):
    """Symmetric random-walk proposal b + sd * z."""
    if sd <= 0:
        raise InvalidArgument("proposal sd must be positive")
    b = np.asarray(b, float)
    return b + sd * rng.standard_normal(b.shape)


def mh_step(name, state: ChainState, data: ModelData, config: SamplerConfig, rng, post_burn_in=False):
    """One Metropolis-Hastings update of a covariance field's basis vector.

    Numeric failure of the proposal counts as a rejection.
    """
    if name not in COVARIANCE_FIELDS:
        raise InvalidArgument(f"{name} is not a Metropolis-updated field")
    b = state.fields.basis[name]
    b_new = propose_basis(b, state.proposal_sd[name], rng)
    log_u = math.log(rng.uniform())
    proposal = state.fields.with_basis(name, b_new)
    state.batch_attempts[name] += 1
    state.total_attempts[name] += 1
    if post_burn_in:
        state.post_attempts[name] += 1
    try:
        factors, logliks = factors_and_loglik(proposal, data, config.mode, config.n_threads)
    except NumericFailure as exc:
        state.failures[name] += 1
        log.warning("rejecting %s proposal at iteration %d: %s", name, state.iteration, exc)
        return state, False
    ratio = (math.fsum(logliks) + basis_log_prior(b_new)) - (math.fsum(state.logliks) + basis_log_prior(b))
    if not (log_u < ratio):
        return state, False
    state.fields = proposal
    state.factors, state.logliks = factors, logliks
    state.batch_accepted[name] += 1
    state.total_accepted[name] += 1
    if post_burn_in:
        state.post_accepted[name] += 1
    state.log_post = float(math.fsum(logliks) + proposal.log_prior())
    return state, True


# ---------------------------------------------------------------------------
# Gibbs step for the mean and trend


def _design(fields, block, name):
    h = fields.hyper[name]
    if name in fields.constrained:
        return np.full((len(block.idx), 1), h.sd)
    return h.sd * block.kriging[name]


def mean_trend_conditional(fields: ParameterFieldSet, data: ModelData, factors=None, mode=None):
    """Mean and covariance of the joint Gaussian conditional of [b_mu2007, b_beta].

    Uses the per-year factors (U U^T or the dense Cholesky) in place of the
    inverse observation covariance.
    """
    k_mu = fields.basis["mu2007"].size
    k_beta = fields.basis["beta"].size
    k = k_mu + k_beta
    if factors is None:
        factors, _ = factors_and_loglik(fields, data, mode or ConvolutionMode.GAUSSIAN_APPROX)
    prec = np.eye(k)
    h = np.zeros(k)
    for block, f in zip(data.blocks, factors):
        dt = block.year - BASE_YEAR
        M = np.hstack([_design(fields, block, "mu2007"), dt * _design(fields, block, "beta")])
        r = block.values - fields.hyper["mu2007"].mu - fields.hyper["beta"].mu * dt
        WM = f.whiten(M)
        prec += WM.T @ WM
        h += WM.T @ f.whiten(r)
    try:
        L = cholesky(prec, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure("mean/trend posterior precision is not positive definite",
                             field="mu2007") from exc
    mean = cho_solve((L, True), h)
    return mean, L, (k_mu, k_beta)


def gibbs_mean_trend(state: ChainState, data: ModelData, config: SamplerConfig, rng) -> ChainState:
    mean, L, (k_mu, _) = mean_trend_conditional(state.fields, data, state.factors)
    draw = mean + solve_triangular(L.T, rng.standard_normal(len(mean)), lower=False)
    fields = state.fields.with_basis("mu2007", draw[:k_mu]).with_basis("beta", draw[k_mu:])
    state.fields = fields
    state.logliks = [f.loglik(_residual(fields, b)) for f, b in zip(state.factors, data.blocks)]
    state.log_post = float(math.fsum(state.logliks) + fields.log_prior())
    return state


def conditional_covariance(L):
    """Covariance from the lower Cholesky factor of a precision matrix."""
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    return Linv.T @ Linv


def adapt_proposals(state: ChainState, config: SamplerConfig) -> ChainState:
    """Diminishing adaptation of each field's log proposal sd toward the target rate."""
    state.batch_index += 1
    delta = min(config.adapt_max_delta, state.batch_index ** -0.5)
    for name in COVARIANCE_FIELDS:
        att = state.batch_attempts[name]
        if att:
            rate = state.batch_accepted[name] / att
            step = delta if rate > config.target_acceptance else -delta
            state.proposal_sd[name] = float(state.proposal_sd[name] * math.exp(step))
        state.batch_accepted[name] = 0
        state.batch_attempts[name] = 0
    return state


# ---------------------------------------------------------------------------
# chains


@dataclass
class PosteriorChain:
    iterations: list = field(default_factory=list)     # iteration of each stored sample
    samples: list = field(default_factory=list)        # basis dicts
    log_post_trace: list = field(default_factory=list) # (iteration, value), every iteration
    ohc: list = field(default_factory=list)            # (iteration, {year: (mu, sigma)})
    acceptance: dict = field(default_factory=dict)
    proposal_sd: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    template: ParameterFieldSet | None = None
    final_state: ChainState | None = field(default=None, repr=False)

    def fields_at(self, k) -> ParameterFieldSet:
        f = self.template
        for name, b in self.samples[k].items():
            f = f.with_basis(name, b)
        return f

    def retained(self, burn_in) -> list:
        return [k for k, it in enumerate(self.iterations) if it > burn_in]

    def ohc_arrays(self, burn_in=0):
        """{year: (mu array, sigma array)} over OHC records after burn-in."""
        out = {}
        for it, rec in self.ohc:
            if it <= burn_in and it != 0:
                continue
            for yr, (mu, sd) in rec.items():
                out.setdefault(yr, ([], []))
                out[yr][0].append(mu)
                out[yr][1].append(sd)
        return {yr: (np.array(a), np.array(b)) for yr, (a, b) in out.items()}

    def write_trace_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "log_posterior"])
            for it, v in self.log_post_trace:
                w.writerow([it, "%.17g" % v])

    def write_samples(self, path):
        doc = {"format": "ohcgp.samples/1", "template": self.template.to_dict(),
               "iterations": self.iterations,
               "samples": [{k: v.tolist() for k, v in s.items()} for s in self.samples]}
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True)

    @classmethod
    def read_samples(cls, path) -> "PosteriorChain":
        with open(path) as fh:
            doc = json.load(fh)
        template = ParameterFieldSet.from_dict(doc["template"])
        samples = [{k: np.array(v) for k, v in s.items()} for s in doc["samples"]]
        return cls(iterations=list(doc["iterations"]), samples=samples, template=template)


def _snapshot(fields):
    return {k: v.copy() for k, v in fields.basis.items()}


def _record(chain, state, config, ohc_fn):
    it = state.iteration
    if it % config.thin == 0:
        chain.iterations.append(it)
        chain.samples.append(_snapshot(state.fields))
    chain.log_post_trace.append((it, state.log_post))
    if ohc_fn is not None and it % config.ohc_every == 0:
        chain.ohc.append((it, ohc_fn(state.fields, state.factors)))


def run_chain(config: SamplerConfig, init: ParameterFieldSet, data: ModelData,
              ohc_fn: Callable | None = None, rng=None, state: ChainState | None = None,
              chain: PosteriorChain | None = None, checkpoint: str | None = None,
              checkpoint_every: int = 0) -> PosteriorChain:
    """Run (or resume) a chain.

    ``ohc_fn(fields, factors)`` returns {year: (mu_ohc, sigma_ohc)} and is
    called on the initial state and every ``ohc_every`` iterations.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    if state is None:
        state = initial_state(init, data, config)
        chain = PosteriorChain(template=init)
        _record(chain, state, config, ohc_fn)
    while state.iteration < config.n_iterations:
        state.iteration += 1
        post = state.iteration > config.burn_in
        for name in UPDATE_ORDER:
            state, _ = mh_step(name, state, data, config, rng, post_burn_in=post)
        try:
            state = gibbs_mean_trend(state, data, config, rng)
        except NumericFailure as exc:
            raise NumericFailure(f"Gibbs step failed at iteration {state.iteration}: {exc}",
                                 index=state.iteration, field="mu2007/beta") from exc
        if not post and state.iteration % config.adapt_batch == 0:
            state = adapt_proposals(state, config)
        _record(chain, state, config, ohc_fn)
        if checkpoint and checkpoint_every and state.iteration % checkpoint_every == 0:
            save_checkpoint(checkpoint, state, chain, rng)
    chain.acceptance = state.acceptance_rates(post_burn_in=config.n_iterations > config.burn_in)
    chain.proposal_sd = dict(state.proposal_sd)
    chain.failures = dict(state.failures)
    chain.final_state = state
    return chain


# ---------------------------------------------------------------------------
# checkpoints

_COUNTERS = ("batch_accepted", "batch_attempts", "total_accepted", "total_attempts",
             "post_accepted", "post_attempts", "failures")


def save_checkpoint(path, state: ChainState, chain: PosteriorChain, rng):
    doc = {
        "format": "ohcgp.checkpoint/1",
        "fields": state.fields.to_dict(),
        "proposal_sd": state.proposal_sd,
        "iteration": state.iteration,
        "batch_index": state.batch_index,
        "counters": {k: getattr(state, k) for k in _COUNTERS},
        "rng": rng.bit_generator.state,
        "chain": {
            "iterations": chain.iterations,
            "samples": [{k: v.tolist() for k, v in s.items()} for s in chain.samples],
            "log_post_trace": chain.log_post_trace,
            "ohc": [(it, {str(y): list(v) for y, v in rec.items()}) for it, rec in chain.ohc],
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def resume_chain(path, config: SamplerConfig, data: ModelData, ohc_fn=None) -> PosteriorChain:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "ohcgp.checkpoint/1":
        raise InvalidArgument("not a chain checkpoint")
    fields = ParameterFieldSet.from_dict(doc["fields"])
    state = ChainState(fields, dict(doc["proposal_sd"]), iteration=doc["iteration"],
                       batch_index=doc["batch_index"], **{k: dict(v) for k, v in doc["counters"].items()})
    state.factors, state.logliks = factors_and_loglik(fields, data, config.mode, config.n_threads)
    state.log_post = float(math.fsum(state.logliks) + fields.log_prior())
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng"]
    c = doc["chain"]
    chain = PosteriorChain(iterations=list(c["iterations"]),
                           samples=[{k: np.array(v) for k, v in s.items()} for s in c["samples"]],
                           log_post_trace=[tuple(t) for t in c["log_post_trace"]],
                           ohc=[(it, {int(y): tuple(v) for y, v in rec.items()}) for it, rec in c["ohc"]],
                           template=fields)
    return run_chain(config, fields, data, ohc_fn, rng=rng, state=state, chain=chain)


def config_dict(config: SamplerConfig) -> dict:
    return asdict(config)
