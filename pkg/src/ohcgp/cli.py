"""Command-line entry point: simulate, init, fit, predict, cv, baseline.

Every run writes its outputs, the resolved config, and a manifest of
sha256 hashes into ``--out``. Failures print a JSON error record to stderr,
write ``error.json`` when the run directory exists, and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, substream
from .data_io import GJ, Mask, SimulationLayout, read_observations, simulate_dataset, write_observations
from .errors import InvalidArgument, NumericFailure
from .fields import (FIELD_NAMES, KnotGrid, ParameterFieldSet, constrain_fields, hyper_with_overrides)
from .initialization import initialize, write_window_csv
from .ohc import (OhcEngine, areal_weights, ohc_intervals, sign_agreement_map, trend_resample_and_integrate,
                  write_interval_table)
from .sampler import PosteriorChain, prepare_data, run_chain, save_checkpoint
from .validation import (levitus_predict, lofo_folds, ols_trend, run_cv, windowed_folds, write_cell_map,
                         write_reports)

log = logging.getLogger("ohcgp")

EXIT_INVALID = 2
EXIT_NUMERIC = 3
EXIT_OTHER = 1


# ---------------------------------------------------------------------------
# shared helpers


def _mask(cfg: RunConfig):
    return Mask.read(cfg.domain.mask_path) if cfg.domain.mask_path else None


def _knots(cfg: RunConfig):
    return KnotGrid.regular(cfg.knots.lat_step, cfg.knots.lon_step, tuple(cfg.domain.lat_range),
                            tuple(cfg.domain.lon_range), _mask(cfg))


def _grid(cfg: RunConfig):
    return areal_weights(cfg.predict.resolution_deg, _mask(cfg), tuple(cfg.domain.lat_range),
                         tuple(cfg.domain.lon_range), cfg.earth_radius_m)


def _obs_gj(path):
    return read_observations(path).in_units("GJ")


def _read_fields(path) -> ParameterFieldSet:
    return ParameterFieldSet.from_json(Path(path).read_text())


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _g(x):
    return "%.17g" % x


def write_manifest(out: Path, cfg: RunConfig, command: str):
    entries = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in ("manifest.json", "error.json") and not p.name.startswith("plan-"):
            data = p.read_bytes()
            entries.append({"path": str(p.relative_to(out)), "bytes": len(data),
                            "sha256": hashlib.sha256(data).hexdigest()})
    doc = {"command": command, "version": __version__, "seed": cfg.seed,
           "config_sha256": hashlib.sha256(cfg.to_json().encode()).hexdigest(), "artifacts": entries}
    _write_json(out / "manifest.json", doc)


def _require(path, what):
    if path is None or not Path(path).exists():
        raise InvalidArgument(f"{what} not found: {path}")


def _sampler_config(cfg: RunConfig):
    return cfg.sampler


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: RunConfig, args, out: Path):
    knots = _knots(cfg)
    hyper = hyper_with_overrides(cfg.hyper)
    rng = substream(cfg.seed, "truth")
    base = ParameterFieldSet.at_prior_mean(knots, hyper, cfg.sampler.stationarity_constraints)
    fields = base
    for name in FIELD_NAMES:
        b = cfg.simulate.truth_basis_scale * rng.standard_normal(base.basis[name].size)
        fields = fields.with_basis(name, b)
    layout = SimulationLayout(cfg.simulate.n_per_year, tuple(cfg.simulate.years), tuple(cfg.domain.lat_range),
                              tuple(cfg.domain.lon_range), _mask(cfg), cfg.simulate.profiles_per_float)
    seed_seq = np.random.SeedSequence(cfg.seed, spawn_key=(1,))
    obs, truth = simulate_dataset(fields, layout, np.random.default_rng(seed_seq), cfg.sampler.mode, units="GJ")
    write_observations(obs, out / "observations.csv")
    (out / "truth_fields.json").write_text(fields.to_json() + "\n")
    with open(out / "truth_latent.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "lat", "lon", "latent_j_per_m2"])
        for k in range(len(obs)):
            w.writerow([int(obs.year[k]), _g(obs.latlon[k, 0]), _g(obs.latlon[k, 1]), _g(truth.latent[k] * GJ)])


def cmd_init(cfg: RunConfig, args, out: Path):
    _require(args.data, "observation file")
    obs = _obs_gj(args.data)
    ini = initialize(obs, _knots(cfg), cfg.init.window_deg, cfg.init.grid_deg, cfg.init.min_obs,
                     tuple(cfg.domain.lat_range), tuple(cfg.domain.lon_range), cfg.sampler.mode,
                     cfg.sampler.stationarity_constraints, cfg.init.fit_hyper,
                     hyper_with_overrides(cfg.hyper))
    write_window_csv(out / "window_estimates.csv", ini.estimates)
    (out / "init_fields.json").write_text(ini.fields.to_json() + "\n")
    _write_json(out / "hyper_fits.json", {k: {"mu": f.hyper.mu, "sd": f.hyper.sd, "range_deg": f.hyper.range_deg,
                                              "boundary": f.boundary} for k, f in ini.hyper_fits.items()})


def cmd_fit(cfg: RunConfig, args, out: Path):
    _require(args.data, "observation file")
    obs = _obs_gj(args.data)
    if args.init:
        _require(args.init, "initialization file")
        init = _read_fields(args.init)
    else:
        init = ParameterFieldSet.at_prior_mean(_knots(cfg), hyper_with_overrides(cfg.hyper))
    if cfg.sampler.stationarity_constraints:
        init = constrain_fields(init, cfg.sampler.stationarity_constraints)
    sc = _sampler_config(cfg)
    data = prepare_data(obs, init, sc.likelihood, sc.m, sc.grouping, plan_cache=out / "plans")
    engine = None
    if sc.ohc_every > 0:
        engine = OhcEngine(data, _grid(cfg), init, cfg.predict.method, cfg.predict.m, sc.mode,
                           cfg.predict.include_nugget)
    rng = substream(cfg.seed, "sampler")
    chain = run_chain(sc, init, data, ohc_fn=engine, rng=rng)
    chain.write_samples(out / "samples.json")
    chain.write_trace_csv(out / "trace.csv")
    with open(out / "ohc_samples.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "year", "mu_ohc_j", "sigma_ohc_j"])
        for it, rec in chain.ohc:
            for yr in sorted(rec):
                w.writerow([it, yr, _g(rec[yr][0] * GJ), _g(rec[yr][1] * GJ)])
    _write_json(out / "summary.json", {"acceptance": chain.acceptance, "proposal_sd": chain.proposal_sd,
                                       "numeric_failures": chain.failures,
                                       "final_log_posterior": chain.log_post_trace[-1][1]})
    save_checkpoint(out / "checkpoint.json", chain.final_state, chain, rng)


def _read_ohc_samples(path, burn_in):
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            it = int(row["iteration"])
            if it <= burn_in and burn_in > 0:
                continue
            out.setdefault(int(row["year"]), ([], []))
            out[int(row["year"])][0].append(float(row["mu_ohc_j"]))
            out[int(row["year"])][1].append(float(row["sigma_ohc_j"]))
    return out


def cmd_predict(cfg: RunConfig, args, out: Path):
    _require(args.data, "observation file")
    _require(args.fit_dir, "fit directory")
    fit = Path(args.fit_dir)
    _require(fit / "samples.json", "chain samples")
    obs = _obs_gj(args.data)
    chain = PosteriorChain.read_samples(fit / "samples.json")
    burn = cfg.sampler.burn_in if cfg.sampler.n_iterations > cfg.sampler.burn_in else 0
    pc = cfg.predict
    ohc = _read_ohc_samples(fit / "ohc_samples.csv", burn) if (fit / "ohc_samples.csv").exists() else {}
    if ohc:
        intervals = ohc_intervals(ohc, pc.level, pc.resamples_per_sample, substream(cfg.seed, "intervals"))
        write_interval_table(out / "ohc_intervals.csv", intervals)
    grid = _grid(cfg)
    data = prepare_data(obs, chain.template, "dense")
    keep = chain.retained(burn) or [len(chain.samples) - 1]
    keep = keep[::max(pc.trend_every, 1)]
    tr = trend_resample_and_integrate(chain, data, grid, pc.trend_resamples, substream(cfg.seed, "trend"),
                                      mode=cfg.sampler.mode, samples=keep)
    pct = tr.percentile_fields((5, 50, 95))
    g = tr.grid
    with open(out / "trend_percentiles.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat", "lon", "p5", "p50", "p95"])
        for k in range(len(g)):
            w.writerow([_g(g.latlon[k, 0]), _g(g.latlon[k, 1])] + [_g(pct[q][k] * GJ) for q in (5, 50, 95)])
    sign = sign_agreement_map(tr.fields)
    with open(out / "sign_agreement.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat", "lon", "p_positive"])
        for k in range(len(g)):
            w.writerow([_g(g.latlon[k, 0]), _g(g.latlon[k, 1]), _g(sign[k])])
    ip = tr.integrated_percentiles((5, 50, 95))
    _write_json(out / "integrated_trend.json", {f"p{q}_j_per_year": v * GJ for q, v in ip.items()})


def _cv_variant(name, fields):
    if name == "full":
        return fields
    if name == "stationary":
        return constrain_fields(fields, ("theta_lat", "theta_lon", "nugget_ratio", "phi"))
    if name.startswith("stationary_"):
        field_name = name[len("stationary_"):]
        if field_name not in FIELD_NAMES:
            raise InvalidArgument(f"unknown field in variant {name!r}")
        return constrain_fields(fields, (field_name,))
    raise InvalidArgument(f"unknown cv variant {name!r}")


def _best_sample(fit_dir: Path) -> ParameterFieldSet:
    chain = PosteriorChain.read_samples(fit_dir / "samples.json")
    trace = {}
    with open(fit_dir / "trace.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            trace[int(row["iteration"])] = float(row["log_posterior"])
    k = max(range(len(chain.samples)), key=lambda i: (trace.get(chain.iterations[i], -np.inf), -i))
    return chain.fields_at(k)


def cmd_cv(cfg: RunConfig, args, out: Path):
    _require(args.data, "observation file")
    variants = args.variant or list(cfg.cv.variants)
    needs_fields = any(v != "levitus" for v in variants)
    fields = None
    if needs_fields:
        if args.fields:
            _require(args.fields, "parameter-field file")
            fields = _read_fields(args.fields)
        elif args.fit_dir:
            _require(Path(args.fit_dir) / "samples.json", "chain samples")
            fields = _best_sample(Path(args.fit_dir))
        else:
            raise InvalidArgument("GP variants need --fields or --fit-dir")
        for v in variants:
            if v != "levitus":
                _cv_variant(v, fields)
    obs = _obs_gj(args.data)
    folds = lofo_folds(obs) if cfg.cv.folds == "lofo" else windowed_folds(obs, cfg.cv.window_deg)
    reports = {}
    for v in variants:
        variant = "levitus" if v == "levitus" else _cv_variant(v, fields)
        reports[v] = run_cv(variant, obs, folds, cfg.cv.m, cfg.sampler.mode,
                            cfg.cv.levitus_radius_deg, cfg.cv.levitus_scale_deg)
        write_cell_map(out / f"cell_mae_{v}.csv", reports[v])
    write_reports(out / "scores.json", reports, cfg.cv.reference)


def cmd_baseline(cfg: RunConfig, args, out: Path):
    _require(args.data, "observation file")
    obs = read_observations(args.data)
    grid = _grid(cfg).active()
    rows = []
    for yr in obs.years():
        idx = obs.year_indices(yr)
        mu, _ = levitus_predict(obs.latlon[idx], obs.value[idx], grid.latlon, cfg.cv.levitus_radius_deg,
                                cfg.cv.levitus_scale_deg)
        rows.append((yr, float(grid.weights @ mu)))
    with open(out / "baseline_ohc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "ohc_j"])
        for yr, v in rows:
            w.writerow([yr, _g(v)])
    result = {"n_years": len(rows)}
    if len(rows) >= 3:
        t = ols_trend([r[0] for r in rows], [r[1] for r in rows])
        result.update({"slope_j_per_year": t.slope, "intercept_j": t.intercept,
                       "slope_ci95": list(t.slope_ci), "p_value": t.p_value})
    else:
        result["note"] = "fewer than three years; no OLS trend"
    _write_json(out / "ols_trend.json", result)


COMMANDS = {"simulate": cmd_simulate, "init": cmd_init, "fit": cmd_fit, "predict": cmd_predict,
            "cv": cmd_cv, "baseline": cmd_baseline}


def build_parser():
    p = argparse.ArgumentParser(prog="ohcgp", description="Non-stationary GP ocean heat content pipeline")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run config")
        s.add_argument("--out", required=True, help="run directory")
        s.add_argument("--set", nargs=2, action="append", metavar=("KEY", "VALUE"), default=[],
                       help="override a config key, e.g. --set sampler.n_iterations 100")
        if name != "simulate":
            s.add_argument("--data", help="canonical observation CSV")
        if name == "fit":
            s.add_argument("--init", help="initial parameter-field JSON")
        if name in ("predict", "cv"):
            s.add_argument("--fit-dir", help="directory written by `fit`")
        if name == "cv":
            s.add_argument("--fields", help="parameter-field JSON to validate")
            s.add_argument("--variant", action="append", help="levitus, full, stationary, stationary_<field>")
    return p


def _split_overrides(argv):
    """Turn free-form ``--a.b value`` pairs into overrides; return (rest, overrides)."""
    rest, over = [], []
    known = {"--config", "--out", "--data", "--init", "--fit-dir", "--fields", "--variant", "--set",
             "--version", "-h", "--help"}
    i = 0
    while i < len(argv):
        a = argv[i]
        if a.startswith("--") and a not in known and "." in a and i + 1 < len(argv):
            over.append((a[2:], argv[i + 1]))
            i += 2
            continue
        rest.append(a)
        i += 1
    return rest, over


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, extra = _split_overrides(argv)
    parser = build_parser()
    args = parser.parse_args(rest)
    out = Path(args.out)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, [tuple(kv) for kv in args.set] + extra)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json() + "\n")
        COMMANDS[args.command](cfg, args, out)
        write_manifest(out, cfg, args.command)
        return 0
    except (InvalidArgument, NumericFailure, OSError, ValueError) as exc:
        code = EXIT_NUMERIC if isinstance(exc, NumericFailure) else EXIT_INVALID
        record = {"command": args.command, "error": type(exc).__name__, "message": str(exc),
                  "index": getattr(exc, "index", None), "field": getattr(exc, "field", None)}
    except Exception as exc:  # report anything else in the same machine-readable form
        code = EXIT_OTHER
        record = {"command": args.command, "error": type(exc).__name__, "message": str(exc),
                  "traceback": traceback.format_exc()}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if out.is_dir():
        _write_json(out / "error.json", record)
    return code


if __name__ == "__main__":
    sys.exit(main())
