"""Run configuration: nested dataclasses, JSON files, dotted overrides, seed streams."""
from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidArgument
from .sampler import SamplerConfig


@dataclass
class DomainConfig:
    lat_range: tuple = (-90.0, 90.0)
    lon_range: tuple = (-180.0, 180.0)
    mask_path: Optional[str] = None


@dataclass
class KnotConfig:
    lat_step: float = 8.0
    lon_step: float = 16.0


@dataclass
class SimulateConfig:
    n_per_year: int = 200
    years: tuple = (2007, 2008, 2009)
    # truth fields: prior mean plus truth_basis_scale * N(0, I) basis draws
    truth_basis_scale: float = 0.5
    profiles_per_float: int = 3


@dataclass
class InitConfig:
    window_deg: float = 20.0
    grid_deg: float = 6.0
    min_obs: int = 10
    fit_hyper: bool = True


@dataclass
class PredictConfig:
    resolution_deg: float = 5.0
    method: str = "vecchia"
    m: int = 25
    level: float = 0.95
    resamples_per_sample: int = 100
    trend_resamples: int = 10
    trend_every: int = 10
    include_nugget: bool = False


@dataclass
class CvConfig:
    variants: tuple = ("full", "levitus")
    folds: str = "lofo"
    window_deg: float = 2.0
    m: Optional[int] = None
    levitus_radius_deg: float = 8.0
    levitus_scale_deg: float = 4.0
    reference: str = "levitus"


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    rho_cp: float = 4.1e6
    earth_radius_m: float = 6_371_000.0
    hyper: Optional[dict] = None     # per-field overrides of {mu, sd, range_deg}
    domain: DomainConfig = field(default_factory=DomainConfig)
    knots: KnotConfig = field(default_factory=KnotConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    init: InitConfig = field(default_factory=InitConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    cv: CvConfig = field(default_factory=CvConfig)

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise InvalidArgument(f"expected an object for {cls.__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise InvalidArgument(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        cur = getattr(defaults, name)
        if dataclasses.is_dataclass(cur):
            kwargs[name] = _build(type(cur), value)
        elif isinstance(cur, tuple) and isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidArgument(str(exc)) from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a JSON config (or defaults) and apply ``key=value`` dotted overrides."""
    data = {}
    if path is not None:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidArgument(f"config {path} is not valid JSON: {exc}") from exc
    base = config_from_dict(data).to_dict()
    for key, raw in overrides:
        _set_dotted(base, key, _parse_value(raw))
    return config_from_dict(base)


def _parse_value(raw):
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, TypeError):
        return raw


def _set_dotted(d, key, value):
    parts = key.replace("-", "_").split(".")
    if parts[0] == "hyper" and len(parts) == 3:
        # hyper.<field>.<attr> creates entries on demand
        if d.get("hyper") is None:
            d["hyper"] = {}
        d["hyper"].setdefault(parts[1], {})[parts[2]] = value
        return
    cur = d
    for p in parts[:-1]:
        if not isinstance(cur, dict) or p not in cur:
            raise InvalidArgument(f"unknown config key {key!r}")
        cur = cur[p]
        if cur is None:
            raise InvalidArgument(f"cannot set {key!r} below a null value")
    if not isinstance(cur, dict) or parts[-1] not in cur:
        raise InvalidArgument(f"unknown config key {key!r}")
    cur[parts[-1]] = value


def substream(seed: int, name: str) -> np.random.Generator:
    """Named random stream: SeedSequence(seed, spawn_key=(crc32(name),))."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))
