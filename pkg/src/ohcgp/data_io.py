"""Profiles, vertical integration, masks, synthetic data, and file formats."""
from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .geometry import as_latlon, normalize_lon
from .kernels import ConvolutionMode

RHO_CP = 4.1e6          # J / (m^3 degC), seawater density times specific heat
MAX_DEPTH = 2000.0
MIN_MAX_DEPTH = 1900.0
GJ = 1e9
SIMULATION_GUARD = 3000


@dataclass
class ProfileRecord:
    float_id: str
    year: int
    lat: float
    lon: float
    depths: np.ndarray
    temps: np.ndarray

    def __post_init__(self):
        self.depths = np.asarray(self.depths, float)
        self.temps = np.asarray(self.temps, float)
        if self.depths.shape != self.temps.shape or self.depths.ndim != 1 or self.depths.size == 0:
            raise InvalidArgument("depths and temperatures must be matching nonempty vectors")
        if not (np.all(np.isfinite(self.depths)) and np.all(np.isfinite(self.temps))):
            raise InvalidArgument("non-finite depth or temperature")
        if np.any(np.diff(self.depths) <= 0):
            raise InvalidArgument("depths must be strictly increasing")
        if self.depths[0] < 0:
            raise InvalidArgument("negative depth")


def vertical_integration(profile: ProfileRecord, rho_cp=RHO_CP) -> float:
    """rho c_p times the integral over [0, 2000] m of the interpolated temperature.

    Linear between readings, constant above the shallowest and below the
    deepest. The integral of the piecewise-linear interpolant is taken
    exactly; for readings at integer meters this equals the trapezoid sum over
    the per-meter interpolated values. Raises InvalidArgument for profiles
    shallower than 1900 m.
    """
    if profile.depths[-1] < MIN_MAX_DEPTH:
        raise InvalidArgument(f"profile max depth {profile.depths[-1]} m is shallower than {MIN_MAX_DEPTH} m")
    inside = profile.depths[(profile.depths > 0) & (profile.depths < MAX_DEPTH)]
    z = np.concatenate([[0.0], inside, [MAX_DEPTH]])
    t = np.interp(z, profile.depths, profile.temps)
    integral = float(np.sum(0.5 * (t[1:] + t[:-1]) * np.diff(z)))
    return rho_cp * integral


# ---------------------------------------------------------------------------
# masks


@dataclass
class Mask:
    """Boolean raster; cell (i, j) covers [lat0 + i*res, lat0 + (i+1)*res) in latitude.

    Points are assigned to cells by flooring; latitude 90 falls in the top row.
    """

    values: np.ndarray
    resolution: float = 1.0
    lat0: float = -90.0
    lon0: float = -180.0

    def __post_init__(self):
        self.values = np.asarray(self.values, bool)
        nlat, nlon = self.values.shape
        if not (math.isclose(nlat * self.resolution, 180.0) and math.isclose(nlon * self.resolution, 360.0)):
            raise InvalidArgument("mask must cover [-90, 90] x [-180, 180)")

    @classmethod
    def full(cls, resolution=1.0, value=True):
        nlat, nlon = int(round(180 / resolution)), int(round(360 / resolution))
        return cls(np.full((nlat, nlon), value), resolution)

    def cell_index(self, lat, lon):
        lat = np.asarray(lat, float)
        lon = normalize_lon(np.asarray(lon, float))
        nlat, nlon = self.values.shape
        i = np.clip(np.floor((lat - self.lat0) / self.resolution).astype(int), 0, nlat - 1)
        j = np.floor(np.mod(lon - self.lon0, 360.0) / self.resolution).astype(int) % nlon
        return i, j

    def contains(self, lat, lon):
        i, j = self.cell_index(lat, lon)
        return self.values[i, j]

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(f"resolution {self.resolution!r}\n")
            fh.write(f"origin {self.lat0!r} {self.lon0!r}\n")
            for row in self.values[::-1]:
                fh.write(" ".join("1" if v else "0" for v in row) + "\n")

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            lines = [ln.split() for ln in fh if ln.strip()]
        header = {ln[0]: ln[1:] for ln in lines[:2]}
        try:
            res = float(header["resolution"][0])
            lat0, lon0 = (float(v) for v in header["origin"])
        except (KeyError, ValueError, IndexError) as exc:
            raise InvalidArgument("mask header must give 'resolution' and 'origin'") from exc
        rows = np.array([[c == "1" for c in ln] for ln in lines[2:]], dtype=bool)
        return cls(rows[::-1], res, lat0, lon0)


# ---------------------------------------------------------------------------
# observations


@dataclass
class ObservationSet:
    """Observations of one or more years, values in ``units`` per m^2."""

    year: np.ndarray
    latlon: np.ndarray
    value: np.ndarray
    float_id: np.ndarray
    units: str = "J"

    def __post_init__(self):
        self.year = np.asarray(self.year, dtype=int).ravel()
        self.latlon = as_latlon(self.latlon) if len(self.year) else np.zeros((0, 2))
        self.value = np.asarray(self.value, dtype=float).ravel()
        self.float_id = np.asarray(self.float_id, dtype=str).ravel() if len(self.year) else np.zeros(0, dtype=str)
        n = len(self.year)
        if not (len(self.latlon) == len(self.value) == len(self.float_id) == n):
            raise InvalidArgument("observation columns have different lengths")
        if not np.all(np.isfinite(self.value)):
            raise InvalidArgument("non-finite observation values")

    def __len__(self):
        return len(self.year)

    @classmethod
    def empty(cls, units="J"):
        return cls(np.zeros(0, int), np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=str), units)

    def years(self):
        return sorted(set(self.year.tolist()))

    def subset(self, idx) -> "ObservationSet":
        idx = np.asarray(idx)
        return ObservationSet(self.year[idx], self.latlon[idx], self.value[idx], self.float_id[idx], self.units)

    def year_indices(self, yr):
        return np.flatnonzero(self.year == yr)

    def in_units(self, units) -> "ObservationSet":
        scale = {"J": 1.0, "GJ": GJ}
        if units not in scale or self.units not in scale:
            raise InvalidArgument(f"unknown units {units!r}")
        factor = scale[self.units] / scale[units]
        return ObservationSet(self.year, self.latlon, self.value * factor, self.float_id, units)


@dataclass
class RejectionReport:
    kept: dict = field(default_factory=dict)
    rejected: dict = field(default_factory=dict)
    reasons: list = field(default_factory=list)   # (where, reason)

    def add_kept(self, year):
        self.kept[year] = self.kept.get(year, 0) + 1

    def add_rejected(self, year, where, reason):
        self.rejected[year] = self.rejected.get(year, 0) + 1
        self.reasons.append((where, reason))

    def to_dict(self):
        return {"kept": {str(k): v for k, v in sorted(self.kept.items())},
                "rejected": {str(k): v for k, v in sorted(self.rejected.items(), key=lambda kv: str(kv[0]))},
                "reasons": [list(r) for r in self.reasons]}


PROFILE_COLUMNS = ("float_id", "year", "lat", "lon", "depth_m", "temp_c")
CANONICAL_COLUMNS = ("year", "lat", "lon", "float_id", "h_obs_j_per_m2")


def _fmt(x):
    return "%.17g" % x


def ingest_profiles(path, mask: Mask | None = None, rho_cp=RHO_CP):
    """Read a long-format profile CSV, integrate each profile, and filter.

    Rows are grouped into profiles by (float_id, year, lat, lon) in order of
    first appearance. Returns (ObservationSet in J/m^2, RejectionReport).
    """
    report = RejectionReport()
    profiles = OrderedDict()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return ObservationSet.empty(), report
        missing = set(PROFILE_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise InvalidArgument(f"profile file lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                year = int(row["year"])
                lat, lon = float(row["lat"]), float(row["lon"])
                depth, temp = float(row["depth_m"]), float(row["temp_c"])
                fid = row["float_id"].strip()
                if not fid:
                    raise ValueError("empty float_id")
                if not all(map(math.isfinite, (lat, lon, depth, temp))):
                    raise ValueError("non-finite value")
                if not -90.0 <= lat <= 90.0:
                    raise ValueError(f"latitude {lat} outside [-90, 90]")
            except (TypeError, ValueError) as exc:
                report.add_rejected(row.get("year") or "unknown", f"line {lineno}", f"malformed row: {exc}")
                continue
            key = (fid, year, lat, lon)
            profiles.setdefault(key, []).append((depth, temp))
    years, locs, vals, fids = [], [], [], []
    for (fid, year, lat, lon), pairs in profiles.items():
        where = f"profile {fid}/{year}/{lat!r}/{lon!r}"
        pairs.sort()
        try:
            prof = ProfileRecord(fid, year, lat, lon, [p[0] for p in pairs], [p[1] for p in pairs])
            h = vertical_integration(prof, rho_cp)
        except InvalidArgument as exc:
            report.add_rejected(year, where, str(exc))
            continue
        if mask is not None and not bool(mask.contains(lat, lon)):
            report.add_rejected(year, where, "masked")
            continue
        report.add_kept(year)
        years.append(year)
        locs.append((lat, lon))
        vals.append(h)
        fids.append(fid)
    if not years:
        return ObservationSet.empty(), report
    return ObservationSet(years, np.array(locs), vals, fids), report


def write_observations(obs: ObservationSet, path):
    """Canonical CSV, values in J/m^2 with 17 significant digits."""
    o = obs.in_units("J")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANONICAL_COLUMNS)
        for k in range(len(o)):
            w.writerow([int(o.year[k]), _fmt(o.latlon[k, 0]), _fmt(o.latlon[k, 1]), o.float_id[k], _fmt(o.value[k])])


def read_observations(path) -> ObservationSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return ObservationSet.empty()
        missing = set(CANONICAL_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise InvalidArgument(f"observation file lacks columns {sorted(missing)}")
        rows = list(reader)
    if not rows:
        return ObservationSet.empty()
    try:
        return ObservationSet([int(r["year"]) for r in rows],
                              np.array([[float(r["lat"]), float(r["lon"])] for r in rows]),
                              [float(r["h_obs_j_per_m2"]) for r in rows],
                              [r["float_id"] for r in rows])
    except ValueError as exc:
        raise InvalidArgument(f"malformed observation file: {exc}") from exc


def apply_mask(obs: ObservationSet, mask: Mask):
    """Drop observations in masked cells; returns (kept set, number dropped)."""
    if len(obs) == 0:
        return obs, 0
    keep = mask.contains(obs.latlon[:, 0], obs.latlon[:, 1])
    return obs.subset(np.flatnonzero(keep)), int(np.sum(~keep))


# ---------------------------------------------------------------------------
# simulation


def uniform_locations(n, rng, lat_range=(-90.0, 90.0), lon_range=(-180.0, 180.0), mask=None,
                      max_tries=1000):
    """Points uniform in area (uniform in sin(lat)) over the unmasked region."""
    lo, hi = np.sin(np.radians(lat_range[0])), np.sin(np.radians(lat_range[1]))
    out = np.zeros((0, 2))
    for _ in range(max_tries):
        need = n - len(out)
        if need <= 0:
            break
        k = max(2 * need, 16)
        lat = np.degrees(np.arcsin(rng.uniform(lo, hi, k)))
        lon = rng.uniform(lon_range[0], lon_range[1], k)
        pts = np.column_stack([lat, lon])
        if mask is not None:
            pts = pts[mask.contains(lat, lon)]
        out = np.vstack([out, pts[:need]])
    if len(out) < n:
        raise InvalidArgument("could not place locations in the unmasked region")
    return out


@dataclass
class SimulationLayout:
    n_per_year: int
    years: tuple
    lat_range: tuple = (-90.0, 90.0)
    lon_range: tuple = (-180.0, 180.0)
    mask: Mask | None = None
    profiles_per_float: int = 3
    float_spread_deg: float = 1.0


@dataclass
class SimulationTruth:
    fields: object
    latent: np.ndarray          # latent field at each observation (model units)
    extra_latlon: np.ndarray    # optional additional locations
    extra_latent: dict          # year -> latent values at extra_latlon


def simulate_dataset(fields, layout: SimulationLayout, rng, mode=ConvolutionMode.GAUSSIAN_APPROX,
                     extra_locations=None, units="GJ"):
    """Draw a dataset from the model.

    Per year, locations are sampled in float clusters of ``profiles_per_float``
    nearby profiles, the latent field is drawn jointly (with any extra
    locations) from the dense GP, and nugget noise is added. ``rng`` may be a
    Generator or a seed; each year uses its own child stream.
    """
    from .dense import _chol

    if layout.n_per_year > SIMULATION_GUARD:
        raise InvalidArgument(f"simulation is dense; n_per_year must be <= {SIMULATION_GUARD}")
    ss = rng.bit_generator.seed_seq if isinstance(rng, np.random.Generator) else np.random.SeedSequence(rng)
    children = ss.spawn(len(layout.years))
    extra = np.zeros((0, 2)) if extra_locations is None else as_latlon(extra_locations)
    years, locs, vals, fids, latent = [], [], [], [], []
    extra_latent = {}
    for yr, child in zip(layout.years, children):
        g = np.random.default_rng(child)
        n_f = math.ceil(layout.n_per_year / layout.profiles_per_float)
        centres = uniform_locations(n_f, g, layout.lat_range, layout.lon_range, layout.mask)
        pts, ids = [], []
        for f, (la, lo) in enumerate(centres):
            for _ in range(layout.profiles_per_float):
                if len(pts) == layout.n_per_year:
                    break
                for _tries in range(100):
                    dla, dlo = g.uniform(-layout.float_spread_deg, layout.float_spread_deg, 2)
                    p = (float(np.clip(la + dla, *layout.lat_range)), float(normalize_lon(lo + dlo)))
                    if layout.mask is None or layout.mask.contains(*p):
                        break
                pts.append(p)
                ids.append(f"sim{yr}-{f:05d}")
        pts = np.array(pts)
        allpts = np.vstack([pts, extra])
        params = fields.point_params(allpts, mode)
        C = params.cov_matrix(include_nugget=False)
        C[np.diag_indices_from(C)] += 1e-10 * max(float(np.mean(np.diag(C))), 1e-300)
        z = _chol(C, "simulation") @ g.standard_normal(len(allpts))
        mean = fields.mean(allpts, np.full(len(allpts), yr))
        h = mean + z
        n = len(pts)
        noise = np.sqrt(params.sigma2[:n]) * g.standard_normal(n)
        years += [yr] * n
        locs.append(pts)
        vals.append(h[:n] + noise)
        latent.append(h[:n])
        fids += ids
        extra_latent[yr] = h[n:]
    obs = ObservationSet(years, np.vstack(locs), np.concatenate(vals), fids, units)
    return obs, SimulationTruth(fields, np.concatenate(latent), extra, extra_latent)
