"""Coordinates and the cylindrical distance used by every covariance.

All public angles are in degrees. Latitude distance is plain Euclidean in
degrees; longitude distance wraps around the circle. No cos(lat) factor is
applied: the longitudinal length-scale field absorbs the shrinking radius.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


def normalize_lon(lon):
    """Map longitudes into [-180, 180)."""
    out = np.mod(np.asarray(lon, dtype=float) + 180.0, 360.0) - 180.0
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Location:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not (np.isfinite(lat) and np.isfinite(lon)):
            raise InvalidArgument(f"non-finite location ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise InvalidArgument(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(lon))

    def as_tuple(self):
        return (self.lat, self.lon)


def as_latlon(locs) -> np.ndarray:
    """Coerce a Location, a sequence of Locations, or an (n, 2) array to (n, 2)."""
    if isinstance(locs, Location):
        return np.array([[locs.lat, locs.lon]])
    if isinstance(locs, np.ndarray):
        arr = np.asarray(locs, dtype=float)
    else:
        locs = list(locs)
        if len(locs) == 0:
            return np.zeros((0, 2))
        if isinstance(locs[0], Location):
            arr = np.array([[p.lat, p.lon] for p in locs], dtype=float)
        else:
            arr = np.asarray(locs, dtype=float)
    arr = np.atleast_2d(arr)
    if arr.size == 0:
        return np.zeros((0, 2))
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidArgument(f"expected (n, 2) lat/lon array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("non-finite coordinates")
    if np.any(np.abs(arr[:, 0]) > 90.0):
        raise InvalidArgument("latitude outside [-90, 90]")
    out = arr.copy()
    out[:, 1] = normalize_lon(out[:, 1])
    return out


def circular_lon_distance(a, b):
    """Wraparound distance between longitudes, in [0, 180]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidArgument("non-finite longitude")
    d = np.mod(np.abs(a - b), 360.0)
    out = np.minimum(d, 360.0 - d)
    if out.ndim == 0:
        return float(out)
    return out


def _coords(x):
    if isinstance(x, Location):
        return x.lat, x.lon
    arr = np.asarray(x, dtype=float)
    return arr[..., 0], arr[..., 1]


def cyl_distance(x, y):
    """Pythagorean distance on the lat/lon cylinder, in degrees.

    Accepts Locations or broadcastable (..., 2) arrays.
    """
    xlat, xlon = _coords(x)
    ylat, ylon = _coords(y)
    dlat = np.abs(np.asarray(xlat) - np.asarray(ylat))
    dlon = circular_lon_distance(xlon, ylon)
    out = np.hypot(dlat, dlon)
    if np.ndim(out) == 0:
        return float(out)
    return out


def scaled_cyl_distance(x, u, theta_lat, theta_lon):
    """Cylindrical distance with per-axis squared length scales of ``x``.

    Not symmetric in (x, u) once the scales vary: they belong to ``x``.
    """
    theta_lat = np.asarray(theta_lat, dtype=float)
    theta_lon = np.asarray(theta_lon, dtype=float)
    if np.any(theta_lat <= 0) or np.any(theta_lon <= 0):
        raise InvalidArgument("length scales must be positive")
    xlat, xlon = _coords(x)
    ulat, ulon = _coords(u)
    dlat = np.asarray(xlat) - np.asarray(ulat)
    dlon = circular_lon_distance(xlon, ulon)
    out = np.sqrt(dlat**2 / theta_lat + dlon**2 / theta_lon)
    if np.ndim(out) == 0:
        return float(out)
    return out


def pairwise_cyl_distance(a, b=None) -> np.ndarray:
    """Matrix of cylindrical distances between rows of two (n, 2) arrays."""
    a = np.asarray(a, dtype=float)
    b = a if b is None else np.asarray(b, dtype=float)
    dlat = a[:, None, 0] - b[None, :, 0]
    dlon = np.mod(np.abs(a[:, None, 1] - b[None, :, 1]), 360.0)
    dlon = np.minimum(dlon, 360.0 - dlon)
    return np.hypot(dlat, dlon)


def chord_distance_deg(a, b) -> np.ndarray:
    """Chord length through the unit sphere, expressed in degrees (x 180/pi).

    Broadcasts over matching (..., 2) lat/lon arrays.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    la, oa = np.radians(a[..., 0]), np.radians(a[..., 1])
    lb, ob = np.radians(b[..., 0]), np.radians(b[..., 1])
    # 2 sin(half central angle), via the haversine form for accuracy at short range
    h = np.sin((lb - la) / 2) ** 2 + np.cos(la) * np.cos(lb) * np.sin((ob - oa) / 2) ** 2
    chord = 2.0 * np.sqrt(np.clip(h, 0.0, 1.0))
    return np.degrees(chord)


def circular_mean_lon(lon) -> float:
    lon = np.radians(np.asarray(lon, dtype=float))
    s, c = np.sin(lon).mean(), np.cos(lon).mean()
    if np.hypot(s, c) < 1e-12:
        return 0.0
    return float(np.degrees(np.arctan2(s, c)))
