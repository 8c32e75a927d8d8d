"""Regular lat/lon grids, masked fields, regions and climatology normalisation.

Conventions
-----------
- Arrays are indexed ``[lat, lon]`` with latitude increasing with the row
  index (south to north) and longitude increasing with the column index.
- ``GridSpec`` bounds are cell *edges*; ``make_grid`` returns cell centres.
- A day index ``d`` maps to day-of-year ``d % 365``.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError

DEFAULT_RESOLUTION = 1.0 / 30.0
STD_FLOOR = 1e-3
FILL_VALUE = -9999.0
DAYS_PER_YEAR = 365


class Variable(str, enum.Enum):
    SSH = "SSH"
    U = "U"
    V = "V"
    SST = "SST"
    CHL = "CHL"


@dataclass(frozen=True)
class GridSpec:
    """Regular grid; bounds are outer cell edges in degrees."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    resolution: float = DEFAULT_RESOLUTION

    def __post_init__(self):
        if not self.resolution > 0:
            raise ConfigError(f"resolution must be positive, got {self.resolution}")
        if not self.lat_min < self.lat_max:
            raise ConfigError(f"lat_min {self.lat_min} must be < lat_max {self.lat_max}")
        if not self.lon_min < self.lon_max:
            raise ConfigError(f"lon_min {self.lon_min} must be < lon_max {self.lon_max}")
        if self.n_lat < 1 or self.n_lon < 1:
            raise ConfigError("grid must contain at least one cell per axis")

    @classmethod
    def from_shape(cls, lat_min, lon_min, n_lat, n_lon, resolution=DEFAULT_RESOLUTION):
        return cls(lat_min, lat_min + n_lat * resolution, lon_min, lon_min + n_lon * resolution, resolution)

    @property
    def n_lat(self) -> int:
        return int(round((self.lat_max - self.lat_min) / self.resolution))

    @property
    def n_lon(self) -> int:
        return int(round((self.lon_max - self.lon_min) / self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_lat, self.n_lon

    def lat_centers(self) -> np.ndarray:
        return self.lat_min + (np.arange(self.n_lat) + 0.5) * self.resolution

    def lon_centers(self) -> np.ndarray:
        return self.lon_min + (np.arange(self.n_lon) + 0.5) * self.resolution

    def subgrid(self, row: int, col: int, h: int, w: int) -> "GridSpec":
        return GridSpec.from_shape(
            self.lat_min + row * self.resolution,
            self.lon_min + col * self.resolution,
            h,
            w,
            self.resolution,
        )

    def cell_index(self, lat, lon):
        """Row/column of the cell containing each position (may fall outside the grid)."""
        row = np.floor((np.asarray(lat) - self.lat_min) / self.resolution).astype(int)
        col = np.floor((np.asarray(lon) - self.lon_min) / self.resolution).astype(int)
        return row, col

    def contains(self, lat, lon):
        lat = np.asarray(lat)
        lon = np.asarray(lon)
        return (lat >= self.lat_min) & (lat < self.lat_max) & (lon >= self.lon_min) & (lon < self.lon_max)

    def to_dict(self) -> dict:
        return {
            "lat_min": self.lat_min,
            "lat_max": self.lat_max,
            "lon_min": self.lon_min,
            "lon_max": self.lon_max,
            "resolution": self.resolution,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridSpec":
        return cls(**{k: float(d[k]) for k in ("lat_min", "lat_max", "lon_min", "lon_max", "resolution")})


def make_grid(spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return the strictly increasing latitude and longitude cell centres."""
    return spec.lat_centers(), spec.lon_centers()


@dataclass(frozen=True, eq=False)
class GriddedField:
    """One variable on one day. ``mask`` is True where ``values`` is observed."""

    variable: Variable
    day: int
    values: np.ndarray
    mask: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        if self.values.shape != self.grid.shape or self.mask.shape != self.grid.shape:
            raise InputError(
                f"field shape {self.values.shape}/{self.mask.shape} does not match grid {self.grid.shape}"
            )
        if self.mask.dtype != bool:
            raise InputError("mask must be boolean")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise InputError(f"non-finite values at observed cells of {self.variable.value} day {self.day}")

    def with_values(self, values, mask=None) -> "GriddedField":
        return replace(self, values=values, mask=self.mask if mask is None else mask)


@dataclass(frozen=True)
class RegionSpec:
    name: str
    lat_ranges: tuple[tuple[float, float], ...]
    lon_range: tuple[float, float]

    def contains(self, lat, lon):
        lat = np.asarray(lat)
        lon = np.asarray(lon)
        inside_lat = np.zeros(np.broadcast(lat, lon).shape, dtype=bool)
        for lo, hi in self.lat_ranges:
            inside_lat |= (lat >= lo) & (lat <= hi)
        return inside_lat & (lon >= self.lon_range[0]) & (lon <= self.lon_range[1])

    @property
    def lat_extent(self) -> tuple[float, float]:
        return min(lo for lo, _ in self.lat_ranges), max(hi for _, hi in self.lat_ranges)

    @classmethod
    def from_grid(cls, grid: GridSpec, name: str = "world") -> "RegionSpec":
        return cls(name, ((grid.lat_min, grid.lat_max),), (grid.lon_min, grid.lon_max))


REGIONS: dict[str, RegionSpec] = {
    "global": RegionSpec("global", ((-60.0, -20.0), (20.0, 60.0)), (-180.0, 180.0)),
    "mediterranean": RegionSpec("mediterranean", ((30.0, 46.0),), (-6.0, 36.0)),
    "gulf_stream": RegionSpec("gulf_stream", ((20.0, 45.0),), (-99.0, -34.0)),
    "agulhas": RegionSpec("agulhas", ((-55.0, -30.0),), (14.0, 74.0)),
}


def get_region(name: str) -> RegionSpec:
    try:
        return REGIONS[name]
    except KeyError:
        raise ConfigError(f"unknown region {name!r}; known: {sorted(REGIONS)}") from None


def day_of_year(day) -> np.ndarray | int:
    return day % DAYS_PER_YEAR


def week_index(day, period: int = 7):
    """Climatology period of a day; the last period absorbs the year's tail."""
    n_periods = math.ceil(DAYS_PER_YEAR / period)
    return np.minimum(day_of_year(day) // period, n_periods - 1)


# --------------------------------------------------------------------------- climatology


@dataclass(frozen=True, eq=False)
class Climatology:
    """Per coarse cell, per period mean and standard deviation.

    Coarse cells are anchored at (``lat0``, ``lon0``); a fine cell uses the
    coarse cell that contains its centre.
    """

    variable: Variable
    means: np.ndarray
    stds: np.ndarray
    lat0: float
    lon0: float
    cell_size: float = 2.0
    period: int = 7
    global_mean: float = 0.0
    global_std: float = 1.0
    std_floor: float = STD_FLOOR

    @property
    def n_weeks(self) -> int:
        return self.means.shape[0]

    def coarse_index(self, lat, lon):
        ci = np.floor((np.asarray(lat) - self.lat0) / self.cell_size).astype(int)
        cj = np.floor((np.asarray(lon) - self.lon0) / self.cell_size).astype(int)
        return ci, cj

    def maps(self, grid: GridSpec, day: int) -> tuple[np.ndarray, np.ndarray]:
        """Mean and std maps on ``grid`` for ``day``; cells outside coverage use global stats."""
        lat, lon = make_grid(grid)
        ci, cj = self.coarse_index(lat, lon)
        w = int(week_index(day, self.period))
        inside_i = (ci >= 0) & (ci < self.means.shape[1])
        inside_j = (cj >= 0) & (cj < self.means.shape[2])
        ci_c = np.clip(ci, 0, self.means.shape[1] - 1)
        cj_c = np.clip(cj, 0, self.means.shape[2] - 1)
        mean = self.means[w][np.ix_(ci_c, cj_c)].copy()
        std = self.stds[w][np.ix_(ci_c, cj_c)].copy()
        outside = ~(inside_i[:, None] & inside_j[None, :])
        mean[outside] = self.global_mean
        std[outside] = self.global_std
        return mean, std

    def to_dict(self) -> dict:
        return {
            "variable": self.variable.value,
            "lat0": self.lat0,
            "lon0": self.lon0,
            "cell_size": self.cell_size,
            "period": self.period,
            "global_mean": self.global_mean,
            "global_std": self.global_std,
            "std_floor": self.std_floor,
            "shape": list(self.means.shape),
            "means": [float(x) for x in self.means.ravel()],
            "stds": [float(x) for x in self.stds.ravel()],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Climatology":
        shape = tuple(d["shape"])
        return cls(
            variable=Variable(d["variable"]),
            means=np.asarray(d["means"], dtype=np.float64).reshape(shape),
            stds=np.asarray(d["stds"], dtype=np.float64).reshape(shape),
            lat0=d["lat0"],
            lon0=d["lon0"],
            cell_size=d["cell_size"],
            period=d["period"],
            global_mean=d["global_mean"],
            global_std=d["global_std"],
            std_floor=d["std_floor"],
        )


def compute_climatology(
    series: Sequence[GriddedField],
    cell_size: float = 2.0,
    period: int = 7,
    std_floor: float = STD_FLOOR,
) -> Climatology:
    """Weekly, coarse-cell mean and sample standard deviation of a field series.

    Cells with fewer than two observed samples fall back to the statistics of
    the whole series. Standard deviations are clamped below at ``std_floor``.
    """
    if len(series) == 0:
        raise InputError("cannot compute a climatology from an empty series")
    first = series[0]
    for f in series:
        if f.variable != first.variable:
            raise InputError(f"mixed variables in series: {first.variable.value} and {f.variable.value}")
        if f.grid != first.grid:
            raise InputError("all fields of a climatology series must share one grid")
    values = np.stack([f.values for f in series]).astype(np.float64)
    masks = np.stack([f.mask for f in series])
    days = np.array([f.day for f in series])
    return climatology_from_arrays(first.variable, first.grid, values, masks, days, cell_size, period, std_floor)


def climatology_from_arrays(
    variable: Variable,
    grid: GridSpec,
    values: np.ndarray,
    masks: np.ndarray,
    days: np.ndarray,
    cell_size: float = 2.0,
    period: int = 7,
    std_floor: float = STD_FLOOR,
) -> Climatology:
    """Array form of :func:`compute_climatology` for ``[day, lat, lon]`` stacks."""
    if values.shape[0] == 0:
        raise InputError("cannot compute a climatology from an empty series")
    values = np.asarray(values, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    n_weeks = math.ceil(DAYS_PER_YEAR / period)
    n_ci = math.ceil(grid.n_lat * grid.resolution / cell_size - 1e-9)
    n_cj = math.ceil(grid.n_lon * grid.resolution / cell_size - 1e-9)
    lat, lon = make_grid(grid)
    ci = np.floor((lat - grid.lat_min) / cell_size).astype(int)
    cj = np.floor((lon - grid.lon_min) / cell_size).astype(int)
    weeks = week_index(np.asarray(days), period)

    flat_cell = (ci[:, None] * n_cj + cj[None, :]).ravel()
    keys = (weeks[:, None] * (n_ci * n_cj) + flat_cell[None, :]).ravel()
    m = masks.reshape(len(days), -1).ravel()
    keys = keys[m]
    vals = values.reshape(len(days), -1).ravel()[m]
    if vals.size == 0:
        raise InputError("series contains no observed samples")
    n_bins = n_weeks * n_ci * n_cj

    # Sorting makes the reductions independent of series order.
    order = np.lexsort((vals, keys))
    keys, vals = keys[order], vals[order]
    counts = np.bincount(keys, minlength=n_bins)
    sums = np.bincount(keys, weights=vals, minlength=n_bins)
    means = np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0)
    sq = np.bincount(keys, weights=(vals - means[keys]) ** 2, minlength=n_bins)
    stds = np.sqrt(np.divide(sq, counts - 1, out=np.zeros(n_bins), where=counts > 1))

    global_mean = float(np.mean(vals))
    global_std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
    global_std = max(global_std, std_floor)
    sparse = counts < 2
    means[sparse] = global_mean
    stds[sparse] = global_std
    stds = np.maximum(stds, std_floor)
    shape = (n_weeks, n_ci, n_cj)
    return Climatology(
        variable=Variable(variable),
        means=means.reshape(shape),
        stds=stds.reshape(shape),
        lat0=grid.lat_min,
        lon0=grid.lon_min,
        cell_size=cell_size,
        period=period,
        global_mean=global_mean,
        global_std=global_std,
        std_floor=std_floor,
    )


def _check_variable(field_: GriddedField, clim: Climatology):
    if field_.variable != clim.variable:
        raise InputError(
            f"climatology is for {clim.variable.value}, field is {field_.variable.value}"
        )


def normalize(field_: GriddedField, clim: Climatology) -> GriddedField:
    """Anomaly in units of climatological std. Unobserved cells are left untouched."""
    _check_variable(field_, clim)
    mean, std = clim.maps(field_.grid, field_.day)
    out = np.where(field_.mask, (field_.values - mean) / std, field_.values)
    return field_.with_values(out)


def denormalize(field_: GriddedField, clim: Climatology) -> GriddedField:
    _check_variable(field_, clim)
    mean, std = clim.maps(field_.grid, field_.day)
    out = np.where(field_.mask, field_.values * std + mean, field_.values)
    return field_.with_values(out)


# --------------------------------------------------------------------------- patches


@dataclass(frozen=True, eq=False)
class Patch:
    values: np.ndarray
    mask: np.ndarray
    grid: GridSpec
    row: int
    col: int
    center_lat: float
    center_lon: float


def crop_patch(field_: GriddedField, row: int, col: int, h: int, w: int) -> Patch:
    """Crop an ``h x w`` window whose south-west cell is ``(row, col)``."""
    n_lat, n_lon = field_.grid.shape
    if h < 1 or w < 1 or row < 0 or col < 0 or row + h > n_lat or col + w > n_lon:
        raise InputError(
            f"crop rows {row}:{row + h}, cols {col}:{col + w} outside grid {n_lat}x{n_lon}"
        )
    sub = field_.grid.subgrid(row, col, h, w)
    return Patch(
        values=field_.values[row : row + h, col : col + w].copy(),
        mask=field_.mask[row : row + h, col : col + w].copy(),
        grid=sub,
        row=row,
        col=col,
        center_lat=0.5 * (sub.lat_min + sub.lat_max),
        center_lon=0.5 * (sub.lon_min + sub.lon_max),
    )


# --------------------------------------------------------------------------- dataset format


def _json_dump(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_dataset(
    path: str | os.PathLike,
    grid: GridSpec,
    variables: Mapping[str, tuple[np.ndarray, np.ndarray]],
    day0: int = 0,
    variable_types: Mapping[str, str] | None = None,
    extra_meta: Mapping | None = None,
) -> Path:
    """Write ``{name: (values[day, lat, lon], mask)}`` in the on-disk dataset layout.

    Values are little-endian float32, masks one byte per cell (1 = observed);
    unobserved cells hold the fill sentinel.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n_days = None
    for name, (values, mask) in variables.items():
        values = np.asarray(values)
        mask = np.asarray(mask, dtype=bool)
        if values.ndim != 3 or values.shape[1:] != grid.shape or mask.shape != values.shape:
            raise InputError(f"variable {name}: shape {values.shape} incompatible with grid {grid.shape}")
        if n_days is None:
            n_days = values.shape[0]
        elif values.shape[0] != n_days:
            raise InputError(f"variable {name} has {values.shape[0]} days, expected {n_days}")
        out = np.where(mask, values, FILL_VALUE).astype("<f4")
        (path / f"{name}.f32").write_bytes(out.tobytes(order="C"))
        (path / f"{name}.mask").write_bytes(mask.astype(np.uint8).tobytes(order="C"))
    meta = {
        "grid": grid.to_dict(),
        "variables": sorted(variables),
        "variable_types": dict(variable_types or {}),
        "day0": int(day0),
        "n_days": int(n_days or 0),
        "fill_value": FILL_VALUE,
    }
    if extra_meta:
        meta.update(extra_meta)
    _json_dump(meta, path / "meta.json")
    return path


class GriddedDataset:
    """Lazy reader for the on-disk dataset layout.

    Reads touch only the bytes of the requested days, which is what makes
    forecasts provably independent of later observations.
    """

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        meta_path = self.path / "meta.json"
        if not meta_path.is_file():
            raise InputError(f"no dataset at {self.path} (missing meta.json)")
        self.meta = json.loads(meta_path.read_text(encoding="utf-8"))
        self.grid = GridSpec.from_dict(self.meta["grid"])
        self.day0 = int(self.meta["day0"])
        self.n_days = int(self.meta["n_days"])
        self.variables = list(self.meta["variables"])

    @property
    def days(self) -> range:
        return range(self.day0, self.day0 + self.n_days)

    def _check(self, name: str, day: int):
        if name not in self.variables:
            raise InputError(f"dataset {self.path} has no variable {name!r}")
        if not (self.day0 <= day < self.day0 + self.n_days):
            raise InputError(f"day {day} outside dataset range {self.day0}..{self.day0 + self.n_days - 1}")

    def read(self, name: str, day: int) -> tuple[np.ndarray, np.ndarray]:
        self._check(name, day)
        n = self.grid.n_lat * self.grid.n_lon
        k = day - self.day0
        with open(self.path / f"{name}.f32", "rb") as fh:
            fh.seek(k * n * 4)
            values = np.frombuffer(fh.read(n * 4), dtype="<f4").reshape(self.grid.shape)
        with open(self.path / f"{name}.mask", "rb") as fh:
            fh.seek(k * n)
            mask = np.frombuffer(fh.read(n), dtype=np.uint8).reshape(self.grid.shape).astype(bool)
        values = np.where(mask, values.astype(np.float64), 0.0)
        return values, mask

    def read_days(self, name: str, days: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
        pairs = [self.read(name, d) for d in days]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def read_all(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.read_days(name, self.days)

    def field(self, name: str, day: int) -> GriddedField:
        values, mask = self.read(name, day)
        vtype = self.meta.get("variable_types", {}).get(name, name)
        return GriddedField(Variable(vtype), day, values, mask, self.grid)
