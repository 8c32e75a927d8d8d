"""Procedural ocean truth and simulated observing systems.

The truth is a sum of drifting Gaussian eddies over a background slope,
geostrophically balanced by construction, with passive SST/CHL tracers
advected by the total current. Every observation operator samples that
truth and is deterministic for a given seed.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError
from .geo_grid import GriddedField, GridSpec, Variable, make_grid

EARTH_RADIUS = 6_371_000.0
SECONDS_PER_DAY = 86_400.0
EPOCH = dt.datetime(2023, 1, 1, tzinfo=dt.timezone.utc)


@dataclass(frozen=True)
class GeophysParams:
    g: float = 9.81
    omega: float = 7.2921e-5
    lat_clamp: float = 20.0


def coriolis(lat, params: GeophysParams = GeophysParams()):
    """Coriolis parameter with |lat| clamped below at ``params.lat_clamp`` (sign kept)."""
    lat = np.asarray(lat, dtype=np.float64)
    sign = np.where(lat < 0, -1.0, 1.0)
    eff = np.maximum(np.abs(lat), params.lat_clamp)
    return sign * 2.0 * params.omega * np.sin(np.deg2rad(eff))


def _stencil_derivative(eta: np.ndarray, mask: np.ndarray, axis: int):
    """Derivative in index units along ``axis`` and the validity of its stencil.

    Second-order central differences in the interior, first-order one-sided
    differences on the two boundary rows/columns.
    """
    eta = np.moveaxis(eta, axis, -1)
    mask = np.moveaxis(mask, axis, -1)
    d = np.zeros_like(eta)
    ok = np.zeros(mask.shape, dtype=bool)
    n = eta.shape[-1]
    if n < 2:
        return np.moveaxis(d, -1, axis), np.moveaxis(ok, -1, axis)
    d[..., 1:-1] = 0.5 * (eta[..., 2:] - eta[..., :-2])
    ok[..., 1:-1] = mask[..., 2:] & mask[..., :-2] & mask[..., 1:-1]
    d[..., 0] = eta[..., 1] - eta[..., 0]
    ok[..., 0] = mask[..., 1] & mask[..., 0]
    d[..., -1] = eta[..., -1] - eta[..., -2]
    ok[..., -1] = mask[..., -1] & mask[..., -2]
    return np.moveaxis(d, -1, axis), np.moveaxis(ok, -1, axis)


def geostrophy(ssh: np.ndarray, mask: np.ndarray, grid: GridSpec, params: GeophysParams = GeophysParams()):
    """Geostrophic (u, v) and validity mask for SSH arrays shaped ``[..., lat, lon]``.

    u = -(g/f) d(eta)/dy and v = (g/f) d(eta)/dx, with metric distances on a
    sphere of radius 6371 km. A cell is valid only if every cell of its
    stencil is observed; invalid cells hold 0.
    """
    ssh = np.asarray(ssh, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    eta = np.where(mask, ssh, 0.0)
    lat = grid.lat_centers()
    dy = EARTH_RADIUS * np.deg2rad(grid.resolution)
    dx = dy * np.cos(np.deg2rad(lat))[:, None]
    f = coriolis(lat, params)[:, None]
    deta_y, ok_y = _stencil_derivative(eta, mask, axis=-2)
    deta_x, ok_x = _stencil_derivative(eta, mask, axis=-1)
    valid = ok_y & ok_x
    u = np.where(valid, -(params.g / f) * deta_y / dy, 0.0)
    v = np.where(valid, (params.g / f) * deta_x / dx, 0.0)
    return u, v, valid


def geostrophic_currents(ssh: GriddedField, grid: GridSpec | None = None, params: GeophysParams = GeophysParams()):
    """Geostrophic current fields derived from an SSH field."""
    grid = grid or ssh.grid
    u, v, valid = geostrophy(ssh.values, ssh.mask, grid, params)
    return (
        GriddedField(Variable.U, ssh.day, u, valid, grid),
        GriddedField(Variable.V, ssh.day, v, valid.copy(), grid),
    )


def swath_geostrophy(swot: GriddedField, grid: GridSpec | None = None, params: GeophysParams = GeophysParams()):
    """Currents computed directly on swath SSH.

    Identical stencil to :func:`geostrophic_currents`; cells next to the
    nadir gap or the swath edge lose a neighbour and are masked out.
    """
    return geostrophic_currents(swot, grid, params)


# --------------------------------------------------------------------------- world


@dataclass(frozen=True)
class WorldConfig:
    grid: GridSpec
    n_days: int = 60
    n_eddies: int = 8
    eddy_amplitude_range: tuple[float, float] = (0.1, 0.3)
    eddy_radius_range: tuple[float, float] = (40.0, 80.0)
    eddy_drift_speed_range: tuple[float, float] = (2.0, 6.0)
    eddy_drift_heading_range: tuple[float, float] = (240.0, 300.0)
    background_ssh_gradient: float = 0.0
    land_fraction: float = 0.0
    seed: int = 0
    start_day: int = 0
    sst_lat_gradient: float = 0.5
    tracer_scale_km: float = 40.0
    tracer_relaxation: float = 0.02
    ageostrophic_mean: tuple[float, float] = (0.0, 0.0)
    ageostrophic_std: float = 0.0
    ageostrophic_scale_km: float = 100.0
    geophys: GeophysParams = GeophysParams()

    def validate(self):
        g = self.grid
        clamp = self.geophys.lat_clamp
        if g.lat_min < clamp and g.lat_max > -clamp:
            raise ConfigError(
                f"grid latitudes {g.lat_min}..{g.lat_max} touch the |lat| < {clamp} band where geostrophy fails"
            )
        if self.n_days < 1:
            raise ConfigError("n_days must be >= 1")
        if self.n_eddies < 0:
            raise ConfigError("n_eddies must be >= 0")
        if not 0.0 <= self.land_fraction < 1.0:
            raise ConfigError("land_fraction must lie in [0, 1)")
        for name in ("eddy_amplitude_range", "eddy_radius_range", "eddy_drift_speed_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.n_eddies and self.eddy_radius_range[0] <= 0:
            raise ConfigError("eddy radii must be positive")


@dataclass(frozen=True, eq=False)
class OceanWorld:
    """Daily truth arrays shaped ``[day, lat, lon]``.

    ``u``/``v`` are the total currents (geostrophic plus optional
    ageostrophic part); ``u_geo``/``v_geo`` the geostrophic part alone.
    ``current_mask`` marks cells with a complete geostrophy stencil.
    """

    grid: GridSpec
    days: np.ndarray
    land: np.ndarray
    ssh: np.ndarray
    u: np.ndarray
    v: np.ndarray
    u_geo: np.ndarray
    v_geo: np.ndarray
    current_mask: np.ndarray
    sst: np.ndarray
    chl: np.ndarray
    config: WorldConfig | None = None
    params: GeophysParams = GeophysParams()

    @property
    def ocean(self) -> np.ndarray:
        return ~self.land

    @property
    def n_days(self) -> int:
        return len(self.days)

    def index(self, day: int) -> int:
        k = int(day) - int(self.days[0])
        if not 0 <= k < len(self.days):
            raise InputError(f"day {day} outside world range {self.days[0]}..{self.days[-1]}")
        return k

    def field(self, variable: Variable | str, day: int) -> GriddedField:
        variable = Variable(variable)
        k = self.index(day)
        arrays = {
            Variable.SSH: (self.ssh, self.ocean),
            Variable.U: (self.u, self.current_mask[k]),
            Variable.V: (self.v, self.current_mask[k]),
            Variable.SST: (self.sst, self.ocean),
            Variable.CHL: (self.chl, self.ocean),
        }
        values, mask = arrays[variable]
        return GriddedField(variable, int(day), values[k].copy(), mask.copy(), self.grid)

    @classmethod
    def from_currents(cls, grid: GridSpec, u: np.ndarray, v: np.ndarray, day0: int = 0, land=None):
        """World with prescribed currents and flat SSH/tracers (drifter experiments)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        n = u.shape[0]
        land = np.zeros(grid.shape, dtype=bool) if land is None else land
        zeros = np.zeros_like(u)
        return cls(
            grid=grid,
            days=np.arange(day0, day0 + n),
            land=land,
            ssh=zeros.copy(),
            u=u,
            v=v,
            u_geo=u.copy(),
            v_geo=v.copy(),
            current_mask=np.broadcast_to(~land, u.shape).copy(),
            sst=zeros.copy(),
            chl=zeros.copy(),
        )


def local_km(grid: GridSpec, lat, lon):
    """Equirectangular (x east, y north) kilometres from the grid's south-west corner."""
    lat_mid = 0.5 * (grid.lat_min + grid.lat_max)
    x = EARTH_RADIUS / 1000.0 * np.cos(np.deg2rad(lat_mid)) * np.deg2rad(np.asarray(lon) - grid.lon_min)
    y = EARTH_RADIUS / 1000.0 * np.deg2rad(np.asarray(lat) - grid.lat_min)
    return x, y


def local_km_inverse(grid: GridSpec, x, y):
    lat_mid = 0.5 * (grid.lat_min + grid.lat_max)
    lon = grid.lon_min + np.rad2deg(np.asarray(x) * 1000.0 / (EARTH_RADIUS * np.cos(np.deg2rad(lat_mid))))
    lat = grid.lat_min + np.rad2deg(np.asarray(y) * 1000.0 / EARTH_RADIUS)
    return lat, lon


def land_mask(grid: GridSpec, land_fraction: float) -> np.ndarray:
    """Rectangular land block in the north-east corner covering ~``land_fraction``."""
    land = np.zeros(grid.shape, dtype=bool)
    if land_fraction <= 0:
        return land
    side = math.sqrt(land_fraction)
    h = int(round(side * grid.n_lat))
    w = int(round(side * grid.n_lon))
    if h and w:
        land[grid.n_lat - h :, grid.n_lon - w :] = True
    return land


def smooth_noise(rng: np.random.Generator, shape, sigma_cells: float) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to zero mean, unit std."""
    noise = rng.standard_normal(shape)
    sm = ndimage.gaussian_filter(noise, sigma=sigma_cells, mode="wrap")
    sm -= sm.mean()
    std = sm.std()
    return sm / std if std > 0 else sm


def eddy_ssh(grid: GridSpec, day_offsets: np.ndarray, eddies: dict, box: tuple[float, float, float, float]):
    """Sum of Gaussian eddies for each day offset; centres wrap inside ``box`` (km)."""
    lat, lon = make_grid(grid)
    x, y = local_km(grid, lat[:, None], lon[None, :])
    x0, x1, y0, y1 = box
    out = np.zeros((len(day_offsets),) + grid.shape)
    for amp, radius, cx, cy, vx, vy in zip(
        eddies["amplitude"], eddies["radius"], eddies["x"], eddies["y"], eddies["vx"], eddies["vy"]
    ):
        px = x0 + np.mod(cx + vx * day_offsets - x0, x1 - x0)
        py = y0 + np.mod(cy + vy * day_offsets - y0, y1 - y0)
        r2 = (x[None] - px[:, None, None]) ** 2 + (y[None] - py[:, None, None]) ** 2
        out += amp * np.exp(-r2 / (2.0 * radius**2))
    return out


def _bilinear_sample(field2d: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(field2d, [rows, cols], order=1, mode="nearest")


def advect_tracer(tracer: np.ndarray, u: np.ndarray, v: np.ndarray, grid: GridSpec, dt_seconds: float = SECONDS_PER_DAY):
    """One semi-Lagrangian step: backtrack each cell centre and interpolate bilinearly."""
    lat = grid.lat_centers()
    dy = EARTH_RADIUS * np.deg2rad(grid.resolution)
    dx = dy * np.cos(np.deg2rad(lat))[:, None]
    rows, cols = np.meshgrid(np.arange(grid.n_lat, dtype=float), np.arange(grid.n_lon, dtype=float), indexing="ij")
    src_r = rows - v * dt_seconds / dy
    src_c = cols - u * dt_seconds / dx
    return _bilinear_sample(tracer, src_r, src_c)


def _draw_eddies(rng: np.random.Generator, cfg: WorldConfig, box):
    n = cfg.n_eddies
    x0, x1, y0, y1 = box
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    heading = np.deg2rad(rng.uniform(*cfg.eddy_drift_heading_range, size=n))
    speed = rng.uniform(*cfg.eddy_drift_speed_range, size=n)
    return {
        "amplitude": sign * rng.uniform(*cfg.eddy_amplitude_range, size=n),
        "radius": rng.uniform(*cfg.eddy_radius_range, size=n),
        "x": rng.uniform(x0, x1, size=n),
        "y": rng.uniform(y0, y1, size=n),
        "vx": speed * np.sin(heading),
        "vy": speed * np.cos(heading),
    }


def simulate_world(config: WorldConfig) -> OceanWorld:
    """Generate the daily truth for ``config``; identical seeds give identical worlds."""
    config.validate()
    grid = config.grid
    rng = np.random.default_rng(config.seed)
    land = land_mask(grid, config.land_fraction)
    ocean = ~land
    days = np.arange(config.start_day, config.start_day + config.n_days)
    offsets = (days - config.start_day).astype(np.float64)

    lx, ly = local_km(grid, grid.lat_max, grid.lon_max)
    pad = 4.0 * max(config.eddy_radius_range[1], 1.0)
    box = (-pad, float(lx) + pad, -pad, float(ly) + pad)
    eddies = _draw_eddies(rng, config, box)

    lat, _ = make_grid(grid)
    lat_mid = 0.5 * (grid.lat_min + grid.lat_max)
    background = config.background_ssh_gradient * (lat - lat_mid)[:, None] * np.ones(grid.shape)
    ssh = background[None] + eddy_ssh(grid, offsets, eddies, box)
    ssh = np.where(ocean[None], ssh, 0.0)

    u_geo, v_geo, cmask = geostrophy(ssh, np.broadcast_to(ocean, ssh.shape), grid, config.geophys)

    km_per_cell = EARTH_RADIUS / 1000.0 * np.deg2rad(grid.resolution)
    ag_sigma = config.ageostrophic_scale_km / km_per_cell
    ua = config.ageostrophic_mean[0] + config.ageostrophic_std * smooth_noise(rng, grid.shape, ag_sigma)
    va = config.ageostrophic_mean[1] + config.ageostrophic_std * smooth_noise(rng, grid.shape, ag_sigma)
    u = np.where(cmask, u_geo + ua[None], 0.0)
    v = np.where(cmask, v_geo + va[None], 0.0)

    tr_sigma = config.tracer_scale_km / km_per_cell
    sst0 = 18.0 - config.sst_lat_gradient * (lat - lat_mid)[:, None] + smooth_noise(rng, grid.shape, tr_sigma)
    chl0 = -0.5 + 0.3 * smooth_noise(rng, grid.shape, tr_sigma)
    sst = np.empty_like(ssh)
    chl = np.empty_like(ssh)
    sst[0], chl[0] = sst0, chl0
    r = config.tracer_relaxation
    for k in range(1, len(days)):
        sst[k] = (1 - r) * advect_tracer(sst[k - 1], u[k - 1], v[k - 1], grid) + r * sst0
        chl[k] = (1 - r) * advect_tracer(chl[k - 1], u[k - 1], v[k - 1], grid) + r * chl0
    sst = np.where(ocean[None], sst, 0.0)
    chl = np.where(ocean[None], chl, 0.0)
    return OceanWorld(
        grid=grid,
        days=days,
        land=land,
        ssh=ssh,
        u=u,
        v=v,
        u_geo=u_geo,
        v_geo=v_geo,
        current_mask=cmask,
        sst=sst,
        chl=chl,
        config=config,
        params=config.geophys,
    )


def smooth_currents(u: np.ndarray, v: np.ndarray, mask: np.ndarray, sigma_cells: float):
    """Mask-aware Gaussian smoothing over the two trailing axes."""
    if sigma_cells <= 0:
        return np.where(mask, u, 0.0), np.where(mask, v, 0.0)
    sig = (0,) * (u.ndim - 2) + (sigma_cells, sigma_cells)
    m = mask.astype(np.float64)
    wsum = ndimage.gaussian_filter(m, sig, mode="nearest")
    wsum = np.where(wsum > 1e-12, wsum, 1.0)
    us = ndimage.gaussian_filter(np.where(mask, u, 0.0), sig, mode="nearest") / wsum
    vs = ndimage.gaussian_filter(np.where(mask, v, 0.0), sig, mode="nearest") / wsum
    return np.where(mask, us, 0.0), np.where(mask, vs, 0.0)


def l4_currents(world: OceanWorld, sigma_cells: float):
    """Gap-free gridded geostrophic analysis: truth geostrophy blurred by ``sigma_cells``."""
    return smooth_currents(world.u_geo, world.v_geo, world.current_mask, sigma_cells)


# --------------------------------------------------------------------------- altimetry


def _day_rng(seed: int, day: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(day) % (2**63), stream])


def observe_nadir(
    world: OceanWorld,
    day: int,
    n_tracks: int,
    along_track_spacing: float = 7.0,
    noise_std: float = 0.0,
    seed: int = 0,
) -> GriddedField:
    """Along-track SSH: straight ground tracks with random offsets and inclinations."""
    k = world.index(day)
    grid = world.grid
    rng = _day_rng(seed, day, 1)
    mask = np.zeros(grid.shape, dtype=bool)
    lx, ly = local_km(grid, grid.lat_max, grid.lon_max)
    diag = math.hypot(float(lx), float(ly))
    for _ in range(n_tracks):
        px, py = rng.uniform(0, lx), rng.uniform(0, ly)
        theta = rng.uniform(0, math.pi)
        s = np.arange(-diag, diag + along_track_spacing, along_track_spacing)
        xs = px + s * math.sin(theta)
        ys = py + s * math.cos(theta)
        lat, lon = local_km_inverse(grid, xs, ys)
        inside = grid.contains(lat, lon)
        r, c = grid.cell_index(lat[inside], lon[inside])
        mask[r, c] = True
    mask &= world.ocean
    noise = rng.standard_normal(grid.shape) * noise_std
    values = np.where(mask, world.ssh[k] + noise, 0.0)
    return GriddedField(Variable.SSH, int(day), values, mask, grid)


@dataclass(frozen=True)
class SwotConfig:
    swath_half_width: float = 50.0
    gap_width: float = 20.0
    revisit_days: int = 21
    bias_mean: float = 0.0526
    bias_std: float = 0.0332
    noise_std: float = 0.002
    heading_deg: float = 12.0

    @property
    def footprint_width(self) -> float:
        return 2.0 * self.swath_half_width + self.gap_width


def swath_distance(grid: GridSpec, heading_deg: float) -> np.ndarray:
    """Signed cross-track distance (km) of every cell centre from a track through the SW corner."""
    lat, lon = make_grid(grid)
    x, y = local_km(grid, lat[:, None], lon[None, :])
    a = np.deg2rad(heading_deg)
    return x * math.cos(a) - y * math.sin(a)


def swath_centers(grid: GridSpec, cfg: SwotConfig, day: int) -> np.ndarray:
    """Cross-track centre lines sampled on ``day``.

    The domain's cross-track extent is cut into ``revisit_days`` slots; day
    ``d`` uses slot ``d % revisit_days``. Extra simultaneous passes are added
    only when slots would be wider than one band (very large domains).
    """
    s = swath_distance(grid, cfg.heading_deg)
    s_min, s_max = float(s.min()), float(s.max())
    extent = s_max - s_min
    n_pass = max(1, math.ceil(extent / (cfg.revisit_days * cfg.swath_half_width)))
    n_slots = cfg.revisit_days * n_pass
    step = extent / n_slots if extent > 0 else 0.0
    phase = int(day) % cfg.revisit_days
    slots = phase + cfg.revisit_days * np.arange(n_pass)
    return s_min + (slots + 0.5) * step


def swath_mask(grid: GridSpec, cfg: SwotConfig, day: int) -> np.ndarray:
    s = swath_distance(grid, cfg.heading_deg)
    mask = np.zeros(grid.shape, dtype=bool)
    half_gap = 0.5 * cfg.gap_width
    for c in swath_centers(grid, cfg, day):
        d = np.abs(s - c)
        mask |= (d >= half_gap) & (d <= half_gap + cfg.swath_half_width)
    return mask


def observe_swot(world: OceanWorld, day: int, cfg: SwotConfig = SwotConfig(), seed: int = 0) -> GriddedField:
    """Wide-swath SSH with one bias draw per pass plus pixel noise."""
    k = world.index(day)
    grid = world.grid
    rng = _day_rng(seed, day, 2)
    mask = swath_mask(grid, cfg, day) & world.ocean
    bias = rng.normal(cfg.bias_mean, cfg.bias_std) if cfg.bias_std > 0 else cfg.bias_mean
    noise = rng.standard_normal(grid.shape) * cfg.noise_std
    values = np.where(mask, world.ssh[k] + bias + noise, 0.0)
    return GriddedField(Variable.SSH, int(day), values, mask, grid)


# --------------------------------------------------------------------------- imagery


def observe_imagery(
    world: OceanWorld,
    day: int,
    variable: Variable | str,
    cloud_cover: float,
    seed: int = 0,
    cloud_scale_cells: float = 4.0,
    noise_std: float = 0.0,
) -> GriddedField:
    """Cloud-masked SST or log10-CHL image; ``cloud_cover`` of the ocean is hidden."""
    variable = Variable(variable)
    if variable not in (Variable.SST, Variable.CHL):
        raise InputError(f"imagery is SST or CHL, not {variable.value}")
    if not 0.0 <= cloud_cover <= 1.0:
        raise ConfigError("cloud_cover must lie in [0, 1]")
    k = world.index(day)
    grid = world.grid
    rng = _day_rng(seed, day, 3 if variable is Variable.SST else 4)
    clouds = smooth_noise(rng, grid.shape, cloud_scale_cells)
    ocean_idx = np.flatnonzero(world.ocean)
    n_cloudy = int(round(cloud_cover * ocean_idx.size))
    order = np.argsort(-clouds.ravel()[ocean_idx], kind="stable")
    mask = world.ocean.copy().ravel()
    mask[ocean_idx[order[:n_cloudy]]] = False
    mask = mask.reshape(grid.shape)
    truth = world.sst[k] if variable is Variable.SST else world.chl[k]
    noise = rng.standard_normal(grid.shape) * noise_std
    values = np.where(mask, truth + noise, 0.0)
    return GriddedField(variable, int(day), values, mask, grid)


# --------------------------------------------------------------------------- drifters


@dataclass(eq=False)
class DrifterTrack:
    """Times are fractional day indices. Daily rows are 24 h means centred at noon."""

    id: str
    hourly_time: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hourly_lat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hourly_lon: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hourly_u: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hourly_v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    daily_day: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    daily_lat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    daily_lon: np.ndarray = field(default_factory=lambda: np.zeros(0))
    daily_u: np.ndarray = field(default_factory=lambda: np.zeros(0))
    daily_v: np.ndarray = field(default_factory=lambda: np.zeros(0))


def interpolate_currents(u2d: np.ndarray, v2d: np.ndarray, grid: GridSpec, lat, lon):
    """Bilinear interpolation between cell centres, clamped at the outer half-cells."""
    rows = (np.asarray(lat) - grid.lat_min) / grid.resolution - 0.5
    cols = (np.asarray(lon) - grid.lon_min) / grid.resolution - 0.5
    return _bilinear_sample(u2d, rows, cols), _bilinear_sample(v2d, rows, cols)


def _rk4_hour(u2d, v2d, grid, lat, lon, dt_seconds=3600.0):
    k_deg = 180.0 / (math.pi * EARTH_RADIUS)

    def vel(la, lo):
        uu, vv = interpolate_currents(u2d, v2d, grid, la, lo)
        return vv * k_deg, uu * k_deg / np.cos(np.deg2rad(la))

    a_lat, a_lon = vel(lat, lon)
    b_lat, b_lon = vel(lat + 0.5 * dt_seconds * a_lat, lon + 0.5 * dt_seconds * a_lon)
    c_lat, c_lon = vel(lat + 0.5 * dt_seconds * b_lat, lon + 0.5 * dt_seconds * b_lon)
    d_lat, d_lon = vel(lat + dt_seconds * c_lat, lon + dt_seconds * c_lon)
    new_lat = lat + dt_seconds / 6.0 * (a_lat + 2 * b_lat + 2 * c_lat + d_lat)
    new_lon = lon + dt_seconds / 6.0 * (a_lon + 2 * b_lon + 2 * c_lon + d_lon)
    return new_lat, new_lon


def simulate_drifters(
    world: OceanWorld,
    n_drifters: int,
    seed: int = 0,
    start_days: Sequence[int] | None = None,
    id_prefix: str = "D",
) -> list[DrifterTrack]:
    """Hourly RK4 advection of passive particles in the daily total currents.

    Particles start at uniformly random ocean positions on uniformly random
    days (unless ``start_days`` is given) and stop when they leave the grid
    or reach land.
    """
    if world.n_days < 2:
        raise InputError("drifter simulation needs at least two days")
    grid = world.grid
    rng = np.random.default_rng([int(seed), 5])
    day0 = int(world.days[0])
    if start_days is None:
        start_days = day0 + rng.integers(0, world.n_days - 1, size=n_drifters)
    start_days = np.asarray(start_days, dtype=int)
    lat = np.empty(n_drifters)
    lon = np.empty(n_drifters)
    ocean_cells = np.argwhere(world.ocean)
    if ocean_cells.size == 0:
        raise InputError("world has no ocean cells")
    for i in range(n_drifters):
        r, c = ocean_cells[rng.integers(len(ocean_cells))]
        lat[i] = grid.lat_min + (r + rng.random()) * grid.resolution
        lon[i] = grid.lon_min + (c + rng.random()) * grid.resolution

    active = np.zeros(n_drifters, dtype=bool)
    alive = np.ones(n_drifters, dtype=bool)
    hourly = [[] for _ in range(n_drifters)]
    daily = [[] for _ in range(n_drifters)]
    for k in range(world.n_days):
        day = day0 + k
        active |= alive & (start_days == day)
        if not active.any():
            continue
        idx = np.flatnonzero(active)
        la, lo = lat[idx].copy(), lon[idx].copy()
        rec_lat = np.empty((24, idx.size))
        rec_lon = np.empty((24, idx.size))
        rec_u = np.empty((24, idx.size))
        rec_v = np.empty((24, idx.size))
        ok = np.ones(idx.size, dtype=bool)
        n_valid = np.zeros(idx.size, dtype=int)
        for h in range(24):
            uu, vv = interpolate_currents(world.u[k], world.v[k], grid, la, lo)
            rec_lat[h], rec_lon[h], rec_u[h], rec_v[h] = la, lo, uu, vv
            n_valid += ok
            la, lo = _rk4_hour(world.u[k], world.v[k], grid, la, lo)
            inside = grid.contains(la, lo)
            r, c = grid.cell_index(np.where(inside, la, grid.lat_min), np.where(inside, lo, grid.lon_min))
            ok &= inside & ~world.land[r, c]
        for j, i in enumerate(idx):
            # Samples stop at the hour the particle leaves the ocean; a day
            # enters the daily record only with all 24 hourly samples.
            for h in range(n_valid[j]):
                hourly[i].append((day + h / 24.0, rec_lat[h, j], rec_lon[h, j], rec_u[h, j], rec_v[h, j]))
            if n_valid[j] == 24:
                daily[i].append(
                    (day, rec_lat[:, j].mean(), rec_lon[:, j].mean(), rec_u[:, j].mean(), rec_v[:, j].mean())
                )
        lat[idx], lon[idx] = la, lo
        stopped = idx[~ok]
        alive[stopped] = False
        active[stopped] = False

    tracks = []
    for i in range(n_drifters):
        if not daily[i]:
            continue
        h = np.asarray(hourly[i])
        d = np.asarray(daily[i])
        tracks.append(
            DrifterTrack(
                id=f"{id_prefix}{i:05d}",
                hourly_time=h[:, 0],
                hourly_lat=h[:, 1],
                hourly_lon=h[:, 2],
                hourly_u=h[:, 3],
                hourly_v=h[:, 4],
                daily_day=d[:, 0].astype(int),
                daily_lat=d[:, 1],
                daily_lon=d[:, 2],
                daily_u=d[:, 3],
                daily_v=d[:, 4],
            )
        )
    return tracks


def drifter_samples(tracks: Sequence[DrifterTrack], day: int | None = None):
    """Concatenate daily samples as ``(day, lat, lon, u, v)`` arrays, optionally for one day."""
    cols = [np.concatenate([getattr(t, n) for t in tracks]) if tracks else np.zeros(0)
            for n in ("daily_day", "daily_lat", "daily_lon", "daily_u", "daily_v")]
    days, lat, lon, u, v = cols
    days = days.astype(int)
    if day is not None:
        sel = days == day
        days, lat, lon, u, v = days[sel], lat[sel], lon[sel], u[sel], v[sel]
    return days, lat, lon, u, v


def rasterize_drifters(tracks: Sequence[DrifterTrack], grid: GridSpec, day: int):
    """Grid the daily drifter velocities of ``day``; cells with several drifters average them."""
    _, lat, lon, u, v = drifter_samples(tracks, day)
    inside = grid.contains(lat, lon)
    r, c = grid.cell_index(lat[inside], lon[inside])
    flat = r * grid.n_lon + c
    n = grid.n_lat * grid.n_lon
    counts = np.bincount(flat, minlength=n).astype(np.float64)
    su = np.bincount(flat, weights=u[inside], minlength=n)
    sv = np.bincount(flat, weights=v[inside], minlength=n)
    mask = counts > 0
    uo = np.divide(su, counts, out=np.zeros(n), where=mask).reshape(grid.shape)
    vo = np.divide(sv, counts, out=np.zeros(n), where=mask).reshape(grid.shape)
    mask = mask.reshape(grid.shape)
    return (
        GriddedField(Variable.U, int(day), uo, mask, grid),
        GriddedField(Variable.V, int(day), vo, mask.copy(), grid),
    )


def day_to_iso(day: float) -> str:
    return (EPOCH + dt.timedelta(days=float(day))).strftime("%Y-%m-%dT%H:%M:%SZ")


def iso_to_day(stamp: str) -> float:
    t = dt.datetime.fromisoformat(stamp.replace("Z", "+00:00"))
    if t.tzinfo is None:
        t = t.replace(tzinfo=dt.timezone.utc)
    return (t - EPOCH).total_seconds() / SECONDS_PER_DAY


def write_drifters_csv(tracks: Sequence[DrifterTrack], path) -> Path:
    """Daily 24 h-mean rows ``id,timestamp_iso8601,lat,lon,u,v``; timestamps at noon."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "timestamp_iso8601", "lat", "lon", "u", "v"])
        for t in tracks:
            for d, la, lo, uu, vv in zip(t.daily_day, t.daily_lat, t.daily_lon, t.daily_u, t.daily_v):
                w.writerow([t.id, day_to_iso(d + 0.5), repr(float(la)), repr(float(lo)), repr(float(uu)), repr(float(vv))])
    return path


def read_drifters_csv(path) -> list[DrifterTrack]:
    rows: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["id", "timestamp_iso8601", "lat", "lon", "u", "v"]
        if reader.fieldnames != expected:
            raise InputError(f"drifter CSV header must be {','.join(expected)}, got {reader.fieldnames}")
        for row in reader:
            day = int(math.floor(iso_to_day(row["timestamp_iso8601"])))
            rows.setdefault(row["id"], []).append(
                (day, float(row["lat"]), float(row["lon"]), float(row["u"]), float(row["v"]))
            )
    tracks = []
    for tid, rs in rows.items():
        a = np.asarray(rs)
        tracks.append(
            DrifterTrack(
                id=tid,
                daily_day=a[:, 0].astype(int),
                daily_lat=a[:, 1],
                daily_lon=a[:, 2],
                daily_u=a[:, 3],
                daily_v=a[:, 4],
            )
        )
    return tracks
