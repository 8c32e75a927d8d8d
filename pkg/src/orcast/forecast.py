"""Domain-scale forecasts from patch predictions, and persistence baselines."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np
import torch

from .errors import ConfigError, InputError
from .geo_grid import GriddedDataset, GriddedField, GridSpec, RegionSpec, Variable, save_dataset
from .net import OUTPUT_VARIABLES, OrcastNet, PatchCoords, content_hash
from .training import INPUT_SOURCES, Normalizer


@dataclass(frozen=True)
class TilePlan:
    patch: tuple[int, int]
    stride: tuple[int, int]
    anchors: tuple[tuple[int, int], ...]


def _axis_anchors(lo: int, extent: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return [lo + s for s in starts]


def tile_domain(grid: GridSpec, region: RegionSpec | None, patch_size, stride=None) -> TilePlan:
    """Overlapping patch anchors covering the part of ``grid`` inside ``region``."""
    ph, pw = (patch_size, patch_size) if np.isscalar(patch_size) else tuple(patch_size)
    if stride is None:
        sh, sw = max(ph // 2, 1), max(pw // 2, 1)
    else:
        sh, sw = (stride, stride) if np.isscalar(stride) else tuple(stride)
    if sh < 1 or sw < 1 or sh > ph or sw > pw:
        raise ConfigError(f"stride {(sh, sw)} must lie in 1..patch size {(ph, pw)}")
    lat, lon = grid.lat_centers(), grid.lon_centers()
    if region is None:
        rows, cols = np.arange(grid.n_lat), np.arange(grid.n_lon)
    else:
        lat_lo, lat_hi = region.lat_extent
        rows = np.flatnonzero((lat >= lat_lo) & (lat <= lat_hi))
        cols = np.flatnonzero((lon >= region.lon_range[0]) & (lon <= region.lon_range[1]))
    if rows.size == 0 or cols.size == 0:
        raise ConfigError("region does not intersect the grid")
    r0, c0 = int(rows[0]), int(cols[0])
    n_r, n_c = int(rows[-1]) - r0 + 1, int(cols[-1]) - c0 + 1
    if ph > n_r or pw > n_c:
        raise ConfigError(f"patch {ph}x{pw} larger than region extent {n_r}x{n_c}")
    anchors = tuple((r, c) for r in _axis_anchors(r0, n_r, ph, sh) for c in _axis_anchors(c0, n_c, pw, sw))
    return TilePlan((ph, pw), (sh, sw), anchors)


def gaussian_kernel(h: int, w: int, sigma=None) -> np.ndarray:
    sy, sx = (h / 4.0, w / 4.0) if sigma is None else ((sigma, sigma) if np.isscalar(sigma) else sigma)
    y = np.arange(h) - (h - 1) / 2.0
    x = np.arange(w) - (w - 1) / 2.0
    return np.exp(-(y[:, None] ** 2) / (2 * sy**2) - (x[None, :] ** 2) / (2 * sx**2))


def gaussian_merge(patch_outputs: Sequence[tuple[tuple[int, int], np.ndarray]], grid_extent, sigma_cells=None):
    """Gaussian-weighted average of overlapping patches.

    ``patch_outputs`` holds ``((row, col), values[..., h, w])``. Returns
    ``(merged[..., H, W], covered[H, W])``. The reduction runs in a canonical
    order so the result does not depend on list order, and cells seen by a
    single patch take that patch's values verbatim.
    """
    if not patch_outputs:
        raise InputError("gaussian_merge needs at least one patch")
    H, W = grid_extent
    items = sorted(
        ((tuple(int(a) for a in anchor), np.asarray(v, dtype=np.float64)) for anchor, v in patch_outputs),
        key=lambda it: (it[0], hashlib.sha1(it[1].tobytes()).hexdigest()),
    )
    lead_shape = items[0][1].shape[:-2]
    num = np.zeros(lead_shape + (H, W))
    den = np.zeros((H, W))
    count = np.zeros((H, W), dtype=int)
    single = np.zeros(lead_shape + (H, W))
    for (r, c), v in items:
        h, w = v.shape[-2:]
        if r < 0 or c < 0 or r + h > H or c + w > W:
            raise InputError(f"patch at {(r, c)} of size {h}x{w} exceeds extent {H}x{W}")
        k = gaussian_kernel(h, w, sigma_cells)
        num[..., r : r + h, c : c + w] += k * v
        den[r : r + h, c : c + w] += k
        count[r : r + h, c : c + w] += 1
        single[..., r : r + h, c : c + w] = v
    covered = count > 0
    merged = np.divide(num, den, out=np.zeros_like(num), where=covered)
    merged = np.where(count == 1, single, merged)
    return merged, covered


# --------------------------------------------------------------------------- products


@dataclass(eq=False)
class ForecastProduct:
    """Lead-time fields ``{SSH, U, V: (values[T_out, H, W], mask)}`` in physical units."""

    issue_day: int
    grid: GridSpec
    fields: dict[str, tuple[np.ndarray, np.ndarray]]
    provenance: dict = field(default_factory=dict)

    @property
    def n_leads(self) -> int:
        return next(iter(self.fields.values()))[0].shape[0]

    @property
    def leads(self) -> list[int]:
        return list(range(1, self.n_leads + 1))

    def field(self, variable: str, lead: int) -> GriddedField:
        values, mask = self.fields[variable]
        return GriddedField(Variable(variable), self.issue_day + lead, values[lead - 1], mask[lead - 1], self.grid)

    def save(self, path) -> Path:
        meta = {
            "issue_day": int(self.issue_day),
            "leads": self.leads,
            "checkpoint_hash": self.provenance.get("checkpoint_hash", ""),
            "provenance": self.provenance,
        }
        return save_dataset(
            path,
            self.grid,
            {k.lower(): v for k, v in self.fields.items()},
            day0=self.issue_day + 1,
            variable_types={k.lower(): k for k in self.fields},
            extra_meta=meta,
        )

    @classmethod
    def load(cls, path) -> "ForecastProduct":
        ds = GriddedDataset(path)
        fields_ = {}
        for name in ds.variables:
            fields_[ds.meta["variable_types"].get(name, name.upper())] = ds.read_all(name)
        return cls(int(ds.meta["issue_day"]), ds.grid, fields_, dict(ds.meta.get("provenance", {})))


class ObservationStore(Protocol):
    def read(self, name: str, day: int) -> tuple[np.ndarray, np.ndarray]: ...


class ArrayStore:
    """In-memory stand-in for :class:`GriddedDataset` over ``{name: (values, mask)}`` stacks."""

    def __init__(self, days: Sequence[int], sources: Mapping[str, tuple[np.ndarray, np.ndarray]]):
        self.day0 = int(days[0])
        self.n_days = len(days)
        self.sources = sources

    def read(self, name, day):
        if name not in self.sources:
            raise InputError(f"missing observation source {name!r}")
        k = int(day) - self.day0
        if not 0 <= k < self.n_days:
            raise InputError(f"day {day} not available")
        v, m = self.sources[name]
        return v[k], m[k]


def _read_history(store, names, days):
    out, missing = {}, []
    for name in names:
        vals, masks = [], []
        for d in days:
            try:
                v, m = store.read(name, d)
            except InputError:
                missing.append((name, d))
                continue
            vals.append(v)
            masks.append(m)
        if vals:
            out[name] = (np.stack(vals), np.stack(masks))
    if missing:
        listing = ", ".join(f"{n}@{d}" for n, d in missing)
        raise InputError(f"missing input days: {listing}")
    return out


def forecast(model: OrcastNet, normalizer: Normalizer, store, issue_day: int, grid: GridSpec,
             tile_plan: TilePlan, land: np.ndarray | None = None, sigma_cells=None,
             checkpoint_hash: str | None = None, batch_size: int = 16) -> ForecastProduct:
    """Forecast ``T_out`` days from observations dated ``issue_day - T_in + 1 .. issue_day``.

    No observation dated after ``issue_day`` is read.
    """
    cfg = model.config
    if tuple(tile_plan.patch) != (cfg.patch_h, cfg.patch_w):
        raise ConfigError(f"tile patch {tile_plan.patch} differs from model patch {(cfg.patch_h, cfg.patch_w)}")
    days = list(range(issue_day - cfg.T_in + 1, issue_day + 1))
    names = {v: INPUT_SOURCES[v] for v in cfg.input_variables}
    raw = _read_history(store, [s for s, _ in names.values()], days)
    norm_in, mask_in = {}, {}
    for var, (source, clim_var) in names.items():
        v, m = raw[source]
        norm_in[var] = normalizer.normalize_stack(clim_var, v, m, days, grid)
        mask_in[var] = m

    h, w = cfg.patch_h, cfg.patch_w
    week = PatchCoords.week_of(issue_day)
    dtype = next(model.parameters()).dtype
    preds = {var: [] for var in OUTPUT_VARIABLES}
    anchors = list(tile_plan.anchors)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(anchors), batch_size):
            chunk = anchors[start : start + batch_size]
            inputs = {v: torch.as_tensor(np.stack([norm_in[v][:, r : r + h, c : c + w] for r, c in chunk])).to(dtype) for v in norm_in}
            masks = {v: torch.as_tensor(np.stack([mask_in[v][:, r : r + h, c : c + w] for r, c in chunk])) for v in mask_in}
            coords = []
            for r, c in chunk:
                sub = grid.subgrid(r, c, h, w)
                coords.append(PatchCoords(0.5 * (sub.lat_min + sub.lat_max), 0.5 * (sub.lon_min + sub.lon_max), week, grid.resolution))
            out = model(inputs, masks, coords)
            for var in OUTPUT_VARIABLES:
                preds[var].extend(out[var].detach().to(torch.float64).numpy())

    lead_days = [issue_day + l for l in range(1, cfg.T_out + 1)]
    ocean = np.ones(grid.shape, dtype=bool) if land is None else ~land
    fields_ = {}
    for var in OUTPUT_VARIABLES:
        physical = []
        for (r, c), p in zip(anchors, preds[var]):
            sub = grid.subgrid(r, c, h, w)
            physical.append(((r, c), normalizer.denormalize_stack(Variable(var), p, lead_days, sub)))
        merged, covered = gaussian_merge(physical, grid.shape, sigma_cells)
        mask = np.broadcast_to(covered & ocean, merged.shape).copy()
        fields_[var] = (np.where(mask, merged, 0.0), mask)
    provenance = {
        "checkpoint_hash": checkpoint_hash or content_hash(model),
        "config": cfg.to_dict(),
        "tile_stride": list(tile_plan.stride),
    }
    return ForecastProduct(int(issue_day), grid, fields_, provenance)


def persistence_forecast(reference_u: GriddedField, reference_v: GriddedField, issue_day: int, n_leads: int,
                         reference_ssh: GriddedField | None = None) -> ForecastProduct:
    """Every lead repeats the reference analysis."""
    grid = reference_u.grid
    fields_ = {}
    refs = {"U": reference_u, "V": reference_v}
    if reference_ssh is not None:
        refs["SSH"] = reference_ssh
    for var, ref in refs.items():
        fields_[var] = (
            np.repeat(ref.values[None], n_leads, axis=0),
            np.repeat(ref.mask[None], n_leads, axis=0),
        )
    return ForecastProduct(int(issue_day), grid, fields_, {"checkpoint_hash": "persistence", "reference_day": reference_u.day})


def export_snapshots(product: ForecastProduct, out_dir, every: int = 4) -> list[Path]:
    """PNG heatmap of SSH with subsampled current arrows, one file per lead."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lat, lon = product.grid.lat_centers(), product.grid.lon_centers()
    paths = []
    for lead in product.leads:
        fig, ax = plt.subplots(figsize=(6, 5))
        if "SSH" in product.fields:
            ssh, m = product.fields["SSH"]
            ax.pcolormesh(lon, lat, np.where(m[lead - 1], ssh[lead - 1], np.nan), shading="auto", cmap="RdBu_r")
        u, mu = product.fields["U"]
        v, _ = product.fields["V"]
        s = (slice(None, None, every), slice(None, None, every))
        uu = np.where(mu[lead - 1], u[lead - 1], np.nan)[s]
        vv = np.where(mu[lead - 1], v[lead - 1], np.nan)[s]
        ax.quiver(lon[::every], lat[::every], uu, vv)
        ax.set_title(f"issue day {product.issue_day}, lead +{lead}")
        p = out_dir / f"lead{lead:02d}.png"
        fig.savefig(p, dpi=80)
        plt.close(fig)
        paths.append(p)
    return paths
