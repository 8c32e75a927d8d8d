"""End-to-end orchestration: world -> observations -> curriculum -> forecasts -> scores.

Also holds the pinned acceptance experiment used by the test-suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError
from .forecast import ArrayStore, ForecastProduct, TilePlan, forecast, persistence_forecast, tile_domain
from .geo_grid import GriddedDataset, GriddedField, GridSpec, Variable, get_region, save_dataset
from .metrics import MetricsReport, evaluate, match_drifters
from .net import ModelConfig, OrcastNet, content_hash, init_parameters
from .synth_ocean import (
    DrifterTrack,
    OceanWorld,
    SwotConfig,
    WorldConfig,
    geostrophy,
    l4_currents,
    observe_imagery,
    observe_nadir,
    observe_swot,
    rasterize_drifters,
    read_drifters_csv,
    simulate_drifters,
    simulate_world,
    write_drifters_csv,
)
from .training import ANALYSIS_SIGMA, StageConfig, StageResult, TrainingData, run_curriculum


@dataclass(frozen=True)
class ObservationConfig:
    n_nadir_tracks: int = 4
    nadir_spacing_km: float = 7.0
    nadir_noise: float = 0.01
    swot: SwotConfig = SwotConfig()
    sst_cloud_cover: float = 0.3
    chl_cloud_cover: float = 0.5
    n_train_drifters: int = 600
    n_eval_drifters: int = 1500
    eval_start_day: int | None = None
    seed: int = 1


@dataclass(eq=False)
class Observations:
    grid: GridSpec
    days: np.ndarray
    land: np.ndarray
    sources: dict[str, tuple[np.ndarray, np.ndarray]]
    train_tracks: list[DrifterTrack]
    eval_tracks: list[DrifterTrack]

    def store(self) -> ArrayStore:
        return ArrayStore(self.days, self.sources)

    def training_data(self, last_day: int | None = None) -> TrainingData:
        data = TrainingData(self.grid, self.days, self.land, dict(self.sources))
        if last_day is not None:
            data = data.subset_days(int(self.days[0]), last_day)
        return data


def generate_observations(world: OceanWorld, cfg: ObservationConfig = ObservationConfig()) -> Observations:
    """Sample every observing system of the curriculum from ``world``."""
    grid, days = world.grid, world.days
    seed = cfg.seed
    stacks: dict[str, list] = {k: ([], []) for k in ("ssh_nadir", "ssh_swot", "sst", "chl")}
    for d in days:
        fields_ = {
            "ssh_nadir": observe_nadir(world, d, cfg.n_nadir_tracks, cfg.nadir_spacing_km, cfg.nadir_noise, seed),
            "ssh_swot": observe_swot(world, d, cfg.swot, seed),
            "sst": observe_imagery(world, d, Variable.SST, cfg.sst_cloud_cover, seed),
            "chl": observe_imagery(world, d, Variable.CHL, cfg.chl_cloud_cover, seed),
        }
        for k, f in fields_.items():
            stacks[k][0].append(f.values)
            stacks[k][1].append(f.mask)
    sources = {k: (np.stack(v), np.stack(m)) for k, (v, m) in stacks.items()}

    sw_v, sw_m = sources["ssh_swot"]
    u_sw, v_sw, ok = geostrophy(sw_v, sw_m, grid, world.params)
    sources["u_swot"] = (u_sw, ok)
    sources["v_swot"] = (v_sw, ok.copy())
    for name, target in (("l4", "L4_ANALOG"), ("neurost", "NEUROST_ANALOG")):
        u, v = l4_currents(world, ANALYSIS_SIGMA[target])
        sources[f"u_{name}"] = (u, world.current_mask.copy())
        sources[f"v_{name}"] = (v, world.current_mask.copy())

    eval_start = cfg.eval_start_day if cfg.eval_start_day is not None else int(days[0]) + len(days) // 2
    train_last = eval_start - 1
    train_days = [d for d in days[:-1] if d < train_last]
    rng = np.random.default_rng([seed, 11])
    train_starts = rng.choice(train_days, size=cfg.n_train_drifters) if train_days else None
    train_tracks = simulate_drifters(world, cfg.n_train_drifters, seed=seed, start_days=train_starts, id_prefix="T") if train_days else []
    # Training drifters stop contributing at the end of the training window.
    train_tracks = [_truncate(t, train_last) for t in train_tracks]
    train_tracks = [t for t in train_tracks if len(t.daily_day)]
    eval_days = [d for d in days[:-1] if d >= eval_start - 5]
    eval_starts = rng.choice(eval_days, size=cfg.n_eval_drifters) if eval_days else None
    eval_tracks = simulate_drifters(world, cfg.n_eval_drifters, seed=seed + 7919, start_days=eval_starts, id_prefix="E") if eval_days else []

    ud, vd = [], []
    for d in days:
        fu, fv = rasterize_drifters(train_tracks, grid, d)
        ud.append((fu.values, fu.mask))
        vd.append((fv.values, fv.mask))
    sources["u_drifter"] = (np.stack([a for a, _ in ud]), np.stack([m for _, m in ud]))
    sources["v_drifter"] = (np.stack([a for a, _ in vd]), np.stack([m for _, m in vd]))
    return Observations(grid, np.asarray(days), world.land.copy(), sources, train_tracks, eval_tracks)


def _truncate(track: DrifterTrack, last_day: int) -> DrifterTrack:
    keep = track.daily_day <= last_day
    hkeep = track.hourly_time < last_day + 1
    return DrifterTrack(
        track.id,
        track.hourly_time[hkeep], track.hourly_lat[hkeep], track.hourly_lon[hkeep],
        track.hourly_u[hkeep], track.hourly_v[hkeep],
        track.daily_day[keep], track.daily_lat[keep], track.daily_lon[keep],
        track.daily_u[keep], track.daily_v[keep],
    )


VARIABLE_TYPES = {
    "ssh_nadir": "SSH", "ssh_swot": "SSH", "sst": "SST", "chl": "CHL",
    "u_swot": "U", "v_swot": "V", "u_l4": "U", "v_l4": "V", "u_neurost": "U", "v_neurost": "V",
    "u_drifter": "U", "v_drifter": "V",
}


def save_observations(obs: Observations, world: OceanWorld | None, out_dir) -> Path:
    out_dir = Path(out_dir)
    save_dataset(out_dir / "observations", obs.grid, obs.sources, int(obs.days[0]), VARIABLE_TYPES,
                 {"land": obs.land.astype(int).tolist()})
    if world is not None:
        truth = {
            "ssh": (world.ssh, np.broadcast_to(world.ocean, world.ssh.shape)),
            "u": (world.u, world.current_mask),
            "v": (world.v, world.current_mask),
            "sst": (world.sst, np.broadcast_to(world.ocean, world.ssh.shape)),
            "chl": (world.chl, np.broadcast_to(world.ocean, world.ssh.shape)),
        }
        save_dataset(out_dir / "truth", world.grid, truth, int(world.days[0]),
                     {"ssh": "SSH", "u": "U", "v": "V", "sst": "SST", "chl": "CHL"})
    write_drifters_csv(obs.train_tracks, out_dir / "drifters_train.csv")
    write_drifters_csv(obs.eval_tracks, out_dir / "drifters_eval.csv")
    return out_dir


def load_observations(out_dir) -> Observations:
    out_dir = Path(out_dir)
    ds = GriddedDataset(out_dir / "observations")
    sources = {name: ds.read_all(name) for name in ds.variables}
    land = np.asarray(ds.meta["land"], dtype=bool)
    return Observations(ds.grid, np.asarray(list(ds.days)), land, sources,
                        read_drifters_csv(out_dir / "drifters_train.csv"),
                        read_drifters_csv(out_dir / "drifters_eval.csv"))


# --------------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalConfig:
    first_issue_day: int
    last_issue_day: int
    issue_stride: int = 1
    region: str = "world"
    tile_stride: int | None = None
    speed_filter: float = 0.25

    def issue_days(self) -> list[int]:
        return list(range(self.first_issue_day, self.last_issue_day + 1, self.issue_stride))


def forecast_products(model: OrcastNet, normalizer, obs: Observations, eval_cfg: EvalConfig, store=None) -> list[ForecastProduct]:
    cfg = model.config
    plan = tile_domain(obs.grid, None, (cfg.patch_h, cfg.patch_w), eval_cfg.tile_stride)
    store = store or obs.store()
    h = content_hash(model)
    return [forecast(model, normalizer, store, T, obs.grid, plan, obs.land, checkpoint_hash=h) for T in eval_cfg.issue_days()]


def score_products(products: Sequence[ForecastProduct], tracks, eval_cfg: EvalConfig, label: str = "", n_leads: int | None = None) -> MetricsReport:
    pairs = []
    for p in products:
        pairs.extend(match_drifters(p, tracks, eval_cfg.speed_filter))
    if eval_cfg.region != "world":
        region = get_region(eval_cfg.region)
        pairs = [q for q in pairs if region.contains(q.lat, q.lon)]
    n_leads = n_leads or (products[0].n_leads if products else 0)
    h = products[0].provenance.get("checkpoint_hash", "") if products else ""
    return evaluate(pairs, leads=list(range(1, n_leads + 1)), region=eval_cfg.region, checkpoint_hash=h, label=label)


def evaluate_model(model: OrcastNet, normalizer, obs: Observations, eval_cfg: EvalConfig, label: str = "") -> MetricsReport:
    products = forecast_products(model, normalizer, obs, eval_cfg)
    return score_products(products, obs.eval_tracks, eval_cfg, label)


def persistence_products(obs: Observations, eval_cfg: EvalConfig, n_leads: int, source: str = "l4",
                         reference_offset: int = 1) -> list[ForecastProduct]:
    """Persistence of a gridded analysis (``l4`` or ``neurost``).

    The analysis valid on ``T + reference_offset`` is held over every lead.
    The default of one day mirrors delayed-time products, whose next-day map
    is the natural baseline for a next-day forecast.
    """
    u_all, mu = obs.sources[f"u_{source}"]
    v_all, mv = obs.sources[f"v_{source}"]
    out = []
    for T in eval_cfg.issue_days():
        k = int(T + reference_offset - obs.days[0])
        if not 0 <= k < len(obs.days):
            raise InputError(f"no {source} analysis on day {T + reference_offset}")
        fu = GriddedField(Variable.U, T, u_all[k], mu[k], obs.grid)
        fv = GriddedField(Variable.V, T, v_all[k], mv[k], obs.grid)
        out.append(persistence_forecast(fu, fv, T, n_leads))
    return out


def evaluate_persistence(obs: Observations, eval_cfg: EvalConfig, n_leads: int, source: str = "l4",
                         reference_offset: int = 1) -> MetricsReport:
    return score_products(persistence_products(obs, eval_cfg, n_leads, source, reference_offset), obs.eval_tracks, eval_cfg,
                          label=f"persistence ({source})", n_leads=n_leads)


# --------------------------------------------------------------------------- experiments


@dataclass(frozen=True)
class Experiment:
    world: WorldConfig
    observations: ObservationConfig
    model: ModelConfig
    stages: tuple[StageConfig, ...]
    train_last_day: int
    evaluation: EvalConfig
    climatology_cell_deg: float = 2.0
    climatology_period_days: int = 7


@dataclass(eq=False)
class ExperimentResult:
    seed: int
    stage1_target: str
    stages: list[StageResult]
    reports: dict[str, MetricsReport]
    normalizer: object


def prepare(exp: Experiment):
    world = simulate_world(exp.world)
    obs = generate_observations(world, exp.observations)
    return world, obs


def run_experiment(exp: Experiment, seed: int, stage1_target: str = "L4_ANALOG", prepared=None,
                   out_dir=None) -> ExperimentResult:
    """Train the curriculum from ``seed`` and score every stage on held-out drifters."""
    world, obs = prepared or prepare(exp)
    data = obs.training_data(exp.train_last_day)
    data.fit_normalizer(stage1_target, exp.climatology_cell_deg, exp.climatology_period_days)
    stages = [replace(s, target_source=stage1_target) if s.stage == "S1" else s for s in exp.stages]
    model = init_parameters(exp.model, seed)
    results = run_curriculum(model, stages, data, seed, out_dir=out_dir)
    reports = {r.stage: evaluate_model(r.model, data.normalizer, obs, exp.evaluation, label=r.stage) for r in results}
    return ExperimentResult(seed, stage1_target, results, reports, data.normalizer)


def acceptance_world() -> WorldConfig:
    """The pinned moving-eddy world used by the acceptance criteria."""
    grid = GridSpec.from_shape(32.0, -40.0, 64, 64, 1.0 / 12.0)
    return WorldConfig(
        grid=grid,
        n_days=330,
        n_eddies=40,
        eddy_amplitude_range=(0.1, 0.3),
        eddy_radius_range=(20.0, 40.0),
        eddy_drift_speed_range=(3.0, 8.0),
        eddy_drift_heading_range=(240.0, 300.0),
        background_ssh_gradient=0.0,
        land_fraction=0.04,
        seed=20240,
        ageostrophic_mean=(0.06, 0.04),
        ageostrophic_std=0.04,
        ageostrophic_scale_km=120.0,
    )


def acceptance_experiment() -> Experiment:
    world = acceptance_world()
    model = ModelConfig(
        T_in=5, T_out=7, patch_h=32, patch_w=32, input_variables=("SSH_nadir", "SST"),
        latent_channels=8, n_gsta_blocks=4, hidden_channels=64,
        domain=(world.grid.lat_min, world.grid.lat_max, world.grid.lon_min, world.grid.lon_max),
    )
    stages = (
        StageConfig.default("S1", epochs=50, patches_per_epoch=128),
        StageConfig.default("S2", epochs=20, patches_per_epoch=128),
        StageConfig.default("S3", epochs=20, patches_per_epoch=128),
    )
    return Experiment(
        world=world,
        observations=ObservationConfig(eval_start_day=290, seed=3),
        model=model,
        stages=stages,
        train_last_day=289,
        evaluation=EvalConfig(first_issue_day=292, last_issue_day=322),
        climatology_period_days=365,
    )
