"""Run configuration: one JSON document validated against a published schema.

Every section mirrors a library dataclass; unknown keys are rejected so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError, OrcastError
from .geo_grid import GridSpec
from .net import ModelConfig
from .pipeline import EvalConfig, Experiment, ObservationConfig
from .synth_ocean import GeophysParams, SwotConfig, WorldConfig
from .training import StageConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSection(_Strict):
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    resolution: float = Field(1.0 / 30.0, gt=0)


class GeophysSection(_Strict):
    g: float = 9.81
    omega: float = 7.2921e-5
    lat_clamp: float = 20.0


class WorldSection(_Strict):
    grid: GridSection
    n_days: int = Field(60, ge=2)
    n_eddies: int = Field(8, ge=0)
    eddy_amplitude_range: tuple[float, float] = (0.1, 0.3)
    eddy_radius_range: tuple[float, float] = (40.0, 80.0)
    eddy_drift_speed_range: tuple[float, float] = (2.0, 6.0)
    eddy_drift_heading_range: tuple[float, float] = (240.0, 300.0)
    background_ssh_gradient: float = 0.0
    land_fraction: float = Field(0.0, ge=0, lt=1)
    seed: int = 0
    start_day: int = Field(0, ge=0)
    sst_lat_gradient: float = 0.5
    tracer_scale_km: float = 40.0
    tracer_relaxation: float = 0.02
    ageostrophic_mean: tuple[float, float] = (0.0, 0.0)
    ageostrophic_std: float = Field(0.0, ge=0)
    ageostrophic_scale_km: float = 100.0
    geophys: GeophysSection = GeophysSection()


class SwotSection(_Strict):
    swath_half_width: float = 50.0
    gap_width: float = 20.0
    revisit_days: int = 21
    bias_mean: float = 0.0526
    bias_std: float = 0.0332
    noise_std: float = 0.002
    heading_deg: float = 12.0


class ObservationSection(_Strict):
    n_nadir_tracks: int = Field(4, ge=0)
    nadir_spacing_km: float = Field(7.0, gt=0)
    nadir_noise: float = Field(0.01, ge=0)
    swot: SwotSection = SwotSection()
    sst_cloud_cover: float = Field(0.3, ge=0, le=1)
    chl_cloud_cover: float = Field(0.5, ge=0, le=1)
    n_train_drifters: int = Field(600, ge=0)
    n_eval_drifters: int = Field(1500, ge=0)
    eval_start_day: Optional[int] = None
    seed: int = 1


class ModelSection(_Strict):
    T_in: int = Field(5, ge=1)
    T_out: int = Field(3, ge=1)
    patch_h: int = 32
    patch_w: int = 32
    input_variables: tuple[str, ...] = ("SSH_nadir", "SST")
    latent_channels: int = 16
    n_gsta_blocks: int = Field(4, ge=1)
    embed_dim: int = 32
    hidden_channels: int = 128
    domain: Optional[tuple[float, float, float, float]] = None


class StageSection(_Strict):
    stage: Literal["S1", "S2", "S3"]
    learning_rate: Optional[float] = Field(None, gt=0)
    weight_decay: Optional[float] = Field(None, ge=0)
    epochs: Optional[int] = Field(None, ge=1)
    patches_per_epoch: Optional[int] = Field(None, ge=1)
    frozen_groups: Optional[tuple[str, ...]] = None
    target_source: Literal["L4_ANALOG", "NEUROST_ANALOG"] = "L4_ANALOG"
    batch_size: Optional[int] = Field(None, ge=1)


class TileSection(_Strict):
    stride: Optional[int] = Field(None, ge=1)
    sigma_cells: Optional[float] = Field(None, gt=0)


class EvaluationSection(_Strict):
    first_issue_day: int
    last_issue_day: int
    issue_stride: int = Field(1, ge=1)
    region: str = "world"
    speed_filter: float = 0.25


class TrainingSection(_Strict):
    last_day: int
    stage1_target: Literal["L4_ANALOG", "NEUROST_ANALOG"] = "L4_ANALOG"
    climatology_cell_deg: float = Field(2.0, gt=0)
    climatology_period_days: int = Field(7, ge=1)


class RunConfig(_Strict):
    world: WorldSection
    observations: ObservationSection = ObservationSection()
    model: ModelSection = ModelSection()
    stages: tuple[StageSection, ...] = (StageSection(stage="S1"), StageSection(stage="S2"), StageSection(stage="S3"))
    training: TrainingSection
    tile: TileSection = TileSection()
    evaluation: EvaluationSection
    seed: int = Field(0, ge=0, lt=2**64)
    output_dir: Optional[str] = None

    # ------------------------------------------------------------------ conversions

    def grid(self) -> GridSpec:
        g = self.world.grid
        return GridSpec(g.lat_min, g.lat_max, g.lon_min, g.lon_max, g.resolution)

    def world_config(self) -> WorldConfig:
        w = self.world.model_dump(exclude={"grid", "geophys"})
        return WorldConfig(grid=self.grid(), geophys=GeophysParams(**self.world.geophys.model_dump()), **w)

    def observation_config(self) -> ObservationConfig:
        o = self.observations.model_dump(exclude={"swot"})
        return ObservationConfig(swot=SwotConfig(**self.observations.swot.model_dump()), **o)

    def model_config_(self) -> ModelConfig:
        m = self.model.model_dump()
        if m["domain"] is None:
            g = self.grid()
            m["domain"] = (g.lat_min, g.lat_max, g.lon_min, g.lon_max)
        return ModelConfig(**m)

    def stage_configs(self) -> tuple[StageConfig, ...]:
        out = []
        for s in self.stages:
            overrides = {k: v for k, v in s.model_dump().items() if v is not None and k != "stage"}
            if s.stage == "S1":
                overrides["target_source"] = self.training.stage1_target
            out.append(StageConfig.default(s.stage, **overrides))
        return tuple(out)

    def eval_config(self) -> EvalConfig:
        e = self.evaluation
        return EvalConfig(e.first_issue_day, e.last_issue_day, e.issue_stride, e.region, self.tile.stride, e.speed_filter)

    def experiment(self) -> Experiment:
        return Experiment(
            world=self.world_config(),
            observations=self.observation_config(),
            model=self.model_config_(),
            stages=self.stage_configs(),
            train_last_day=self.training.last_day,
            evaluation=self.eval_config(),
            climatology_cell_deg=self.training.climatology_cell_deg,
            climatology_period_days=self.training.climatology_period_days,
        )


def _format_errors(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(doc: dict) -> RunConfig:
    """Validate a config mapping; schema violations raise ConfigError naming the offending path."""
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as err:
        raise ConfigError(f"invalid config: {_format_errors(err)}") from None
    try:
        # Dataclass-level checks (grid extent, latitude band, patch divisibility).
        cfg.experiment().world.validate()
    except OrcastError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid config: {err}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return parse_config(doc)


def config_schema() -> dict:
    return RunConfig.model_json_schema()
