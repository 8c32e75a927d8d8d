"""Three-stage masked training curriculum.

Stage 1 regresses along-track SSH and a gap-free gridded geostrophic
analysis, stage 2 swath SSH and swath-derived geostrophy, stage 3 drifter
velocities with the SSH path frozen. Every stage minimises a masked,
magnitude-weighted MSE in normalised units.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import torch

from .errors import ConfigError, InputError, NumericalError
from .geo_grid import Climatology, GridSpec, Variable, climatology_from_arrays, week_index
from .net import OUTPUT_VARIABLES, OrcastNet, PatchCoords, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("S1", "S2", "S3")
TARGET_SOURCES = ("L4_ANALOG", "NEUROST_ANALOG")
# Gaussian blur (cells) applied to the truth geostrophy by each gridded analysis analog.
ANALYSIS_SIGMA = {"L4_ANALOG": 3.0, "NEUROST_ANALOG": 1.0}
# Model input name -> (observation source, climatology variable).
INPUT_SOURCES = {
    "SSH_nadir": ("ssh_nadir", Variable.SSH),
    "SST": ("sst", Variable.SST),
    "CHL": ("chl", Variable.CHL),
    "SSH_swot": ("ssh_swot", Variable.SSH),
}
V_REF = 0.25
W_MAX = 5.0


@dataclass(frozen=True)
class StageConfig:
    stage: str
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 50
    patches_per_epoch: int = 1000
    frozen_groups: tuple[str, ...] | None = None
    target_source: str = "L4_ANALOG"
    batch_size: int = 8
    v_ref: float = V_REF
    w_max: float = W_MAX

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.target_source not in TARGET_SOURCES:
            raise ConfigError(f"unknown target_source {self.target_source!r}")
        if self.epochs < 0 or self.patches_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0, patches_per_epoch and batch_size >= 1")
        if self.v_ref <= 0:
            raise ConfigError("v_ref must be positive")
        if self.frozen_groups is not None:
            object.__setattr__(self, "frozen_groups", tuple(self.frozen_groups))

    @classmethod
    def default(cls, stage: str, **overrides) -> "StageConfig":
        """Stage defaults: lr 1e-3 then /10 for stages 2 and 3; desk epochs 50/20/10."""
        base = {
            "S1": dict(learning_rate=1e-3, epochs=50),
            "S2": dict(learning_rate=1e-4, epochs=20),
            "S3": dict(learning_rate=1e-4, epochs=10),
        }[stage]
        base.update(overrides)
        return cls(stage=stage, **base)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.patches_per_epoch / self.batch_size)

    def resolve_frozen(self, model: OrcastNet) -> set[str]:
        """Groups frozen for this stage.

        Stage 3 fine-tunes only the current decoders by default, and always
        freezes ``decoder[SSH]``.
        """
        if self.frozen_groups is None:
            if self.stage == "S3":
                return {g for g in model.group_names() if g not in ("decoder[U]", "decoder[V]")}
            return set()
        frozen = set(self.frozen_groups)
        if "all" in frozen:
            frozen = set(model.group_names())
        if self.stage == "S3":
            frozen.add("decoder[SSH]")
        return frozen

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["frozen_groups"] = None if self.frozen_groups is None else list(self.frozen_groups)
        return d


# --------------------------------------------------------------------------- normalisation


@dataclass(eq=False)
class Normalizer:
    """Climatologies per physical variable, with cached full-grid weekly maps."""

    climatologies: dict[str, Climatology]
    _cache: dict = field(default_factory=dict, repr=False)

    def clim(self, variable: Variable | str) -> Climatology:
        key = Variable(variable).value
        if key not in self.climatologies:
            raise InputError(f"no climatology for {key}")
        return self.climatologies[key]

    def maps(self, variable, grid: GridSpec, day: int):
        c = self.clim(variable)
        key = (c.variable.value, grid, int(week_index(day, c.period)))
        if key not in self._cache:
            self._cache[key] = c.maps(grid, day)
        return self._cache[key]

    def normalize_stack(self, variable, values, masks, days, grid):
        out = np.zeros(values.shape, dtype=np.float64)
        for k, d in enumerate(days):
            mean, std = self.maps(variable, grid, d)
            out[k] = np.where(masks[k], (values[k] - mean) / std, 0.0)
        return out

    def denormalize_stack(self, variable, values, days, grid):
        out = np.empty(values.shape, dtype=np.float64)
        for k, d in enumerate(days):
            mean, std = self.maps(variable, grid, d)
            out[k] = values[k] * std + mean
        return out

    def to_dict(self) -> dict:
        return {k: c.to_dict() for k, c in sorted(self.climatologies.items())}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Normalizer":
        return cls({k: Climatology.from_dict(v) for k, v in d.items()})


# --------------------------------------------------------------------------- data


@dataclass(eq=False)
class TrainingData:
    """Physical-unit observation stacks ``{source: (values[D, H, W], mask)}`` on one grid."""

    grid: GridSpec
    days: np.ndarray
    land: np.ndarray
    sources: dict[str, tuple[np.ndarray, np.ndarray]]
    normalizer: Normalizer | None = None
    _norm_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.days = np.asarray(self.days, dtype=int)
        for name, (v, m) in self.sources.items():
            if v.shape != (len(self.days),) + self.grid.shape or m.shape != v.shape:
                raise InputError(f"source {name} has shape {v.shape}, expected {(len(self.days),) + self.grid.shape}")

    def source(self, name: str):
        if name not in self.sources:
            raise InputError(f"missing observation source {name!r}")
        return self.sources[name]

    def subset_days(self, first: int, last: int) -> "TrainingData":
        """Days ``first..last`` inclusive (day indices, not positions)."""
        sel = (self.days >= first) & (self.days <= last)
        return TrainingData(
            self.grid,
            self.days[sel],
            self.land,
            {k: (v[sel], m[sel]) for k, (v, m) in self.sources.items()},
            self.normalizer,
        )

    def fit_normalizer(self, stage1_target: str = "L4_ANALOG", cell_size: float = 2.0, period: int = 7) -> Normalizer:
        """Per-dataset climatologies: SSH from nadir, SST/CHL from imagery, U/V from the stage-1 analysis."""
        suffix = "l4" if stage1_target == "L4_ANALOG" else "neurost"
        spec = {
            Variable.SSH: "ssh_nadir",
            Variable.SST: "sst",
            Variable.CHL: "chl",
            Variable.U: f"u_{suffix}",
            Variable.V: f"v_{suffix}",
        }
        clims = {}
        for var, name in spec.items():
            if name not in self.sources:
                continue
            v, m = self.sources[name]
            if not m.any():
                continue
            clims[var.value] = climatology_from_arrays(var, self.grid, v, m, self.days, cell_size, period)
        self.normalizer = Normalizer(clims)
        self._norm_cache.clear()
        return self.normalizer

    def normalized(self, name: str, variable: Variable):
        key = (name, variable.value)
        if key not in self._norm_cache:
            if self.normalizer is None:
                raise InputError("TrainingData has no normalizer; call fit_normalizer first")
            v, m = self.source(name)
            self._norm_cache[key] = (self.normalizer.normalize_stack(variable, v, m, self.days, self.grid), m)
        return self._norm_cache[key]


@dataclass(eq=False)
class StageTargets:
    """Physical targets ``{SSH, U, V: (values[D, H, W], mask)}`` for one stage."""

    stage: str
    fields: dict[str, tuple[np.ndarray, np.ndarray]]


def build_stage_targets(stage: str, data: TrainingData, target_source: str = "L4_ANALOG") -> StageTargets:
    """Assemble the supervision of a stage from the observation sources."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    if stage == "S1":
        suffix = "l4" if target_source == "L4_ANALOG" else "neurost"
        ssh = data.source("ssh_nadir")
        u, v = data.source(f"u_{suffix}"), data.source(f"v_{suffix}")
    elif stage == "S2":
        ssh = data.source("ssh_swot")
        u, v = data.source("u_swot"), data.source("v_swot")
    else:
        u, v = data.source("u_drifter"), data.source("v_drifter")
        ssh = (np.zeros_like(u[0]), np.zeros(u[1].shape, dtype=bool))
    return StageTargets(stage, {"SSH": ssh, "U": u, "V": v})


# --------------------------------------------------------------------------- loss


class LossTerm(NamedTuple):
    value: torch.Tensor
    supervised: bool


def magnitude_weights(target_u, target_v, v_ref: float = V_REF, w_max: float = W_MAX, mask_u=None, mask_v=None):
    """Per-cell weight ``min(1 + |w|/v_ref, w_max)`` from the target current magnitude.

    Components outside their mask do not contribute to the magnitude.
    """
    if v_ref <= 0:
        raise ConfigError("v_ref must be positive")
    torch_in = isinstance(target_u, torch.Tensor)
    xp = torch if torch_in else np
    u = target_u if mask_u is None else xp.where(mask_u, target_u, xp.zeros_like(target_u))
    v = target_v if mask_v is None else xp.where(mask_v, target_v, xp.zeros_like(target_v))
    speed = xp.sqrt(u * u + v * v)
    w = 1.0 + speed / v_ref
    return xp.clamp(w, max=w_max) if torch_in else np.minimum(w, w_max)


def weighted_masked_mse(pred, target, mask, weights=None) -> LossTerm:
    """``sum_mask w (pred - target)^2 / sum_mask w``; an empty mask gives ``(0, False)``."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if weights is None:
        weights = torch.ones_like(pred)
    weights = torch.as_tensor(weights, dtype=pred.dtype)
    if pred.shape != target.shape or mask.shape != pred.shape or weights.shape != pred.shape:
        raise InputError("pred, target, mask and weights must share one shape")
    if not bool(mask.any()):
        return LossTerm(pred.sum() * 0.0, False)
    zero = torch.zeros_like(pred)
    w = torch.where(mask, weights, zero)
    err = torch.where(mask, pred - target, zero)
    return LossTerm((w * err * err).sum() / w.sum(), True)


# --------------------------------------------------------------------------- sampling


@dataclass(eq=False)
class TrainingSample:
    inputs: dict[str, np.ndarray]
    input_masks: dict[str, np.ndarray]
    targets: dict[str, np.ndarray]
    target_masks: dict[str, np.ndarray]
    uv_weights: np.ndarray
    coords: PatchCoords
    anchor_day: int
    row: int
    col: int


class PatchSampler:
    """Random (anchor day, crop) draws with the whole input+target window inside the data.

    The anchor is the last input day; targets cover the following ``T_out``
    days. Crops with less than 50 % ocean are never drawn.
    """

    def __init__(self, data: TrainingData, config, stage: str | None = None, target_source: str = "L4_ANALOG",
                 v_ref: float = V_REF, w_max: float = W_MAX, min_ocean: float = 0.5):
        self.data = data
        self.config = config
        n_days = len(data.days)
        if n_days < config.T_in + config.T_out:
            raise InputError(f"dataset spans {n_days} days; need at least T_in + T_out = {config.T_in + config.T_out}")
        self.anchor_positions = np.arange(config.T_in - 1, n_days - config.T_out)
        h, w = config.patch_h, config.patch_w
        H, W = data.grid.shape
        if h > H or w > W:
            raise InputError(f"patch {h}x{w} larger than grid {H}x{W}")
        ocean = (~data.land).astype(np.float64)
        # Ocean fraction of every crop via a summed-area table.
        sat = np.pad(ocean.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
        frac = (sat[h:, w:] - sat[:-h, w:] - sat[h:, :-w] + sat[:-h, :-w]) / (h * w)
        self.crops = np.argwhere(frac >= min_ocean - 1e-12)
        if len(self.crops) == 0:
            raise InputError("no crop position has enough ocean")
        self.stage = stage
        self.v_ref, self.w_max = v_ref, w_max
        self.targets = None
        if stage is not None:
            self._prepare_targets(build_stage_targets(stage, data, target_source))

    def _prepare_targets(self, targets: StageTargets):
        data = self.data
        norm = data.normalizer
        out = {}
        for var in OUTPUT_VARIABLES:
            v, m = targets.fields[var]
            if var == "SSH" and not m.any():
                out[var] = (np.zeros_like(v), m)
            else:
                out[var] = (norm.normalize_stack(Variable(var), v, m, data.days, data.grid), m)
        (u, mu), (vv, mv) = targets.fields["U"], targets.fields["V"]
        self.weights = magnitude_weights(u, vv, self.v_ref, self.w_max, mu, mv)
        self.targets = out

    def draw(self, rng: np.random.Generator) -> tuple[int, int, int]:
        k = int(self.anchor_positions[rng.integers(len(self.anchor_positions))])
        r, c = self.crops[rng.integers(len(self.crops))]
        return k, int(r), int(c)

    def sample(self, rng: np.random.Generator) -> TrainingSample:
        return self.make(*self.draw(rng))

    def make(self, k: int, row: int, col: int) -> TrainingSample:
        cfg, data = self.config, self.data
        h, w = cfg.patch_h, cfg.patch_w
        sl = (slice(row, row + h), slice(col, col + w))
        tin = slice(k - cfg.T_in + 1, k + 1)
        tout = slice(k + 1, k + 1 + cfg.T_out)
        inputs, input_masks = {}, {}
        for name in cfg.input_variables:
            source, var = INPUT_SOURCES[name]
            values, masks = data.normalized(source, var)
            inputs[name] = values[tin][(slice(None),) + sl].astype(np.float32)
            input_masks[name] = masks[tin][(slice(None),) + sl]
        targets, target_masks = {}, {}
        weights = np.ones((cfg.T_out, h, w))
        if self.targets is not None:
            for var, (values, masks) in self.targets.items():
                targets[var] = values[tout][(slice(None),) + sl]
                target_masks[var] = masks[tout][(slice(None),) + sl]
            weights = self.weights[tout][(slice(None),) + sl]
        sub = data.grid.subgrid(row, col, h, w)
        day = int(data.days[k])
        coords = PatchCoords(
            0.5 * (sub.lat_min + sub.lat_max), 0.5 * (sub.lon_min + sub.lon_max), PatchCoords.week_of(day), data.grid.resolution
        )
        return TrainingSample(inputs, input_masks, targets, target_masks, weights, coords, day, row, col)


def sample_patch(data: TrainingData, config, rng: np.random.Generator, stage: str | None = None,
                 target_source: str = "L4_ANALOG") -> TrainingSample:
    return PatchSampler(data, config, stage, target_source).sample(rng)


def collate(samples: Sequence[TrainingSample], dtype=torch.float32):
    def stack(key, d):
        return torch.as_tensor(np.stack([getattr(s, d)[key] for s in samples]))

    first = samples[0]
    batch = {
        "inputs": {k: stack(k, "inputs").to(dtype) for k in first.inputs},
        "input_masks": {k: stack(k, "input_masks") for k in first.input_masks},
        "targets": {k: stack(k, "targets").to(dtype) for k in first.targets},
        "target_masks": {k: stack(k, "target_masks") for k in first.target_masks},
        "uv_weights": torch.as_tensor(np.stack([s.uv_weights for s in samples])).to(dtype),
        "coords": [s.coords for s in samples],
    }
    return batch


def batch_loss(model: OrcastNet, batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Total loss, SSH term and U+V term for a collated batch."""
    pred = model(batch["inputs"], batch["input_masks"], batch["coords"])
    zero = pred["SSH"].sum() * 0.0
    ssh = weighted_masked_mse(pred["SSH"], batch["targets"]["SSH"], batch["target_masks"]["SSH"])
    ssh_term = ssh.value if ssh.supervised else zero
    uv_term = zero
    for var in ("U", "V"):
        t = weighted_masked_mse(pred[var], batch["targets"][var], batch["target_masks"][var], batch["uv_weights"])
        if t.supervised:
            uv_term = uv_term + t.value
    return ssh_term + uv_term, ssh_term, uv_term


# --------------------------------------------------------------------------- optimisation


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    ssh_term: float
    uv_term: float


def _param_norms(model: OrcastNet) -> dict[str, float]:
    return {g: float(sum(p.detach().double().pow(2).sum() for _, p in ps) ** 0.5) for g, ps in model.groups().items()}


def train_stage(model: OrcastNet, stage: StageConfig, data: TrainingData, seed: int,
                samples: Sequence[TrainingSample] | None = None, steps: int | None = None):
    """Optimise ``model`` in place for one stage; returns ``(model, history)``.

    With ``samples`` given, batches cycle through that fixed list instead of
    drawing random patches (used for overfitting probes); ``steps`` then
    overrides the epoch-derived step count and each step is one epoch.
    """
    torch.use_deterministic_algorithms(True)
    model.set_frozen(stage.resolve_frozen(model))
    params = model.trainable_parameters()
    history: list[EpochRecord] = []
    if not params or (stage.epochs == 0 and steps is None):
        return model, history
    opt = torch.optim.AdamW(params, lr=stage.learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=stage.weight_decay)
    rng = np.random.default_rng([int(seed), STAGES.index(stage.stage)])
    dtype = next(model.parameters()).dtype

    if samples is not None:
        n_epochs = steps if steps is not None else stage.epochs * stage.steps_per_epoch
        steps_per_epoch = 1
        fixed = list(samples)
        sampler = None
    else:
        sampler = PatchSampler(data, model.config, stage.stage, stage.target_source, stage.v_ref, stage.w_max)
        n_epochs = stage.epochs
        steps_per_epoch = stage.steps_per_epoch
        if steps is not None:
            n_epochs, steps_per_epoch = steps, 1

    model.train()
    step = 0
    for epoch in range(n_epochs):
        tot = ssh_acc = uv_acc = 0.0
        for _ in range(steps_per_epoch):
            if sampler is None:
                batch_samples = [fixed[(step * stage.batch_size + i) % len(fixed)] for i in range(min(stage.batch_size, len(fixed)))]
            else:
                batch_samples = [sampler.sample(rng) for _ in range(stage.batch_size)]
            batch = collate(batch_samples, dtype)
            loss, ssh_term, uv_term = batch_loss(model, batch)
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at stage {stage.stage} epoch {epoch} step {step}; "
                    f"parameter norms {_param_norms(model)}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tot += float(loss.detach())
            ssh_acc += float(ssh_term.detach())
            uv_acc += float(uv_term.detach())
            step += 1
        history.append(EpochRecord(epoch, tot / steps_per_epoch, ssh_acc / steps_per_epoch, uv_acc / steps_per_epoch))
        if epoch % 10 == 0:
            log.debug("stage %s epoch %d loss %.5f", stage.stage, epoch, history[-1].mean_loss)
    model.eval()
    return model, history


def write_loss_history(history: Sequence[EpochRecord], path) -> Path:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["epoch", "mean_loss", "ssh_term", "uv_term"])
        for r in history:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.ssh_term), repr(r.uv_term)])
    return path


@dataclass(eq=False)
class StageResult:
    stage: str
    model: OrcastNet
    history: list[EpochRecord]
    checkpoint: Path | None = None


def check_stage_order(stages: Sequence[str]):
    idx = [STAGES.index(s) if s in STAGES else -1 for s in stages]
    if -1 in idx:
        raise ConfigError(f"unknown stage in {list(stages)}")
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ConfigError(f"stages must run in order S1 -> S2 -> S3, got {list(stages)}")


def run_curriculum(model: OrcastNet, stages: Sequence[StageConfig], data: TrainingData, seed: int,
                   out_dir=None, extra_manifest: Mapping | None = None) -> list[StageResult]:
    """Run stages in order, each resuming from the previous one; returns one snapshot per stage."""
    check_stage_order([s.stage for s in stages])
    if data.normalizer is None:
        data.fit_normalizer(next((s.target_source for s in stages if s.stage == "S1"), "L4_ANALOG"))
    results = []
    for stage in stages:
        model, history = train_stage(model, stage, data, seed)
        snapshot = copy.deepcopy(model)
        ckpt = None
        if out_dir is not None:
            label = f"stage{stage.stage[1]}"
            extra = {"normalization": data.normalizer.to_dict(), "stage_config": stage.to_dict()}
            extra.update(extra_manifest or {})
            ckpt = save_checkpoint(snapshot, Path(out_dir) / label, label, seed, extra)
            write_loss_history(history, Path(out_dir) / f"{label}_loss.csv")
        results.append(StageResult(stage.stage, snapshot, history, ckpt))
    return results
