"""Multi-arm encoder / positional embedding / GSTa translator / decoder network.

Each input variable has its own 2D encoder shared across timesteps. A learned
spatio-temporal embedding shifts the latents, timesteps are folded into the
channel axis, a stack of gated-attention blocks maps past to future latents,
and three independent decoders produce SSH, U and V.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError

INPUT_VARIABLES = ("SSH_nadir", "SST", "CHL", "SSH_swot")
OUTPUT_VARIABLES = ("SSH", "U", "V")
EMBED_DIM = 32
N_FREQS = 8
EMBED_HIDDEN = 64
GN_GROUPS = 4
DILATIONS = (1, 2, 4, 8)
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    T_in: int = 5
    T_out: int = 3
    patch_h: int = 32
    patch_w: int = 32
    input_variables: tuple[str, ...] = ("SSH_nadir", "SST")
    latent_channels: int = 16
    n_gsta_blocks: int = 4
    embed_dim: int = EMBED_DIM
    hidden_channels: int = 128
    domain: tuple[float, float, float, float] = (-90.0, 90.0, -180.0, 180.0)

    def __post_init__(self):
        object.__setattr__(self, "input_variables", tuple(self.input_variables))
        object.__setattr__(self, "domain", tuple(float(x) for x in self.domain))
        self.validate()

    def validate(self):
        if self.patch_h % 4 or self.patch_w % 4:
            raise ConfigError(f"patch size {self.patch_h}x{self.patch_w} must be divisible by 4")
        if self.embed_dim != EMBED_DIM:
            raise ConfigError(f"embed_dim must be {EMBED_DIM}")
        if self.T_in < 1 or self.T_out < 1:
            raise ConfigError("T_in and T_out must be >= 1")
        if not self.input_variables:
            raise ConfigError("at least one input variable is required")
        unknown = [v for v in self.input_variables if v not in INPUT_VARIABLES]
        if unknown:
            raise ConfigError(f"unknown input variables {unknown}; known: {INPUT_VARIABLES}")
        if len(set(self.input_variables)) != len(self.input_variables):
            raise ConfigError("duplicate input variables")
        if self.latent_channels % GN_GROUPS:
            raise ConfigError(f"latent_channels must be divisible by {GN_GROUPS}")
        lat0, lat1, lon0, lon1 = self.domain
        if not (lat0 < lat1 and lon0 < lon1):
            raise ConfigError(f"invalid domain {self.domain}")

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.patch_h // 4, self.patch_w // 4

    @property
    def translator_channels(self) -> int:
        return len(self.input_variables) * self.T_in * self.latent_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_variables"] = list(self.input_variables)
        d["domain"] = list(self.domain)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PatchCoords:
    """Patch centre, climatological week, and grid resolution (for per-pixel offsets)."""

    center_lat: float
    center_lon: float
    week_index: int
    resolution: float

    @staticmethod
    def week_of(day: int) -> int:
        return min((int(day) % 365) // 7, 52)


# --------------------------------------------------------------------------- building blocks


class _SameConv(nn.Conv2d):
    """Stride-1 convolution with output size equal to input size (even kernels pad more on the far side)."""

    def __init__(self, cin, cout, k):
        super().__init__(cin, cout, k)
        lo = (k - 1) // 2
        self._pad = (lo, k - 1 - lo, lo, k - 1 - lo)

    def forward(self, x):
        return super().forward(F.pad(x, self._pad))


def _conv_same(cin, cout, k):
    return _SameConv(cin, cout, k)


class Encoder(nn.Module):
    """Two rounds of [4x4 conv, GroupNorm, GELU, stride-2 conv]: spatial /4."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        layers = []
        cin = in_channels
        for _ in range(2):
            layers += [
                _conv_same(cin, channels, 4),
                nn.GroupNorm(GN_GROUPS, channels),
                nn.GELU(),
                nn.Conv2d(channels, channels, 4, stride=2, padding=1),
            ]
            cin = channels
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Two rounds of [4x4 conv, GroupNorm, GELU, bilinear x2], then a 1x1 readout."""

    def __init__(self, channels: int):
        super().__init__()
        layers = []
        for _ in range(2):
            layers += [
                _conv_same(channels, channels, 4),
                nn.GroupNorm(GN_GROUPS, channels),
                nn.GELU(),
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            ]
        layers.append(nn.Conv2d(channels, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class GatedAttention(nn.Module):
    """Sigmoid gate from a dilated 3x3 conv multiplying a pointwise value branch."""

    def __init__(self, channels: int, dilation: int):
        super().__init__()
        self.gate = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.value = nn.Conv2d(channels, channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        return self.proj(torch.sigmoid(self.gate(x)) * self.value(x))


class ConvFFN(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.dw(self.fc1(x))))


class GSTaBlock(nn.Module):
    def __init__(self, channels: int, hidden: int, dilation: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(GN_GROUPS, channels)
        self.attn = GatedAttention(channels, dilation)
        self.scale1 = nn.Parameter(torch.zeros(channels))
        self.norm2 = nn.GroupNorm(GN_GROUPS, channels)
        self.ffn = ConvFFN(channels, hidden)
        self.scale2 = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        x = x + self.scale1[:, None, None] * self.attn(self.norm1(x))
        return x + self.scale2[:, None, None] * self.ffn(self.norm2(x))


class Translator(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, hidden: int, n_blocks: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            GSTaBlock(in_channels, hidden, DILATIONS[i % len(DILATIONS)]) for i in range(n_blocks)
        )
        self.head = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.head(x)


class PositionalEmbedding(nn.Module):
    """Learned 32-d function of (lat, lon, week) built on Fourier features."""

    def __init__(self, latent_channels: int, domain: Sequence[float]):
        super().__init__()
        self.register_buffer("domain", torch.tensor(domain, dtype=torch.float64), persistent=False)
        self.mlp = nn.Sequential(
            nn.Linear(6 * N_FREQS, EMBED_HIDDEN),
            nn.GELU(),
            nn.Linear(EMBED_HIDDEN, EMBED_DIM),
        )
        self.proj = nn.Identity() if latent_channels == EMBED_DIM else nn.Linear(EMBED_DIM, latent_channels, bias=False)

    def features(self, lat, lon, week):
        lat0, lat1, lon0, lon1 = (float(x) for x in self.domain)
        dtype = self.mlp[0].weight.dtype
        lat_n = (2 * (lat - lat0) / (lat1 - lat0) - 1).to(dtype)
        lon_n = (2 * (lon - lon0) / (lon1 - lon0) - 1).to(dtype)
        w_ang = (2 * math.pi * week / 53.0).to(dtype)
        k = torch.arange(N_FREQS, dtype=dtype)
        spatial_freq = (2.0**k) * (math.pi / 2)
        harmonics = k + 1
        parts = []
        for x, f in ((lat_n, spatial_freq), (lon_n, spatial_freq), (w_ang, harmonics)):
            a = x[..., None] * f
            parts += [torch.sin(a), torch.cos(a)]
        return torch.cat(parts, dim=-1)

    def embed(self, lat, lon, week):
        """Raw 32-d embedding vectors for coordinate tensors of any common shape."""
        return self.mlp(self.features(lat, lon, week))

    def forward(self, lat, lon, week):
        return self.proj(self.embed(lat, lon, week))


# --------------------------------------------------------------------------- network


def _as_tensor(x, dtype):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


class OrcastNet(nn.Module):
    """Parameters are organised in named groups (see :meth:`groups`)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.latent_channels
        self.encoders = nn.ModuleDict({v: Encoder(2, c) for v in config.input_variables})
        self.pos_embed = PositionalEmbedding(c, config.domain)
        self.translator = Translator(config.translator_channels, config.T_out * c, config.hidden_channels, config.n_gsta_blocks)
        self.decoders = nn.ModuleDict({v: Decoder(c) for v in OUTPUT_VARIABLES})
        self.frozen: set[str] = set()

    # ---- parameter groups

    @staticmethod
    def group_of(param_name: str) -> str:
        head, _, rest = param_name.partition(".")
        if head in ("encoders", "decoders"):
            key = rest.split(".", 1)[0]
            return f"{head[:-1]}[{key}]"
        return head

    def groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out: dict[str, list] = {}
        for name, p in self.named_parameters():
            out.setdefault(self.group_of(name), []).append((name, p))
        return out

    def group_names(self) -> list[str]:
        return list(self.groups())

    def set_frozen(self, groups) -> None:
        groups = set(groups)
        known = set(self.group_names())
        unknown = groups - known
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}; known: {sorted(known)}")
        self.frozen = groups
        for g, params in self.groups().items():
            for _, p in params:
                p.requires_grad_(g not in groups)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for g, ps in self.groups().items() if g not in self.frozen for _, p in ps]

    # ---- stages of the forward pass

    def latent_coords(self, coords: Sequence[PatchCoords]):
        """Per-latent-pixel (lat, lon) and week tensors, each ``[B, h/4, w/4]``."""
        cfg = self.config
        hl, wl = cfg.latent_hw
        lat = torch.empty((len(coords), hl, wl), dtype=torch.float64)
        lon = torch.empty_like(lat)
        week = torch.empty_like(lat)
        lat0, lat1, lon0, lon1 = cfg.domain
        for b, pc in enumerate(coords):
            res = pc.resolution
            south = pc.center_lat - 0.5 * cfg.patch_h * res
            west = pc.center_lon - 0.5 * cfg.patch_w * res
            la = south + (4 * torch.arange(hl, dtype=torch.float64) + 2) * res
            lo = west + (4 * torch.arange(wl, dtype=torch.float64) + 2) * res
            if la.min() < lat0 - 1e-9 or la.max() > lat1 + 1e-9 or lo.min() < lon0 - 1e-9 or lo.max() > lon1 + 1e-9:
                raise InputError(f"patch at ({pc.center_lat}, {pc.center_lon}) lies outside the model domain {cfg.domain}")
            if not 0 <= pc.week_index <= 52:
                raise InputError(f"week_index {pc.week_index} outside 0..52")
            lat[b] = la[:, None].expand(hl, wl)
            lon[b] = lo[None, :].expand(hl, wl)
            week[b] = float(pc.week_index)
        return lat, lon, week

    def positional_embedding(self, coords: Sequence[PatchCoords]) -> torch.Tensor:
        """Additive latent shift ``[B, latent_channels, h/4, w/4]``."""
        lat, lon, week = self.latent_coords(coords)
        return self.pos_embed(lat, lon, week).permute(0, 3, 1, 2)

    def encode(self, variable: str, values, mask=None) -> torch.Tensor:
        """Latents ``[B, T_in, C, h/4, w/4]`` for inputs ``[B, T_in, h, w]``."""
        if variable not in self.encoders:
            raise ConfigError(f"no encoder for variable {variable!r}")
        dtype = next(self.parameters()).dtype
        x = _as_tensor(values, dtype)
        m = torch.ones_like(x) if mask is None else _as_tensor(mask, dtype)
        x = torch.where(m > 0, x, torch.zeros_like(x))
        b, t, h, w = x.shape
        z = self.encoders[variable](torch.stack([x, m], dim=2).reshape(b * t, 2, h, w))
        return z.reshape(b, t, *z.shape[1:])

    def gsta_translate(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.shape[1] != self.config.translator_channels:
            raise ConfigError(
                f"translator expects {self.config.translator_channels} channels, got {latents.shape[1]}"
            )
        return self.translator(latents)

    def decode(self, future_latent: torch.Tensor, variable: str) -> torch.Tensor:
        """Fields ``[B, T_out, h, w]`` from ``[B, T_out*C, h/4, w/4]``."""
        if variable not in self.decoders:
            raise ConfigError(f"no decoder for variable {variable!r}")
        cfg = self.config
        b, _, hl, wl = future_latent.shape
        z = future_latent.reshape(b * cfg.T_out, cfg.latent_channels, hl, wl)
        y = self.decoders[variable](z)
        return y.reshape(b, cfg.T_out, *y.shape[-2:])

    def forward(self, inputs: Mapping, masks: Mapping | None, coords: Sequence[PatchCoords], outputs=OUTPUT_VARIABLES):
        """Normalised forecasts ``{SSH, U, V: [B, T_out, h, w]}``.

        ``inputs``/``masks`` map every configured variable to ``[B, T_in, h, w]``;
        unobserved cells are replaced by zero and flagged through the mask channel.
        """
        missing = [v for v in self.config.input_variables if v not in inputs]
        if missing:
            raise InputError(f"missing input variables {missing}")
        masks = masks or {}
        shift = self.positional_embedding(coords)[:, None]
        latents = []
        for v in self.config.input_variables:
            z = self.encode(v, inputs[v], masks.get(v))
            z = z + shift
            latents.append(z.flatten(1, 2))
        future = self.gsta_translate(torch.cat(latents, dim=1))
        return {v: self.decode(future, v) for v in outputs}


# --------------------------------------------------------------------------- init and persistence


def init_parameters(config: ModelConfig, seed: int, dtype=torch.float32) -> OrcastNet:
    """Deterministic initialisation.

    Conv/linear kernels ~ truncated normal(0, 0.02), biases and block rescales
    zero, GroupNorm affine identity, and the embedding MLP's last layer zero so
    the network starts position-agnostic.
    """
    model = OrcastNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".scale" in name or name.endswith("bias"):
                p.zero_()
            elif p.ndim == 1:  # GroupNorm weight
                p.fill_(1.0)
            else:
                nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=gen)
        model.pos_embed.mlp[2].weight.zero_()
        model.pos_embed.mlp[2].bias.zero_()
    return model.to(dtype)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _tensor_file(name: str) -> str:
    return name.replace("/", "_") + ".f32"


def content_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(model: OrcastNet, path, stage: str, seed: int, extra: Mapping | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().to(torch.float32).numpy().astype("<f4")
        (path / _tensor_file(name)).write_bytes(arr.tobytes(order="C"))
        tensors[name] = list(arr.shape)
    groups = {g: [n for n, _ in ps] for g, ps in model.groups().items()}
    manifest = {
        "config": model.config.to_dict(),
        "stage": stage,
        "seed": int(seed),
        "tensors": tensors,
        "groups": groups,
        "frozen": sorted(model.frozen),
        "content_hash": content_hash(model),
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path, dtype=torch.float32) -> tuple[OrcastNet, dict]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise InputError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    model = OrcastNet(ModelConfig.from_dict(manifest["config"]))
    state = {}
    for name, shape in manifest["tensors"].items():
        raw = np.frombuffer((path / _tensor_file(name)).read_bytes(), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(raw.copy())
    model.load_state_dict(state)
    model = model.to(dtype)
    model.set_frozen(manifest.get("frozen", []))
    if content_hash(model) != manifest["content_hash"]:
        raise InputError(f"checkpoint {path} content hash mismatch")
    return model, manifest
