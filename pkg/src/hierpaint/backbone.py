"""
2D denoising U-Net over slice stacks with cross-slice mixing.

The slices of a stack form the batch axis. After every residual block a
depth-wise 1D convolution mixes each channel across neighbouring slices;
its Dirac initialization makes the untrained network behave exactly like a
per-slice 2D model. Refinement-stage networks can additionally carry
tissue-aware attention blocks at the coarsest resolutions.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DataError
from .tam import TissueAwareAttention

CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    image_channels: int = 1
    base_channels: int = 16
    channel_multipliers: tuple = (1, 2, 2, 2)
    timestep_embedding_dim: int = 32
    use_tam: bool = False
    attention_heads: int = 4
    depthwise_kernel: int = 3
    use_depthwise: bool = True
    norm_groups: int = 4
    tam_levels: int = 2

    def __post_init__(self):
        self.channel_multipliers = tuple(int(c) for c in self.channel_multipliers)
        if self.depthwise_kernel % 2 == 0:
            raise ConfigurationError(f"depth-wise kernel width must be odd, got {self.depthwise_kernel}")
        if self.timestep_embedding_dim % 2:
            raise ConfigurationError("timestep_embedding_dim must be even")
        for c in self.channels:
            if c % self.norm_groups:
                raise ConfigurationError(f"{c} channels not divisible into {self.norm_groups} norm groups")

    @property
    def num_resolutions(self) -> int:
        return len(self.channel_multipliers)

    @property
    def conditioning_channels(self) -> int:
        # x_t, x_m and m concatenated
        return 3 * self.image_channels

    @property
    def downsampling_factor(self) -> int:
        return 2 ** (self.num_resolutions - 1)

    @property
    def channels(self) -> list:
        return [self.base_channels * m for m in self.channel_multipliers]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding: first half sines, second half cosines."""
    if dim % 2:
        raise ConfigurationError(f"embedding dimension must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).float()


def init_dirac(channels: int, width: int) -> torch.Tensor:
    """Identity kernel of shape (channels, 1, width): a single unit center tap."""
    if width % 2 == 0:
        raise ConfigurationError(f"kernel width must be odd, got {width}")
    kernel = torch.zeros(channels, 1, width)
    kernel[:, 0, width // 2] = 1.0
    return kernel


def depthwise_slice_conv(fm: torch.Tensor, kernel: torch.Tensor, bias=None) -> torch.Tensor:
    """Per-channel 1D convolution along the slice (batch) axis.

    ``fm`` is (b, c, h, w) and ``kernel`` is (c, 1, k) with k odd. This is
    the (h*w, c, b) depth-wise conv1d with zero padding k//2, evaluated as a
    weighted sum of shifted slices to avoid transposing the feature map.
    """
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ConfigurationError(f"kernel width must be odd, got {k}")
    b, c = fm.shape[:2]
    if kernel.shape[0] != c:
        raise ConfigurationError(f"kernel has {kernel.shape[0]} filters for {c} channels")
    padded = F.pad(fm, (0, 0, 0, 0, 0, 0, k // 2, k // 2))
    taps = kernel.reshape(c, k)
    out = sum(taps[:, j].view(1, c, 1, 1) * padded[j : j + b] for j in range(k))
    if bias is not None:
        out = out + bias.view(1, c, 1, 1)
    return out


class DepthwiseSliceConv(nn.Module):
    def __init__(self, channels: int, width: int = 3):
        super().__init__()
        self.weight = nn.Parameter(init_dirac(channels, width))

    def forward(self, fm):
        return depthwise_slice_conv(fm, self.weight)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Stage(nn.Module):
    """Residual block, then optional slice mixing and tissue-aware attention."""

    def __init__(self, in_ch, out_ch, config: BackboneConfig, temb_dim, with_tam):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, temb_dim, config.norm_groups)
        self.slice_mix = DepthwiseSliceConv(out_ch, config.depthwise_kernel) if config.use_depthwise else None
        self.tam = TissueAwareAttention(out_ch, config.attention_heads) if with_tam else None

    def forward(self, x, temb):
        x = self.res(x, temb)
        if self.slice_mix is not None:
            x = self.slice_mix(x)
        if self.tam is not None:
            x = self.tam(x)
        return x


class SliceUNet(nn.Module):
    """Noise predictor epsilon(x_t, x_m, m, t) for (b, 1, h, w) slice stacks."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config = config or BackboneConfig()
        chans = config.channels
        n = config.num_resolutions
        temb_dim = 4 * config.base_channels
        tam_from = n - config.tam_levels if config.use_tam else n + 1

        self.time_mlp = nn.Sequential(
            nn.Linear(config.timestep_embedding_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.in_conv = nn.Conv2d(config.conditioning_channels, chans[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            self.down.append(Stage(prev, ch, config, temb_dim, i >= tam_from))
            if i < n - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch

        self.mid = Stage(prev, prev, config, temb_dim, config.use_tam)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(n)):
            self.up.append(Stage(prev + chans[i], chans[i], config, temb_dim, i >= tam_from))
            prev = chans[i]
            if i > 0:
                self.upsample.append(nn.Conv2d(prev, chans[i - 1], 3, padding=1))
                prev = chans[i - 1]

        self.out_norm = nn.GroupNorm(config.norm_groups, chans[0])
        self.out_conv = nn.Conv2d(chans[0], config.image_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x_t, x_m, m, t):
        f = self.config.downsampling_factor
        if x_t.shape[-2] % f or x_t.shape[-1] % f:
            raise ConfigurationError(
                f"slice size {tuple(x_t.shape[-2:])} is not divisible by the network downsampling factor {f}"
            )
        if not (x_t.shape == x_m.shape == m.shape):
            raise ConfigurationError("x_t, x_m and m must share one shape")
        t = torch.as_tensor(t, device=x_t.device).reshape(-1).expand(x_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.config.timestep_embedding_dim).to(x_t.device, x_t.dtype))

        h = self.in_conv(torch.cat([x_t, x_m, m], dim=1))
        skips = []
        for i, stage in enumerate(self.down):
            h = stage(h, temb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, temb)
        for j, stage in enumerate(self.up):
            h = stage(torch.cat([h, skips.pop()], dim=1), temb)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out_conv(F.silu(self.out_norm(h)))


def save_checkpoint(path, model: SliceUNet, stage: str, extra: dict | None = None) -> None:
    """Write parameters plus structured metadata into one archive."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, map_location="cpu"):
    """Returns (model, payload). Raises DataError on missing/unknown versions."""
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise DataError(f"checkpoint {path} has no version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint {path} has unsupported version {payload['version']}")
    model = SliceUNet(BackboneConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.stage = payload.get("stage")
    model.schedule_params = payload.get("schedule")
    model.eval()
    return model, payload
