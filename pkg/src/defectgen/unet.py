"""Receptive-field-restricted U-Net denoisers built from declarative configs.

Two things matter here and both are served by the same block structure:

* the torch model (`build_denoiser`), and
* an exact influence calculator (`affected_box`) that predicts, for a single
  perturbed input pixel, precisely which output pixels can change.

To keep that prediction exact, normalization statistics are computed per
spatial position (channel groups only, never over H x W): spatial statistics
would couple every pixel to every other and make the receptive field global,
defeating the point of restricting it. No attention, no global pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    pool_stride: int


@dataclass(frozen=True)
class UNetConfig:
    input_resolution: int
    in_channels: int
    down_blocks: tuple[BlockSpec, ...]
    time_embed_dim: int
    norm_groups: int = 16
    name: str = "custom"

    def __post_init__(self):
        if self.in_channels < 4:
            raise ConfigError("in_channels must be >= 4 (RGB + at least one defect plane)")
        if not self.down_blocks:
            raise ConfigError("need at least one down block")
        if self.input_resolution % self.pool_factor != 0:
            raise ConfigError(
                f"resolution {self.input_resolution} not divisible by pool factor {self.pool_factor}")

    @property
    def pool_factor(self) -> int:
        f = 1
        for b in self.down_blocks:
            f *= b.pool_stride
        return f

    @property
    def up_blocks(self) -> tuple[BlockSpec, ...]:
        # mirror of the encoder: reverse order, halved channels
        return tuple(BlockSpec(b.channels // 2, b.pool_stride)
                     for b in reversed(self.down_blocks))

    def describe(self) -> dict:
        return {
            "name": self.name,
            "input_resolution": self.input_resolution,
            "in_channels": self.in_channels,
            "down_channels": [b.channels for b in self.down_blocks],
            "pool_strides": [b.pool_stride for b in self.down_blocks],
            "time_embed_dim": self.time_embed_dim,
            "norm_groups": self.norm_groups,
        }


def _scaled(base: int, scale: float) -> int:
    return max(8, int(round(base * scale / 8.0)) * 8)


def _preset(name, channels, strides, n_total, resolution, channel_scale):
    ch = [_scaled(c, channel_scale) for c in channels]
    return UNetConfig(
        input_resolution=resolution,
        in_channels=n_total,
        down_blocks=tuple(BlockSpec(c, s) for c, s in zip(ch, strides)),
        time_embed_dim=4 * ch[0],
        name=name,
    )


def large_preset(n_total: int, resolution: int, channel_scale: float = 1.0) -> UNetConfig:
    """Four down blocks, widths 192/384/768/1536 at scale 1, operating
    resolutions R, R/2, R/4, R/16 (the odd x4 jump is in the source tables)."""
    return _preset("large", [192, 384, 768, 1536], [2, 2, 4, 2],
                   n_total, resolution, channel_scale)


def medium_preset(n_total: int, resolution: int, channel_scale: float = 1.0) -> UNetConfig:
    return _preset("medium", [192, 384, 768], [2, 2, 2], n_total, resolution, channel_scale)


def small_preset(n_total: int, resolution: int, channel_scale: float = 1.0) -> UNetConfig:
    return _preset("small", [192, 384], [2, 2], n_total, resolution, channel_scale)


PRESETS = {"large": large_preset, "medium": medium_preset, "small": small_preset}


# ---------------------------------------------------------------------------
# receptive field / influence analysis


@dataclass
class ReceptiveField:
    rf: int
    trace: list = field(default_factory=list)


class _Span:
    """Closed 1-D index interval, optionally clipped to [0, n)."""

    def __init__(self, lo, hi, n=None):
        self.lo, self.hi, self.n = lo, hi, n
        self._clip()

    def _clip(self):
        if self.n is not None:
            self.lo = max(self.lo, 0)
            self.hi = min(self.hi, self.n - 1)

    def conv(self, k=3):
        r = (k - 1) // 2
        return _Span(self.lo - r, self.hi + r, self.n)

    def pool(self, s):
        return _Span(self.lo // s, self.hi // s, None if self.n is None else self.n // s)

    def up(self, s):
        return _Span(self.lo * s, self.hi * s + s - 1, None if self.n is None else self.n * s)

    def hull(self, other):
        return _Span(min(self.lo, other.lo), max(self.hi, other.hi), self.n)

    @property
    def width(self):
        return self.hi - self.lo + 1


def _propagate(config: UNetConfig, rect0: tuple[_Span, _Span], trace=None):
    """Push an input-pixel influence region through the full block graph.

    The region is kept as a union of rectangles: each skip connection merges
    an encoder-resolution rectangle into the decoder path, and dilation
    (conv), pooling, and nearest upsampling all distribute over unions, so
    the representation stays exact end to end.
    """
    rects = [rect0]

    def conv_all(k=3):
        rects[:] = [(r.conv(k), c.conv(k)) for r, c in rects]

    def log(layer):
        if trace is not None:
            lo_r = min(r.lo for r, _ in rects)
            hi_r = max(r.hi for r, _ in rects)
            trace.append((layer, (lo_r, hi_r), len(rects)))

    conv_all()
    log("in_conv")
    skips = []
    for i, b in enumerate(config.down_blocks):
        for _ in range(4):  # ResBlock x 2 == four 3x3 convs on the longest path
            conv_all()
        skips.append(list(rects))
        log(f"down{i}_resblocks")
        rects[:] = [(r.pool(b.pool_stride), c.pool(b.pool_stride)) for r, c in rects]
        log(f"down{i}_pool")
    n_blocks = len(config.down_blocks)
    for j, b in enumerate(config.up_blocks):
        for _ in range(4):
            conv_all()
        rects[:] = [(r.up(b.pool_stride), c.up(b.pool_stride)) for r, c in rects]
        rects.extend(skips[n_blocks - 1 - j])
        log(f"up{j}_skip")
    conv_all()
    log("out_conv")
    return rects


def receptive_field(config: UNetConfig) -> ReceptiveField:
    """Influence extent of one input pixel at a pool-aligned position, ignoring
    image borders. Even widths are possible because pooling windows are even."""
    trace: list = []
    rects = _propagate(config, (_Span(0, 0), _Span(0, 0)), trace)
    width = max(r.hi for r, _ in rects) - min(r.lo for r, _ in rects) + 1
    return ReceptiveField(rf=width, trace=trace)


def affected_region(config: UNetConfig, pixel: tuple[int, int],
                    resolution: int | None = None) -> list[tuple[int, int, int, int]]:
    """Exact output region a perturbation of one input pixel can reach, as a
    union of inclusive rectangles (r0, r1, c0, c1). Accounts for border
    clipping and pooling alignment, so it matches the measured impulse
    response pixel-for-pixel."""
    n = resolution or config.input_resolution
    rects = _propagate(config, (_Span(pixel[0], pixel[0], n=n),
                                _Span(pixel[1], pixel[1], n=n)))
    boxes = sorted({(r.lo, r.hi, c.lo, c.hi) for r, c in rects})
    # drop rectangles fully contained in another
    keep = [b for b in boxes
            if not any(o != b and o[0] <= b[0] and b[1] <= o[1] and
                       o[2] <= b[2] and b[3] <= o[3] for o in boxes)]
    return keep


def region_mask(boxes, resolution: int):
    """Boolean (resolution, resolution) mask of a rectangle union."""
    import numpy as np

    m = np.zeros((resolution, resolution), dtype=bool)
    for r0, r1, c0, c1 in boxes:
        m[r0:r1 + 1, c0:c1 + 1] = True
    return m


def affected_box(config: UNetConfig, pixel: tuple[int, int],
                 resolution: int | None = None) -> tuple[int, int, int, int]:
    """Bounding box of affected_region; no output outside it can change."""
    boxes = affected_region(config, pixel, resolution)
    return (min(b[0] for b in boxes), max(b[1] for b in boxes),
            min(b[2] for b in boxes), max(b[3] for b in boxes))


# ---------------------------------------------------------------------------
# torch model


def _num_groups(channels: int, cap: int = 16) -> int:
    g = min(cap, channels)
    while g > 1 and (channels % g != 0 or channels // g < 2):
        g -= 1
    return max(g, 1)


class PositionalGroupNorm(nn.Module):
    """Group normalization with statistics over channels-within-group at each
    spatial position independently. Strictly local by construction."""

    def __init__(self, channels: int, cap: int = 16, eps: float = 1e-5):
        super().__init__()
        self.groups = _num_groups(channels, cap)
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        b, c, h, w = x.shape
        g = self.groups
        xs = x.view(b, g, c // g, h, w)
        mean = xs.mean(dim=2, keepdim=True)
        var = xs.var(dim=2, unbiased=False, keepdim=True)
        xs = (xs - mean) / torch.sqrt(var + self.eps)
        x = xs.view(b, c, h, w)
        return x * self.weight.view(1, c, 1, 1) + self.bias.view(1, c, 1, 1)


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64)
                          / max(half - 1, 1)).to(t.device)
        args = t.double()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
        if self.dim % 2:
            emb = F.pad(emb, (0, 1))
        return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, norm_cap: int = 16):
        super().__init__()
        self.norm1 = PositionalGroupNorm(in_ch, norm_cap)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = PositionalGroupNorm(out_ch, norm_cap)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Epsilon predictor: forward(x_t, t) -> eps_hat with x_t's shape."""

    def __init__(self, config: UNetConfig, zero_init_out: bool = True):
        super().__init__()
        self.config = config
        cap = config.norm_groups
        tdim = config.time_embed_dim
        ch = [b.channels for b in config.down_blocks]
        K = len(ch)

        self.time_embed = SinusoidalTimeEmbedding(tdim)
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))

        self.in_conv = nn.Conv2d(config.in_channels, ch[0], 3, padding=1)
        self.down_res = nn.ModuleList()
        self.down_pool = nn.ModuleList()
        prev = ch[0]
        for b in config.down_blocks:
            self.down_res.append(nn.ModuleList([
                ResBlock(prev, b.channels, tdim, cap),
                ResBlock(b.channels, b.channels, tdim, cap)]))
            self.down_pool.append(nn.Sequential(
                nn.AvgPool2d(b.pool_stride),
                nn.Conv2d(b.channels, 2 * b.channels, 1)))
            prev = 2 * b.channels

        self.up_res = nn.ModuleList()
        self.up_conv = nn.ModuleList()
        self.up_strides = []
        for j, ub in enumerate(config.up_blocks):
            in_ch = prev if j == 0 else self.up_out + ch[K - j]
            self.up_res.append(nn.ModuleList([
                ResBlock(in_ch, ub.channels, tdim, cap),
                ResBlock(ub.channels, ub.channels, tdim, cap)]))
            self.up_conv.append(nn.Conv2d(ub.channels, ub.channels // 2, 1))
            self.up_strides.append(ub.pool_stride)
            self.up_out = ub.channels // 2

        self.out_conv = nn.Conv2d(self.up_out + ch[0], config.in_channels, 3, padding=1)
        if zero_init_out:
            nn.init.zeros_(self.out_conv.weight)
            nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        if x.shape[-1] != self.config.input_resolution or x.shape[-2] != self.config.input_resolution:
            raise ValueError(
                f"input resolution {tuple(x.shape[-2:])} != config {self.config.input_resolution}")
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), int(t), dtype=torch.float64, device=x.device)
        temb = self.time_mlp(self.time_embed(t).to(x.dtype))

        h = self.in_conv(x)
        skips = []
        for res, pool in zip(self.down_res, self.down_pool):
            for block in res:
                h = block(h, temb)
            skips.append(h)
            h = pool(h)
        K = len(skips)
        for j, (res, conv) in enumerate(zip(self.up_res, self.up_conv)):
            for block in res:
                h = block(h, temb)
            h = conv(F.interpolate(h, scale_factor=self.up_strides[j], mode="nearest"))
            h = torch.cat([h, skips[K - 1 - j]], dim=1)
        return self.out_conv(h)


def measured_support(model: "Denoiser", x: torch.Tensor, pixel: tuple[int, int]):
    """Impulse-response support of one input pixel, as a boolean output mask.

    Uses a forward-mode Jacobian column rather than finite perturbation: the
    derivative is exactly zero wherever no computational path exists, while a
    finite x + delta comparison underflows at the far corners of the field
    (influence ~1e-20 vanishes when subtracted from O(1) activations).
    """
    tangent = torch.zeros_like(x)
    tangent[0, :, pixel[0], pixel[1]] = 1.0
    with torch.no_grad():
        _, jv = torch.func.jvp(lambda inp: model(inp, 5.0), (x,), (tangent,))
    return (jv.detach().abs().sum(dim=1)[0].numpy() > 0)


def build_denoiser(config: UNetConfig, zero_init_out: bool = True) -> Denoiser:
    return Denoiser(config, zero_init_out=zero_init_out)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
