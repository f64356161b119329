"""
Label-map conditioned denoising U-Net.

The encoder sees only the noisy image and the timestep. The label map enters
through spatially-adaptive normalization in the middle and decoder blocks: a
parameter-free group norm followed by a per-pixel scale and shift predicted
from the one-hot map, resampled (nearest) to the block's resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class DenoiserConfig:
    resolution: tuple[int, int] = (64, 64)
    base_channels: int = 32
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2, 4])
    attention_resolutions: list[int] = field(default_factory=list)
    num_condition_classes: int = 5
    time_embed_dim: int = 128
    num_res_blocks: int = 1
    cond_hidden: int = 32
    norm_groups: int = 8

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        self.channel_multipliers = list(self.channel_multipliers)
        self.attention_resolutions = list(self.attention_resolutions)
        self.validate()

    def validate(self):
        factor = 2 ** (len(self.channel_multipliers) - 1)
        H, W = self.resolution
        if H % factor or W % factor:
            raise ValueError(f"resolution {self.resolution} not divisible by {factor}")
        if self.num_condition_classes < 2:
            raise ValueError("need at least 2 condition classes")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.norm_groups:
                raise ValueError(f"channels {self.base_channels * m} not divisible by "
                                 f"{self.norm_groups} norm groups")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        return d


@dataclass
class DenoiserOutput:
    eps_hat: torch.Tensor
    v: torch.Tensor


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class LabelResize(nn.Module):
    """Nearest-neighbour resampling of a one-hot map; a module so it can be hooked."""

    def forward(self, seg, size):
        if seg.shape[-2:] == tuple(size):
            return seg
        return F.interpolate(seg, size=tuple(size), mode="nearest")


class SpatialAdaptiveNorm(nn.Module):
    def __init__(self, channels, num_classes, hidden, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels, affine=False)
        self.resize = LabelResize()
        self.shared = nn.Sequential(nn.Conv2d(num_classes, hidden, 3, padding=1), nn.ReLU())
        # scale and shift come from one conv: channels [0, C) scale, [C, 2C) shift
        self.gamma_beta = nn.Conv2d(hidden, 2 * channels, 3, padding=1)

    def forward(self, h, seg):
        seg = self.resize(seg, h.shape[-2:])
        gamma, beta = self.gamma_beta(self.shared(seg)).chunk(2, dim=1)
        return self.norm(h) * (1 + gamma) + beta


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb, seg=None):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CondResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups, num_classes, hidden):
        super().__init__()
        self.norm1 = SpatialAdaptiveNorm(cin, num_classes, hidden, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = SpatialAdaptiveNorm(cout, num_classes, hidden, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb, seg):
        h = self.conv1(F.silu(self.norm1(x, seg)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h, seg)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    def __init__(self, channels, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x, temb=None, seg=None):
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(B, 3, C, H * W).unbind(1)
        w = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(C), dim=-1)
        h = torch.einsum("bij,bcj->bci", w, v).reshape(B, C, H, W)
        return x + self.proj(h)


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C0, G, K = cfg.base_channels, cfg.norm_groups, cfg.num_condition_classes
        temb = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(C0, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.in_conv = nn.Conv2d(1, C0, 3, padding=1)

        res = cfg.resolution[0]
        ch = C0
        levels = len(cfg.channel_multipliers)
        self.down = nn.ModuleList()
        skip_ch = []
        for i, mult in enumerate(cfg.channel_multipliers):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(ch, C0 * mult, temb, G))
                ch = C0 * mult
                if res in cfg.attention_resolutions:
                    blocks.append(AttentionBlock(ch, G))
            skip_ch.append(ch)
            pool = nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < levels - 1 else nn.Identity()
            self.down.append(nn.ModuleDict({"blocks": blocks, "pool": pool}))
            if i < levels - 1:
                res //= 2

        self.mid = nn.ModuleList([CondResBlock(ch, ch, temb, G, K, cfg.cond_hidden)])
        if res in cfg.attention_resolutions:
            self.mid.append(AttentionBlock(ch, G))
        self.mid.append(CondResBlock(ch, ch, temb, G, K, cfg.cond_hidden))

        self.up = nn.ModuleList()
        for i, mult in reversed(list(enumerate(cfg.channel_multipliers))):
            blocks = nn.ModuleList()
            cin = ch + skip_ch[i]
            for _ in range(cfg.num_res_blocks):
                blocks.append(CondResBlock(cin, C0 * mult, temb, G, K, cfg.cond_hidden))
                cin = ch = C0 * mult
                if res in cfg.attention_resolutions:
                    blocks.append(AttentionBlock(ch, G))
            upsample = nn.Conv2d(ch, ch, 3, padding=1) if i > 0 else nn.Identity()
            self.up.append(nn.ModuleDict({"blocks": blocks, "upsample": upsample}))
            if i > 0:
                res *= 2

        self.out_norm = nn.GroupNorm(G, ch)
        self.out_conv = nn.Conv2d(ch, 2, 3, padding=1)

    def forward(self, y_t, t, cond=None) -> DenoiserOutput:
        B = y_t.shape[0]
        if cond is None:
            cond = y_t.new_zeros((B, self.cfg.num_condition_classes) + tuple(y_t.shape[-2:]))
        t = torch.as_tensor(t, device=y_t.device).reshape(-1).expand(B)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(y_t.dtype))

        h = self.in_conv(y_t)
        skips = []
        for level in self.down:
            for block in level["blocks"]:
                h = block(h, temb)
            skips.append(h)
            h = level["pool"](h)
        for block in self.mid:
            h = block(h, temb, cond)
        for level in self.up:
            h = torch.cat([h, skips.pop()], dim=1)
            for block in level["blocks"]:
                h = block(h, temb, cond)
            if not isinstance(level["upsample"], nn.Identity):
                h = level["upsample"](F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.out_conv(F.silu(self.out_norm(h)))
        return DenoiserOutput(eps_hat=out[:, :1], v=torch.sigmoid(out[:, 1:2]))


def build_denoiser(cfg: DenoiserConfig, seed: int) -> Denoiser:
    if seed is None:
        raise ValueError("a seed is required to build a denoiser")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Denoiser(cfg)


def denoise(d: nn.Module, y_t: torch.Tensor, t, cond=None, T: int | None = None) -> DenoiserOutput:
    """Evaluate ``d`` once. ``cond=None`` is the null (all-zeros) condition."""
    res = tuple(d.cfg.resolution)
    if tuple(y_t.shape[-2:]) != res:
        raise ValueError(f"input resolution {tuple(y_t.shape[-2:])} != model resolution {res}")
    tt = torch.as_tensor(t).reshape(-1)
    if (tt < 1).any() or (T is not None and (tt > T).any()):
        raise IndexError(f"timestep out of range: {tt.tolist()}")
    if cond is not None and cond.shape[1] != d.cfg.num_condition_classes:
        raise ValueError(f"condition has {cond.shape[1]} channels, "
                         f"expected {d.cfg.num_condition_classes}")
    return d(y_t, t, cond)
