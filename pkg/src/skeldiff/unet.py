"""Time-conditioned U-Net noise predictor.

Takes the current diff-domain latent, the natural-light condition image
(channel-concatenated at the input) and the step index, and returns the
quadruple the refined sampler consumes: noise estimate, per-pixel variance,
per-decoder-level feature maps, and a normalized self-attention map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedule import NoiseSchedule

VARIANCE_MODES = ("fixed_posterior", "learned_range")


@dataclass
class NetworkConfig:
    base_channels: int = 64
    channel_mult: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    res_blocks_per_level: int = 2
    dropout: float = 0.3
    attention_resolution: int = 64
    attention_heads: int = 1
    in_channels: int = 2  # latent channels + condition channels
    out_channels: int = 1
    image_size: int = 64
    variance_mode: str = "fixed_posterior"

    def __post_init__(self):
        if not self.channel_mult:
            raise ValueError("channel_mult must be nonempty")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.variance_mode not in VARIANCE_MODES:
            raise ValueError(f"variance_mode must be one of {VARIANCE_MODES}")
        levels = len(self.channel_mult)
        if self.image_size % (2 ** (levels - 1)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{levels - 1} "
                f"required by {levels} levels"
            )
        resolutions = [self.image_size // (2**i) for i in range(levels)]
        if self.attention_resolution not in resolutions:
            raise ValueError(
                f"attention_resolution {self.attention_resolution} not among "
                f"downsampling-path resolutions {resolutions}"
            )

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    def level_resolution(self, level: int) -> int:
        return self.image_size // (2**level)


@dataclass
class DenoiserOutput:
    """Per-step network outputs consumed by the refined sampler."""

    eps_hat: torch.Tensor  # [B, C, H, W], same shape as the latent
    sigma: torch.Tensor  # [B, C, H, W] variance field
    features: list[torch.Tensor]  # one per level, finest first
    attention: torch.Tensor  # [B, h, w] in [0, 1]


def time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal step embedding: [sin(t * w_0..w_{d/2-1}), cos(...)].

    Frequencies follow the usual 10000^(-2i/dim) geometric spacing, which
    keeps the embedding injective over step counts up to 1e4.
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64)
    if t.ndim == 0:
        t = t[None]
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _norm(channels: int) -> nn.GroupNorm:
    # 8 groups when divisible, fewer for narrow layers (batch size 2 rules
    # out batch norm)
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, dropout: float):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    """Single-layer spatial self-attention with a residual connection.

    After each forward pass ``last_map`` holds the per-query mean attention
    weight over keys, reshaped to [B, h, w] and min-max normalized per
    sample to [0, 1] (all-zero when the map is constant).
    """

    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.last_map: torch.Tensor | None = None
        self.last_weights: torch.Tensor | None = None

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x))
        q, k, v = qkv.reshape(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        scale = (c // self.heads) ** -0.5
        attn = torch.softmax(torch.einsum("bhcq,bhck->bhqk", q * scale, k), dim=-1)
        out = torch.einsum("bhqk,bhck->bhcq", attn, v).reshape(b, c, h, w)

        # received attention per key position, averaged over queries and heads
        amap = attn.mean(dim=(1, 2)).reshape(b, h, w)
        lo = amap.amin(dim=(1, 2), keepdim=True)
        hi = amap.amax(dim=(1, 2), keepdim=True)
        span = hi - lo
        normed = torch.where(span > 0, (amap - lo) / torch.where(span > 0, span, span + 1), torch.zeros_like(amap))
        self.last_weights = attn
        self.last_map = normed
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.op = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.op(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class SkeletalDenoiser(nn.Module):
    """Encoder-decoder noise predictor with per-level feature taps.

    The condition image is concatenated to the latent along channels; the
    decoder exposes one feature map per level (captured after the level's
    last residual block, before upsampling) plus the attention map of the
    decoder-side attention layer.
    """

    def __init__(self, config: NetworkConfig, schedule: NoiseSchedule | None = None):
        super().__init__()
        self.config = config
        self.schedule = schedule
        cfg = config
        time_dim = cfg.base_channels * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )

        chans = [cfg.base_channels * m for m in cfg.channel_mult]
        self.in_conv = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = chans[0]
        for i in range(cfg.levels):
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks_per_level):
                blocks.append(ResBlock(ch, chans[i], time_dim, cfg.dropout))
                ch = chans[i]
            self.down_blocks.append(blocks)
            use_attn = cfg.level_resolution(i) == cfg.attention_resolution
            self.down_attns.append(SelfAttention(ch, cfg.attention_heads) if use_attn else None)
            if i < cfg.levels - 1:
                self.downsamples.append(Downsample(ch))

        self.mid_block1 = ResBlock(ch, ch, time_dim, cfg.dropout)
        mid_attn = cfg.level_resolution(cfg.levels - 1) == cfg.attention_resolution
        self.mid_attn = SelfAttention(ch, cfg.attention_heads) if mid_attn else None
        self.mid_block2 = ResBlock(ch, ch, time_dim, cfg.dropout)

        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            blocks = nn.ModuleList()
            in_ch = ch + chans[i]  # skip concatenation
            for _ in range(cfg.res_blocks_per_level):
                blocks.append(ResBlock(in_ch, chans[i], time_dim, cfg.dropout))
                in_ch = chans[i]
            ch = chans[i]
            self.up_blocks.append(blocks)
            use_attn = cfg.level_resolution(i) == cfg.attention_resolution
            self.up_attns.append(SelfAttention(ch, cfg.attention_heads) if use_attn else None)
            if i > 0:
                self.upsamples.append(Upsample(ch))

        out_mult = 2 if cfg.variance_mode == "learned_range" else 1
        self.out_norm = _norm(ch)
        self.out_conv = nn.Conv2d(ch, cfg.out_channels * out_mult, 3, padding=1)
        self._attn_source: SelfAttention | None = None

    def _attention_modules(self):
        mods = [m for m in self.down_attns if m is not None]
        if self.mid_attn is not None:
            mods.append(self.mid_attn)
        mods += [m for m in self.up_attns if m is not None]
        return mods

    def forward(self, d_t: torch.Tensor, c: torch.Tensor, t) -> DenoiserOutput:
        if d_t.shape[-2:] != c.shape[-2:]:
            raise ValueError(f"spatial mismatch: latent {tuple(d_t.shape)} vs condition {tuple(c.shape)}")
        if d_t.ndim != 4 or c.ndim != 4:
            raise ValueError("expected batched [B, C, H, W] inputs")
        cfg = self.config
        if d_t.shape[-1] % (2 ** (cfg.levels - 1)) != 0 or d_t.shape[-2] % (2 ** (cfg.levels - 1)) != 0:
            raise ValueError(
                f"input resolution {tuple(d_t.shape[-2:])} not divisible by 2^{cfg.levels - 1}"
            )
        b = d_t.shape[0]
        t_idx = torch.as_tensor(t, device=d_t.device).reshape(-1)
        if t_idx.numel() == 1:
            t_idx = t_idx.expand(b)
        t_emb = self.time_mlp(time_embedding(t_idx, cfg.base_channels).to(d_t.dtype))

        h = self.in_conv(torch.cat([d_t, c], dim=1))
        skips = []
        for i in range(cfg.levels):
            for block in self.down_blocks[i]:
                h = block(h, t_emb)
            if self.down_attns[i] is not None:
                h = self.down_attns[i](h)
            skips.append(h)
            if i < cfg.levels - 1:
                h = self.downsamples[i](h)

        h = self.mid_block1(h, t_emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid_block2(h, t_emb)

        features: list[torch.Tensor] = []
        attn_map = None
        for j, i in enumerate(reversed(range(cfg.levels))):
            h = torch.cat([h, skips[i]], dim=1)
            for block in self.up_blocks[j]:
                h = block(h, t_emb)
            if self.up_attns[j] is not None:
                h = self.up_attns[j](h)
                attn_map = self.up_attns[j].last_map
            features.append(h)
            if i > 0:
                h = self.upsamples[j](h)
        features.reverse()  # finest first

        if attn_map is None:
            # attention sits only on the encoder/mid path for this config
            src = self.mid_attn or next(m for m in self.down_attns if m is not None)
            attn_map = src.last_map

        out = self.out_conv(F.silu(self.out_norm(h)))
        if cfg.variance_mode == "learned_range":
            eps_hat, raw_v = out.chunk(2, dim=1)
            sigma = self._interp_variance(torch.sigmoid(raw_v), t_idx, d_t)
        else:
            eps_hat = out
            if self.schedule is None:
                raise RuntimeError("fixed_posterior variance needs a schedule at construction")
            post = torch.as_tensor(
                self.schedule.posterior_variance, device=d_t.device, dtype=d_t.dtype
            )[t_idx]
            sigma = post[:, None, None, None].expand_as(eps_hat).clone()
        return DenoiserOutput(eps_hat=eps_hat, sigma=sigma, features=features, attention=attn_map)

    def _interp_variance(self, frac, t_idx, like):
        if self.schedule is None:
            raise RuntimeError("learned_range variance needs a schedule at construction")
        beta = torch.as_tensor(self.schedule.beta, device=like.device, dtype=like.dtype)[t_idx]
        post = torch.as_tensor(
            self.schedule.posterior_variance, device=like.device, dtype=like.dtype
        )[t_idx]
        log_beta = torch.log(beta)[:, None, None, None]
        log_post = torch.log(post)[:, None, None, None]
        return torch.exp(frac * log_beta + (1.0 - frac) * log_post)


def count_parameters(config: NetworkConfig) -> int:
    """Exact number of trainable scalars for a config."""
    model = SkeletalDenoiser(config, schedule=None)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# --- checkpoint I/O ------------------------------------------------------
#
# A checkpoint is a directory: manifest.json (config, step, metric snapshot)
# plus params/<name>.npy, one array per state-dict entry. Loading fails on
# any missing, extra, or mis-shaped entry.

def save_checkpoint(path, model: SkeletalDenoiser, step: int, metrics: dict | None = None):
    path = Path(path)
    params_dir = path / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for name, tensor in model.state_dict().items():
        np.save(params_dir / f"{name}.npy", tensor.detach().cpu().numpy())
        names.append(name)
    manifest = {
        "config": asdict(model.config),
        "step": int(step),
        "metrics": metrics or {},
        "parameters": sorted(names),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, schedule: NoiseSchedule | None = None):
    """Rebuild a model from a checkpoint directory. Returns (model, manifest)."""
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise FileNotFoundError(f"no manifest.json in {path}")
    manifest = json.loads(manifest_file.read_text())
    config = NetworkConfig(**manifest["config"])
    model = SkeletalDenoiser(config, schedule=schedule)
    expected = model.state_dict()
    stored = {p.stem for p in (path / "params").glob("*.npy")}
    missing = set(expected) - stored
    extra = stored - set(expected)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    state = {}
    for name, tensor in expected.items():
        arr = np.load(path / "params" / f"{name}.npy")
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {arr.shape} vs model {tuple(tensor.shape)}"
            )
        state[name] = torch.from_numpy(arr).to(tensor.dtype)
    model.load_state_dict(state)
    return model, manifest
