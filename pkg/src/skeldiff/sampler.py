"""Refined reverse-diffusion sampling.

The loop runs in the diff-domain: at every step the network supplies a
noise estimate, a variance field, per-level decoder features and a
self-attention map. Features are fused into a soft refinement mask, the
attention map is thresholded into a binary gate, and both selectively pull
the latent toward a blurred-and-renoised clean estimate before the usual
Gaussian reverse step. The condition image is added back at the end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .schedule import NoiseSchedule, estimate_clean, posterior_mean
from .unet import SkeletalDenoiser


@dataclass
class SamplerConfig:
    psi: float = 0.5
    blur_kernel: int = 3
    # mild smoothing: the refinement denoises structure instead of erasing
    # it; stronger blur degrades small bright features over many steps
    blur_sigma: float = 0.3
    enable_multiscale: bool = True
    enable_attention: bool = True
    enable_diff_domain: bool = True

    def __post_init__(self):
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError(f"psi must be in [0, 1], got {self.psi}")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError(f"blur_kernel must be odd and >= 1, got {self.blur_kernel}")


@dataclass
class RefinementState:
    """Intermediates of one refined step, kept for diagnostics/tests."""

    d_t: np.ndarray
    M_t: np.ndarray
    G_t: np.ndarray
    d0_est: np.ndarray
    d_renoised: np.ndarray
    d_ref: np.ndarray
    d_attn: np.ndarray
    mu_t: np.ndarray


def resize_bilinear(img: np.ndarray, target_shape) -> np.ndarray:
    """Bilinear resize of the trailing two axes (align-corners convention)."""
    th, tw = target_shape
    h, w = img.shape[-2:]
    if (h, w) == (th, tw):
        return img.astype(np.float64, copy=True)
    ys = np.linspace(0.0, h - 1.0, th) if th > 1 else np.array([(h - 1) / 2.0])
    xs = np.linspace(0.0, w - 1.0, tw) if tw > 1 else np.array([(w - 1) / 2.0])
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).reshape(-1, 1)
    fx = (xs - x0).reshape(1, -1)
    img = np.asarray(img, dtype=np.float64)
    top = img[..., y0[:, None], x0[None, :]] * (1 - fx) + img[..., y0[:, None], x1[None, :]] * fx
    bot = img[..., y1[:, None], x0[None, :]] * (1 - fx) + img[..., y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy


def minmax_normalize(img: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant input maps to all zeros."""
    lo = float(img.min())
    hi = float(img.max())
    if hi <= lo:
        return np.zeros_like(img, dtype=np.float64)
    return (img - lo) / (hi - lo)


def fuse_multiscale(features, target_shape) -> np.ndarray:
    """Fuse per-level feature maps into one soft mask at target_shape.

    Channel-mean each level, bilinearly resize to target_shape, average
    across levels, then min-max normalize to [0, 1].
    """
    if len(features) == 0:
        raise ValueError("empty feature list")
    maps = []
    for f in features:
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 3:
            raise ValueError(f"expected [C, H, W] feature map, got shape {f.shape}")
        maps.append(resize_bilinear(f.mean(axis=0), target_shape))
    return minmax_normalize(np.mean(maps, axis=0))


def attention_gate(A_t: np.ndarray, psi: float, target_shape) -> np.ndarray:
    """Binary gate: 1 where the (resized) attention map strictly exceeds psi."""
    if not 0.0 <= psi <= 1.0:
        raise ValueError(f"psi must be in [0, 1], got {psi}")
    A_t = np.asarray(A_t, dtype=np.float64)
    resized = resize_bilinear(A_t, target_shape)
    return (resized > psi).astype(np.float64)


def gaussian_kernel(kernel: int, sigma: float) -> np.ndarray:
    """Odd-sized 2-D Gaussian kernel normalized to unit sum."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {kernel}")
    r = kernel // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    g2 = np.exp(-(xs[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma**2))
    return g2 / g2.sum()


def gaussian_blur(img: np.ndarray, kernel: int = 3, sigma: float = 1.0) -> np.ndarray:
    """2-D Gaussian convolution with reflect padding on the trailing axes."""
    k = gaussian_kernel(kernel, sigma)
    if kernel == 1:
        return np.asarray(img, dtype=np.float64).copy()
    img = np.asarray(img, dtype=np.float64)
    r = kernel // 2
    lead = img.shape[:-2]
    flat = img.reshape(-1, *img.shape[-2:])
    out = np.empty_like(flat)
    for i, plane in enumerate(flat):
        padded = np.pad(plane, r, mode="reflect")
        windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel))
        out[i] = np.einsum("ijkl,kl->ij", windows, k)
    return out.reshape(*lead, *img.shape[-2:])


def renoise(d0_est, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic re-noising with the predicted noise (no fresh draw)."""
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * np.asarray(d0_est, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(
        eps_hat, dtype=np.float64
    )


def refine(d_t, d_renoised, M_t, G_t):
    """Apply the soft mask then the binary gate.

    Returns (d_ref, d_attn):
      d_ref  = (1 - M) * d_t + M * d_renoised
      d_attn = (1 - G) * d_ref + G * d_renoised
    """
    d_t = np.asarray(d_t, dtype=np.float64)
    d_renoised = np.asarray(d_renoised, dtype=np.float64)
    M_t = np.asarray(M_t, dtype=np.float64)
    G_t = np.asarray(G_t, dtype=np.float64)
    for other in (d_renoised, np.broadcast_to(M_t, d_t.shape), np.broadcast_to(G_t, d_t.shape)):
        if other.shape != d_t.shape:
            raise ValueError("refine inputs must share one shape")
    d_ref = (1.0 - M_t) * d_t + M_t * d_renoised
    d_attn = (1.0 - G_t) * d_ref + G_t * d_renoised
    return d_ref, d_attn


class StepLogger:
    """Line-delimited JSON per-step diagnostics."""

    def __init__(self, path):
        self._fh = open(path, "w")

    def log(self, **fields):
        self._fh.write(json.dumps(fields, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()


def sample(
    c,
    model: SkeletalDenoiser,
    sched: NoiseSchedule,
    config: SamplerConfig,
    rng: np.random.Generator,
    logger: StepLogger | None = None,
    trajectory: list | None = None,
):
    """Run the full refined reverse loop for one condition image.

    ``c`` is a [C, H, W] array in [0, 1]. Returns (clipped, raw) output
    images; the raw value skips the final [0, 1] clipping so metrics can
    see the unclipped generator output. With diff-domain disabled the
    latent is the target image itself and the final condition addition is
    skipped. When ``trajectory`` is a list, every latent (initial noise
    plus each post-step latent) is appended to it.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 3:
        raise ValueError(f"expected [C, H, W] condition, got shape {c.shape}")
    if c.min() < -1e-9 or c.max() > 1 + 1e-9:
        raise ValueError("condition image must lie in [0, 1]")
    shape = (model.config.out_channels, *c.shape[-2:])
    spatial = c.shape[-2:]

    was_training = model.training
    model.eval()
    c_torch = torch.from_numpy(c).to(torch.float32)[None]

    d = rng.standard_normal(shape)
    if trajectory is not None:
        trajectory.append(d.copy())
    with torch.no_grad():
        for t in range(sched.T - 1, -1, -1):
            z = rng.standard_normal(shape) if t > 0 else None

            d_torch = torch.from_numpy(d).to(torch.float32)[None]
            out = model(d_torch, c_torch, t)
            eps_hat = out.eps_hat[0].double().numpy()
            sigma = out.sigma[0].double().numpy()

            if config.enable_multiscale:
                feats = [f[0].double().numpy() for f in out.features]
                M_t = fuse_multiscale(feats, spatial)
            else:
                M_t = np.zeros(spatial)
            if config.enable_attention:
                A_t = out.attention[0].double().numpy()
                G_t = attention_gate(A_t, config.psi, spatial)
            else:
                G_t = np.zeros(spatial)

            d0_est = estimate_clean(d, eps_hat, t, sched)
            d0_blur = gaussian_blur(d0_est, config.blur_kernel, config.blur_sigma)
            d_renoised = renoise(d0_blur, eps_hat, t, sched)
            _, d_attn = refine(d, d_renoised, M_t, G_t)

            mu = posterior_mean(d_attn, eps_hat, t, sched)
            if t > 0:
                d = mu + np.sqrt(sigma) * z
            else:
                d = mu

            if trajectory is not None:
                trajectory.append(d.copy())
            if logger is not None:
                logger.log(
                    t=t,
                    mask_mean=float(np.abs(M_t).mean()),
                    gate_fraction=float(G_t.mean()),
                    latent_norm=float(np.linalg.norm(d)),
                )

    if was_training:
        model.train()
    raw = d + c if config.enable_diff_domain else d
    return np.clip(raw, 0.0, 1.0), raw
