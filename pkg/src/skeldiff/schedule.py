"""Core diffusion mathematics: noise schedule, forward corruption, reverse steps.

Everything here is pure numpy and framework-free. Step indices are 0-based:
the conventional t = 1..T maps to array index t-1. All randomness comes from
an explicit ``numpy.random.Generator`` so callers control determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DOMAINS = ("natural", "xray", "diff", "noise")


@dataclass
class ImageTensor:
    """A [C, H, W] real image with a domain tag.

    natural/xray images live in [0, 1], diff images in [-1, 1], noise is
    unconstrained.
    """

    data: np.ndarray
    domain: str = "noise"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"expected [C, H, W] array, got shape {self.data.shape}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}, expected one of {DOMAINS}")
        if self.domain in ("natural", "xray"):
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < -1e-9 or hi > 1 + 1e-9:
                raise ValueError(f"{self.domain} image out of [0, 1]: range [{lo}, {hi}]")
        elif self.domain == "diff":
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < -1 - 1e-9 or hi > 1 + 1e-9:
                raise ValueError(f"diff image out of [-1, 1]: range [{lo}, {hi}]")

    @property
    def shape(self):
        return self.data.shape


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step scalars of the diffusion process, all length T.

    beta[t] is the step variance, alpha[t] = 1 - beta[t], alpha_bar[t] the
    cumulative product, sigma[t] the stochastic step width of the
    DDIM-style update, and posterior_variance[t] the Gaussian posterior
    variance used as the default reverse-step variance.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    posterior_variance: np.ndarray = field(repr=False)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise ValueError(f"step index {t} out of range [0, {self.T})")
        return t


def make_linear_schedule(T: int, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    """Build the linear beta schedule with both endpoints included.

    For T = 1 the single beta equals beta_1 (beta_T must then equal beta_1).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got ({beta_1}, {beta_T})")
    if T == 1:
        beta = np.array([beta_1], dtype=np.float64)
    else:
        beta = np.linspace(beta_1, beta_T, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)

    # sigma[0] is never used (the t=1 step is deterministic); keep it 0.
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.zeros(T, dtype=np.float64)
    if T > 1:
        sigma[1:] = np.sqrt((1.0 - alpha_bar_prev[1:]) / (1.0 - alpha_bar[1:])) * np.sqrt(
            1.0 - alpha_bar[1:] / alpha_bar_prev[1:]
        )

    post_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    post_var[0] = beta[0]
    return NoiseSchedule(
        T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma, posterior_variance=post_var
    )


def q_sample(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Forward corruption: sqrt(a_bar[t]) * x0 + sqrt(1 - a_bar[t]) * eps."""
    t = sched.check_t(t)
    x0 = _as_array(x0)
    eps = _as_array(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def training_pair(x0, t: int, rng: np.random.Generator, sched: NoiseSchedule):
    """Draw a standard-normal noise target and the matching corrupted image.

    Returns (noisy, target_eps); the training loss is the MSE between the
    network's noise prediction and target_eps.
    """
    x0 = _as_array(x0)
    target_eps = rng.standard_normal(x0.shape)
    noisy = q_sample(x0, t, target_eps, sched)
    return noisy, target_eps


def estimate_clean(x_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    """One-shot clean-image estimate: (x_t - sqrt(1 - a_bar[t]) * eps) / sqrt(a_bar[t])."""
    t = sched.check_t(t)
    x_t = _as_array(x_t)
    eps_hat = _as_array(eps_hat)
    ab = sched.alpha_bar[t]
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def posterior_mean(x_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Gaussian reverse-step mean: (x_t - beta_t / sqrt(1 - a_bar_t) * eps) / sqrt(alpha_t)."""
    t = sched.check_t(t)
    x_t = _as_array(x_t)
    eps_hat = _as_array(eps_hat)
    return (x_t - sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) / np.sqrt(
        sched.alpha[t]
    )


def ddpm_step(x_t, eps_hat, Sigma_t, t: int, rng: np.random.Generator, sched: NoiseSchedule):
    """One ancestral reverse step: mu_t + sqrt(Sigma_t) * z.

    ``t`` is the 0-based index of the current step; the step from index 0
    (conventional t = 1) is deterministic (z = 0) and never touches rng.
    Sigma_t may be a scalar or an array broadcastable to x_t.
    """
    t = sched.check_t(t)
    Sigma_t = np.asarray(Sigma_t, dtype=np.float64)
    if np.any(Sigma_t < 0):
        raise ValueError("negative variance entries in Sigma_t")
    mu = posterior_mean(x_t, eps_hat, t, sched)
    if t == 0:
        return mu
    z = rng.standard_normal(mu.shape)
    return mu + np.sqrt(Sigma_t) * z


def ddim_style_step(
    x_t, eps_hat, t: int, rng: np.random.Generator, sched: NoiseSchedule, eta: float = 1.0
):
    """Reverse step with an explicit noise-direction term and eta-scaled sigma_t.

    eta = 0 is fully deterministic; eta = 1 uses the schedule's sigma_t.
    At index 0 (conventional t = 1) the previous cumulative product is 1
    and the step is deterministic regardless of eta.
    """
    t = sched.check_t(t)
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    x_t = _as_array(x_t)
    eps_hat = _as_array(eps_hat)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1] if t >= 1 else 1.0
    sig = eta * sched.sigma[t]
    x0_est = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    out = np.sqrt(ab_prev) * x0_est + np.sqrt(1.0 - ab_prev - sig**2) * eps_hat
    if sig > 0:
        out = out + sig * rng.standard_normal(out.shape)
    return out
