"""Optimization loop: noise-prediction MSE on diff-domain pairs.

Per step, each sample in the batch gets a uniform random step index and a
fresh Gaussian noise target; the network predicts the noise from the
corrupted latent, the condition image and the step index. Checkpoints are
written as manifest + named-array directories (see unet.save_checkpoint).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .sampler import SamplerConfig, sample
from .schedule import NoiseSchedule, q_sample
from .unet import NetworkConfig, SkeletalDenoiser, save_checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    max_steps: int = 2000
    adam_betas: tuple = (0.9, 0.999)
    grad_clip: float | None = 1.0
    ema_decay: float | None = None
    seed: int = 0
    eval_interval: int = 500
    eval_samples: int = 2
    diff_domain: bool = True  # train on d = x - c; off trains directly on x
    log_every: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def _target_image(pair, diff_domain: bool) -> np.ndarray:
    return pair.d.data if diff_domain else pair.x.data


def noise_prediction_loss(model: SkeletalDenoiser, noisy: torch.Tensor,
                          cond: torch.Tensor, t_idx: torch.Tensor,
                          target: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise over a batch."""
    out = model(noisy, cond, t_idx)
    return torch.mean((out.eps_hat - target) ** 2)


def train_step(model: SkeletalDenoiser, optimizer, batch, sched: NoiseSchedule,
               config: TrainConfig, rng: np.random.Generator) -> float:
    """One optimizer update on a batch of PairedSamples; returns the loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    noisy, target, conds, ts = [], [], [], []
    for pair in batch:
        x0 = _target_image(pair, config.diff_domain)
        t = int(rng.integers(0, sched.T))
        eps = rng.standard_normal(x0.shape)
        noisy.append(q_sample(x0, t, eps, sched))
        target.append(eps)
        conds.append(pair.c.data)
        ts.append(t)

    noisy_t = torch.from_numpy(np.stack(noisy)).to(torch.float32)
    target_t = torch.from_numpy(np.stack(target)).to(torch.float32)
    cond_t = torch.from_numpy(np.stack(conds)).to(torch.float32)
    t_idx = torch.tensor(ts, dtype=torch.long)

    model.train()
    loss = noise_prediction_loss(model, noisy_t, cond_t, t_idx, target_t)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite training loss {loss.item()} at steps t={ts}; "
            f"latent range [{noisy_t.min().item():.3g}, {noisy_t.max().item():.3g}]"
        )
    optimizer.zero_grad()
    loss.backward()
    if config.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    return float(loss.item())


class EmaTracker:
    def __init__(self, model: SkeletalDenoiser, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    def update(self, model):
        for k, v in model.state_dict().items():
            if v.dtype.is_floating_point:
                self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1.0 - self.decay)
            else:
                self.shadow[k] = v.detach().clone()

    def copy_to(self, model):
        model.load_state_dict(self.shadow)


@dataclass
class FitResult:
    best_checkpoint: Path
    latest_checkpoint: Path
    losses: list = field(default_factory=list)
    best_step: int = -1
    best_ssim: float = float("-inf")


def _validate(model, val_pairs, sched, sampler_config, seed, n_images):
    """Sample a few validation conditions and score SSIM/MAE against targets."""
    ssims, maes = [], []
    for i, pair in enumerate(val_pairs[:n_images]):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1000 + i]))
        gen, _ = sample(pair.c.data, model, sched, sampler_config, rng)
        ssims.append(M.ssim(gen, pair.x.data))
        maes.append(M.mae(gen, pair.x.data))
    return {"ssim": float(np.mean(ssims)), "mae": float(np.mean(maes))}


def fit(train_pairs, val_pairs, model: SkeletalDenoiser, sched: NoiseSchedule,
        config: TrainConfig, sampler_config: SamplerConfig | None = None,
        out_dir=".", callbacks=None) -> FitResult:
    """Train to max_steps with periodic validation-driven snapshotting.

    Persists ``best`` (highest validation SSIM) and ``latest`` checkpoints
    under out_dir, plus a line-delimited training log.
    """
    if not train_pairs:
        raise ValueError("training split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sampler_config = sampler_config or SamplerConfig(
        enable_diff_domain=config.diff_domain)
    if sampler_config.enable_diff_domain != config.diff_domain:
        raise ValueError("sampler diff-domain flag must match the training config")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=config.adam_betas)
    ema = EmaTracker(model, config.ema_decay) if config.ema_decay else None

    result = FitResult(best_checkpoint=out_dir / "best", latest_checkpoint=out_dir / "latest")
    log_path = out_dir / "train_log.jsonl"
    t_start = time.monotonic()
    with open(log_path, "w") as log:
        for step in range(1, config.max_steps + 1):
            idx = rng.choice(len(train_pairs), size=config.batch_size, replace=True)
            batch = [train_pairs[i] for i in idx]
            loss = train_step(model, optimizer, batch, sched, config, rng)
            result.losses.append(loss)
            if ema is not None:
                ema.update(model)

            if step % config.log_every == 0 or step == config.max_steps:
                log.write(json.dumps({
                    "step": step, "loss": loss, "lr": config.learning_rate,
                    "wall_time": time.monotonic() - t_start,
                }) + "\n")

            if val_pairs and (step % config.eval_interval == 0 or step == config.max_steps):
                eval_model = model
                if ema is not None:
                    eval_model = SkeletalDenoiser(model.config, model.schedule)
                    ema.copy_to(eval_model)
                scores = _validate(eval_model, val_pairs, sched, sampler_config,
                                   config.seed, config.eval_samples)
                if callbacks:
                    for cb in callbacks:
                        cb(step, loss, scores)
                if scores["ssim"] > result.best_ssim:
                    result.best_ssim = scores["ssim"]
                    result.best_step = step
                    save_checkpoint(result.best_checkpoint, eval_model, step,
                                    metrics=scores)

    final_model = model
    if ema is not None:
        final_model = SkeletalDenoiser(model.config, model.schedule)
        ema.copy_to(final_model)
    save_checkpoint(result.latest_checkpoint, final_model, config.max_steps,
                    metrics={})
    if not (result.best_checkpoint / "manifest.json").exists():
        save_checkpoint(result.best_checkpoint, final_model, config.max_steps, metrics={})
        result.best_step = config.max_steps
    return result
