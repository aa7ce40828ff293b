"""Skeleton-guided conditional diffusion for foot X-ray synthesis."""

__version__ = "0.1.0"

from .schedule import (  # noqa: F401
    ImageTensor,
    NoiseSchedule,
    ddim_style_step,
    ddpm_step,
    estimate_clean,
    make_linear_schedule,
    q_sample,
    training_pair,
)
from .unet import NetworkConfig, DenoiserOutput, SkeletalDenoiser, count_parameters  # noqa: F401
from .sampler import SamplerConfig, sample  # noqa: F401
