"""Retinex decomposition with diffusion-based map adjustment for low-light enhancement."""

from .data import (
    PairedSample,
    RetinexDecomposition,
    SynthConfig,
    from_model_range,
    generate_synthetic,
    load_paired_dir,
    to_model_range,
)
from .diffusion import (
    NoiseSchedule,
    content_loss,
    diffusion_loss,
    estimate_x0,
    make_linear_schedule,
    p_sample,
    posterior_mean,
    q_sample,
    q_sample_step,
    sample_loop,
    total_diffusion_loss,
)
from .pipeline import EnhanceResult, adjust_illumination, adjust_reflectance, enhance
from .tdn import (
    DecomNet,
    DecomposerDescriptor,
    DecompositionLossWeights,
    decompose,
    illumination_smoothness_loss,
    reconstruction_loss,
    reflectance_consistency_loss,
    total_decomposition_loss,
)

__version__ = "0.1.0"

__all__ = [
    "DecomNet",
    "DecomposerDescriptor",
    "DecompositionLossWeights",
    "EnhanceResult",
    "NoiseSchedule",
    "PairedSample",
    "RetinexDecomposition",
    "SynthConfig",
    "adjust_illumination",
    "adjust_reflectance",
    "content_loss",
    "decompose",
    "diffusion_loss",
    "enhance",
    "estimate_x0",
    "from_model_range",
    "generate_synthetic",
    "illumination_smoothness_loss",
    "load_paired_dir",
    "make_linear_schedule",
    "p_sample",
    "posterior_mean",
    "q_sample",
    "q_sample_step",
    "reconstruction_loss",
    "reflectance_consistency_loss",
    "sample_loop",
    "to_model_range",
    "total_decomposition_loss",
    "total_diffusion_loss",
]
