"""Emotion-conditioned toy latent diffusion: python surface over the C++ core."""

from emodiff._core import (
    attention,
    clustering_strength,
    condition_drop_rates,
    generate_corpus,
    grad_check_sum,
    info_nce,
    interpolate,
    project_2d,
    softmax,
    vq_loss,
    __version__,
)

__all__ = [
    "attention",
    "clustering_strength",
    "condition_drop_rates",
    "generate_corpus",
    "grad_check_sum",
    "info_nce",
    "interpolate",
    "project_2d",
    "softmax",
    "vq_loss",
    "__version__",
]
