"""Bayesian posterior sampling by latent-category data augmentation."""

from .diagnostics import effective_sample_size, split_rhat
from .priors import Beta, Dirichlet, Gamma, Normal, PriorSpec, Uniform
from .sampler import (
    ARMS,
    McmcConfig,
    PosteriorSample,
    draw_categorical,
    fit_competitors,
    latent_probabilities,
    mcmc_fit,
    summarize,
)

__all__ = [
    "ARMS",
    "Beta",
    "Dirichlet",
    "Gamma",
    "McmcConfig",
    "Normal",
    "PosteriorSample",
    "PriorSpec",
    "Uniform",
    "draw_categorical",
    "effective_sample_size",
    "fit_competitors",
    "latent_probabilities",
    "mcmc_fit",
    "split_rhat",
    "summarize",
]
