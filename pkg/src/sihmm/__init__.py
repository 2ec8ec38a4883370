"""Segmented infinite hidden Markov model fitted by stochastic variational inference."""

from .evaluation import label_segments, normalized_hamming, predictive_loglik
from .model import EmissionPrior, GlobalState, Hyperparams, ModelSpec
from .svi import SviConfig, decode, elbo_estimate, fit
from .synth import SynthConfig, generate

__all__ = [
    "EmissionPrior",
    "GlobalState",
    "Hyperparams",
    "ModelSpec",
    "SviConfig",
    "SynthConfig",
    "decode",
    "elbo_estimate",
    "fit",
    "generate",
    "label_segments",
    "normalized_hamming",
    "predictive_loglik",
]

__version__ = "0.1.0"
