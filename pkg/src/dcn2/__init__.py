"""Streaming CTR prediction: collision-weighted lookups, onlydense cross
layers and a pairwise similarity logit, with a DCNv2 baseline and a
single-pass benchmark harness."""

from .model import ModelConfig, Model, build, complexity_estimate

__version__ = "0.1.0"

__all__ = ["ModelConfig", "Model", "build", "complexity_estimate", "__version__"]
