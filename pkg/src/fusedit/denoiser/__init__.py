"""Denoiser backends sharing one hook surface."""

from .base import (
    AttentionKind,
    AttentionRecord,
    Controller,
    Denoiser,
    LayerAddress,
    PromptEmbedding,
    Stage,
    StepCapture,
    attention,
    attention_probs,
)
from .toy import ToyConfig, ToyDenoiser


def make_backend(name: str, model_path=None, key_frame_policy="previous", seed: int = 1234, **kwargs) -> Denoiser:
    """Backend factory for the config selection string ``"toy"`` or ``"pretrained-ldm"``."""
    from ..errors import ConfigurationError

    if name == "toy":
        # toy weights come from ToyConfig.seed, not the run seed, so every run sees the same network
        return ToyDenoiser(ToyConfig(**kwargs), key_frame_policy=key_frame_policy)
    if name == "pretrained-ldm":
        from .ldm import LDMDenoiser

        return LDMDenoiser.from_pretrained(model_path, key_frame_policy=key_frame_policy, seed=seed, **kwargs)
    raise ConfigurationError(f"unknown backend {name!r}; expected 'toy' or 'pretrained-ldm'")


__all__ = [
    "AttentionKind",
    "AttentionRecord",
    "Controller",
    "Denoiser",
    "LayerAddress",
    "PromptEmbedding",
    "Stage",
    "StepCapture",
    "ToyConfig",
    "ToyDenoiser",
    "attention",
    "attention_probs",
    "make_backend",
]
