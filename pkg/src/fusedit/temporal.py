"""Key-frame attention: every frame's keys/values are extended with a key frame's tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .denoiser.base import attention_probs


class KeyFramePolicy(str, Enum):
    PREVIOUS = "previous"
    MIDDLE = "middle"
    NEXT = "next"
    SELF = "self"


@dataclass(frozen=True)
class FrameBatchLayout:
    num_frames: int
    tokens_per_frame: int
    key_frame_policy: KeyFramePolicy = KeyFramePolicy.PREVIOUS

    def key_frames(self) -> np.ndarray:
        return key_frame_indices(self.num_frames, self.key_frame_policy)


def select_key_frame(i: int, policy: KeyFramePolicy | str, num_frames: int) -> int:
    """Index of the frame whose tokens frame ``i`` attends to besides its own.

    ``previous`` clamps at frame 0, which then uses itself.
    """
    if not 0 <= i < num_frames:
        raise IndexError(f"frame index {i} outside [0, {num_frames})")
    policy = KeyFramePolicy(policy)
    if policy is KeyFramePolicy.PREVIOUS:
        return max(i - 1, 0)
    if policy is KeyFramePolicy.NEXT:
        return min(i + 1, num_frames - 1)
    if policy is KeyFramePolicy.MIDDLE:
        # round half up; clamp keeps single-frame clips valid
        return min(int(math.floor(num_frames / 2 + 0.5)), num_frames - 1)
    return i


def key_frame_indices(num_frames: int, policy: KeyFramePolicy | str) -> np.ndarray:
    return np.array([select_key_frame(i, policy, num_frames) for i in range(num_frames)], dtype=np.int64)


def with_key_frame(tokens: np.ndarray, key_frames: np.ndarray) -> np.ndarray:
    """``(frames, hw, c)`` -> ``(frames, 2hw, c)`` holding ``[z^i; z^k]`` per frame."""
    return np.concatenate([tokens, tokens[key_frames]], axis=-2)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    return np.moveaxis(x.reshape(*lead, n, heads, d // heads), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def spatio_temporal_attention(z_i, z_k, w_q, w_k, w_v, heads: int = 1):
    """Attention of frame tokens over themselves and the key frame's tokens.

    Args:
        z_i: ``(hw, c)`` tokens of the current frame.
        z_k: ``(hw, c)`` tokens of the key frame.
        w_q, w_k, w_v: ``(c, d)`` projection weights, reused unchanged from spatial self-attention.
        heads: Number of heads ``d`` is split into.

    Returns:
        ``(output, probs)`` with ``output`` ``(hw, d)`` and ``probs`` ``(heads, hw, 2hw)``.
    """
    z_i, z_k = np.asarray(z_i), np.asarray(z_k)
    if z_i.shape != z_k.shape:
        raise ValueError(f"frame token shapes differ: {z_i.shape} vs {z_k.shape}")
    both = np.concatenate([z_i, z_k], axis=-2)
    q = _split_heads(z_i @ w_q, heads)
    k = _split_heads(both @ w_k, heads)
    v = _split_heads(both @ w_v, heads)
    probs = attention_probs(q, k)
    return _merge_heads(probs @ v), probs
