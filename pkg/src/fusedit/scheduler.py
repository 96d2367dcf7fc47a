"""Noise schedule, forward noising and deterministic DDIM sampling/inversion.

Step indices ``t`` are training-step numbers indexing ``alpha_bars``. The index
``-1`` denotes the clean end of the chain, where the cumulative product is
``final_alpha_bar`` (1.0 by default).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import SingularityError


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-step diffusion coefficients.

    Attributes:
        num_train_steps: Length of the training chain.
        alphas: Per-step retention coefficients, each in (0, 1].
        alpha_bars: Cumulative products of ``alphas``.
        sigmas: Per-step noise scale; all zero for deterministic DDIM.
        inference_steps: Decreasing subsequence of step indices used for sampling.
        final_alpha_bar: Cumulative product assigned to step ``-1``.
    """

    num_train_steps: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    inference_steps: np.ndarray
    final_alpha_bar: float = 1.0

    def __post_init__(self):
        if self.num_train_steps < 1:
            raise ValueError("num_train_steps must be positive")
        for name in ("alphas", "alpha_bars", "sigmas"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.num_train_steps,):
                raise ValueError(f"{name} must have shape ({self.num_train_steps},), got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        steps = np.asarray(self.inference_steps, dtype=np.int64)
        steps.setflags(write=False)
        object.__setattr__(self, "inference_steps", steps)

        if np.any(self.alphas <= 0) or np.any(self.alphas > 1):
            raise ValueError("alphas must lie in (0, 1]")
        if np.any(self.alpha_bars <= 0) or np.any(self.alpha_bars > 1):
            raise ValueError("alpha_bars must lie in (0, 1]")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if steps.size and (np.any(np.diff(steps) >= 0) or steps.min() < 0 or steps.max() >= self.num_train_steps):
            raise ValueError("inference_steps must be strictly decreasing valid step indices")

    @classmethod
    def scaled_linear(
        cls,
        num_inference_steps: int = 50,
        num_train_steps: int = 1000,
        beta_start: float = 0.00085,
        beta_end: float = 0.012,
        steps_offset: int = 1,
        final_alpha_bar: float = 1.0,
    ) -> "NoiseSchedule":
        """The latent-diffusion backbone's schedule with a uniform-stride inference subsequence."""
        betas = np.linspace(beta_start**0.5, beta_end**0.5, num_train_steps, dtype=np.float64) ** 2
        alphas = 1.0 - betas
        return cls(
            num_train_steps=num_train_steps,
            alphas=alphas,
            alpha_bars=np.cumprod(alphas),
            sigmas=np.zeros(num_train_steps),
            inference_steps=uniform_inference_steps(num_inference_steps, num_train_steps, steps_offset),
            final_alpha_bar=final_alpha_bar,
        )

    @classmethod
    def from_alpha_bars(cls, alpha_bars, num_inference_steps: int | None = None) -> "NoiseSchedule":
        """Build a schedule from explicit cumulative products (useful for hand-checked values)."""
        alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
        alphas = alpha_bars / np.concatenate([[1.0], alpha_bars[:-1]])
        n = len(alpha_bars)
        steps = np.arange(n)[::-1] if num_inference_steps is None else uniform_inference_steps(num_inference_steps, n, 0)
        return cls(n, alphas, alpha_bars, np.zeros(n), steps)

    @property
    def num_inference_steps(self) -> int:
        return len(self.inference_steps)

    def alpha_bar(self, t: int) -> float:
        if t == -1:
            return float(self.final_alpha_bar)
        self.check_step(t)
        return float(self.alpha_bars[t])

    def check_step(self, t: int) -> None:
        if not (-1 <= int(t) < self.num_train_steps):
            raise IndexError(f"step index {t} outside [-1, {self.num_train_steps})")

    def previous_step(self, i: int) -> int:
        """Step index reached after sampling iteration ``i`` (``-1`` after the last one)."""
        steps = self.inference_steps
        return int(steps[i + 1]) if i + 1 < len(steps) else -1


def uniform_inference_steps(num_inference_steps: int, num_train_steps: int = 1000, steps_offset: int = 1) -> np.ndarray:
    if not 1 <= num_inference_steps <= num_train_steps:
        raise ValueError(f"num_inference_steps must lie in [1, {num_train_steps}]")
    stride = num_train_steps // num_inference_steps
    steps = np.arange(num_inference_steps, dtype=np.int64) * stride + steps_offset
    steps = steps[steps < num_train_steps]
    return steps[::-1].copy()


class Role(str, Enum):
    SOURCE = "source"
    EDIT = "edit"


@dataclass
class LatentState:
    """Per-frame latents ``(frames, channels, height, width)`` at one position of the sampling loop."""

    data: np.ndarray
    step_index: int
    role: Role = Role.SOURCE
    num_steps: int = field(default=50, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"latents must be (frames, channels, height, width), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("latents contain non-finite values")
        if not 0 <= self.step_index <= self.num_steps:
            raise IndexError(f"step_index {self.step_index} outside [0, {self.num_steps}]")
        self.role = Role(self.role)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def add_noise(x0, t: int, z, schedule: NoiseSchedule) -> np.ndarray:
    """Forward-noise a clean latent: ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * z``."""
    _same_shape(x0, z, "add_noise")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(z)


def ddpm_mean(x_t, eps_hat, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Ancestral posterior mean. Not used by the DDIM pipeline."""
    _same_shape(x_t, eps_hat, "ddpm_mean")
    schedule.check_step(t)
    if t == -1:
        raise IndexError("ddpm_mean needs a real step index")
    a = float(schedule.alphas[t])
    ab = float(schedule.alpha_bars[t])
    coef = 0.0 if a == 1.0 else np.sqrt(1.0 - a) / np.sqrt(1.0 - ab)
    return (np.asarray(x_t) - coef * np.asarray(eps_hat)) / np.sqrt(a)


def _transfer(x, eps, ab_from: float, ab_to: float) -> np.ndarray:
    if ab_from <= 0.0:
        raise SingularityError("cumulative alpha is zero; clean-sample estimate undefined")
    if ab_from == ab_to:
        return np.array(x, copy=True)
    x0_hat = (x - np.sqrt(1.0 - ab_from) * eps) / np.sqrt(ab_from)
    return np.sqrt(ab_to) * x0_hat + np.sqrt(1.0 - ab_to) * eps


def ddim_step(x_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from step ``t`` to the less noisy ``t_prev``."""
    _same_shape(x_t, eps_hat, "ddim_step")
    if t < t_prev:
        raise ValueError(f"ddim_step moves towards the clean end; got t={t} < t_prev={t_prev}")
    return _transfer(np.asarray(x_t), np.asarray(eps_hat), schedule.alpha_bar(t), schedule.alpha_bar(t_prev))


def ddim_invert_step(x_t_prev, eps_hat, t_prev: int, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Exact algebraic inverse of :func:`ddim_step` for a fixed noise prediction."""
    _same_shape(x_t_prev, eps_hat, "ddim_invert_step")
    if t < t_prev:
        raise ValueError(f"inversion moves towards the noisy end; got t={t} < t_prev={t_prev}")
    return _transfer(np.asarray(x_t_prev), np.asarray(eps_hat), schedule.alpha_bar(t_prev), schedule.alpha_bar(t))


def cfg_combine(eps_uncond, eps_cond, w: float) -> np.ndarray:
    """Classifier-free guidance: ``eps_uncond + w * (eps_cond - eps_uncond)``."""
    _same_shape(eps_uncond, eps_cond, "cfg_combine")
    if w < 0:
        raise ValueError(f"guidance scale must be non-negative, got {w}")
    eps_uncond, eps_cond = np.asarray(eps_uncond), np.asarray(eps_cond)
    # exact endpoints; the affine form rounds at w == 1
    if w == 0:
        return eps_uncond.copy()
    if w == 1:
        return eps_cond.copy()
    return eps_uncond + w * (eps_cond - eps_uncond)
