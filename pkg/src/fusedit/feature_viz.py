"""Top principal components of decoder residual features rendered as RGB images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser.base import LayerAddress, StepCapture
from .errors import ConfigurationError, DegenerateInputError

# relative variance below which a component is treated as absent
_VARIANCE_FLOOR = 1e-12


@dataclass
class PCAResult:
    components: np.ndarray  # (n_components, channels), orthonormal rows
    explained_variance: np.ndarray
    mean: np.ndarray
    projection: np.ndarray  # (pixels, n_components)


def fit_pca(features: np.ndarray, n_components: int = 3) -> PCAResult:
    """PCA over the pixel axis of a ``(pixels, channels)`` matrix.

    Each component's sign makes its largest-magnitude loading positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be (pixels, channels), got {x.shape}")
    pixels, channels = x.shape
    if pixels < 2 or channels < n_components:
        raise ValueError(f"need pixels >= 2 and channels >= {n_components}, got {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = s**2 / (pixels - 1)
    if var[0] <= 0 or not np.isfinite(var[0]):
        raise DegenerateInputError("features have zero variance")
    comps = vt[:n_components].copy()
    peak = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(len(comps)), peak])[:, None]
    return PCAResult(comps, var[:n_components], mean, centered @ comps.T)


def normalize_channels(projection: np.ndarray, variance: np.ndarray | None = None) -> np.ndarray:
    """Min-max each column to [0, 1]; near-constant columns map to 0.5."""
    p = np.asarray(projection, dtype=np.float64)
    lo, hi = p.min(axis=0), p.max(axis=0)
    span = hi - lo
    flat = span <= 0
    if variance is not None:
        flat |= np.asarray(variance) <= _VARIANCE_FLOOR * max(float(np.max(variance)), 0.0)
    out = np.where(flat, 0.5, (p - lo) / np.where(flat, 1.0, span))
    return out


def pca_feature_maps(features: np.ndarray, n_components: int = 3) -> np.ndarray:
    """Colour images of the top components.

    Args:
        features: ``(pixels, channels)``, ``(side, side, channels)``, or
            ``(frames, side, side, channels)``. Frames share one basis so
            colours are comparable across the clip.
        n_components: Components mapped to colour channels.

    Returns:
        Floats in [0, 1] shaped like ``features`` with the channel axis
        replaced by ``n_components``.
    """
    x = np.asarray(features, dtype=np.float64)
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    pca = fit_pca(flat, n_components)
    return normalize_channels(pca.projection, pca.explained_variance).reshape(*lead, n_components)


def tokens_to_grid(features: np.ndarray) -> np.ndarray:
    """``(frames, hw, c)`` token features -> ``(frames, side, side, c)``."""
    f = np.asarray(features)
    side = int(round(np.sqrt(f.shape[-2])))
    if side * side != f.shape[-2]:
        raise ValueError(f"{f.shape[-2]} tokens do not form a square grid")
    return f.reshape(*f.shape[:-2], side, side, f.shape[-1])


def _layer_features(capture: StepCapture, layer: LayerAddress) -> np.ndarray:
    if layer not in capture.residual_features:
        raise ConfigurationError(f"layer {layer} not in capture for step {capture.step_index}", layer=str(layer))
    return capture.residual_features[layer]


def render_layer(capture: StepCapture, layer: LayerAddress, n_components: int = 3) -> np.ndarray:
    return pca_feature_maps(tokens_to_grid(_layer_features(capture, layer)), n_components)


def render_difference_features(src_capture: StepCapture, edit_capture: StepCapture, layer: LayerAddress, n_components: int = 3) -> np.ndarray:
    """Components of the source-minus-edit residual difference at ``layer``."""
    diff = _layer_features(src_capture, layer) - _layer_features(edit_capture, layer)
    return pca_feature_maps(tokens_to_grid(diff), n_components)


def image_name(layer: LayerAddress, step: int, frame: int, kind: str = "src") -> str:
    """Deterministic file name for one rendered map."""
    return f"{kind}_{layer.stage.value}{layer.index:02d}_r{layer.resolution:03d}_step{step:03d}_frame{frame:05d}.png"
