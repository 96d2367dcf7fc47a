"""Attention fusion: token alignment, mask extraction, self-attention cut-and-paste
and per-token cross-attention mixing.

Maps may carry leading batch axes (frames, heads). Spatial masks are
``(..., side, side)`` and gate the query rows of ``(..., side*side, keys)`` maps.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .denoiser.base import AttentionKind, AttentionRecord, PromptEmbedding
from .errors import AlignmentError, ConfigurationError, DegenerateInputError

BASE_RESOLUTION = 16
DEFAULT_THRESHOLD = 0.3


# ---------------------------------------------------------------- alignment


@dataclass
class TokenAlignment:
    """Which edit-prompt tokens are edited and where unedited ones come from.

    ``groups`` lists each edited concept as ``(source token indices, edit token indices)``.
    """

    alpha_w: np.ndarray
    edited_src_tokens: tuple[int, ...]
    edited_edit_tokens: tuple[int, ...]
    src_to_edit: dict[int, int]
    groups: list[tuple[tuple[int, ...], tuple[int, ...]]] = field(default_factory=list)

    def edit_to_src(self) -> dict[int, int]:
        return {e: s for s, e in self.src_to_edit.items()}


def lcs_pairs(a: Sequence, b: Sequence) -> list[tuple[int, int]]:
    """Index pairs of one longest common subsequence of ``a`` and ``b``."""
    n, m = len(a), len(b)
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            table[i, j] = table[i + 1, j + 1] + 1 if a[i] == b[j] else max(table[i + 1, j], table[i, j + 1])
    pairs, i, j = [], 0, 0
    while i < n and j < m:
        if a[i] == b[j]:
            pairs.append((i, j))
            i, j = i + 1, j + 1
        elif table[i + 1, j] >= table[i, j + 1]:
            i += 1
        else:
            j += 1
    return pairs


_WORD = re.compile(r"[a-z0-9]+")


def _norm_words(text: str) -> list[str]:
    return ["".join(_WORD.findall(w.lower())) for w in text.split()]


def _find_tokens(prompt: PromptEmbedding, phrase: str) -> tuple[int, ...]:
    words = _norm_words(prompt.text)
    target = [w for w in _norm_words(phrase) if w]
    if not target:
        raise ConfigurationError(f"empty blend word {phrase!r}")
    for start in range(len(words) - len(target) + 1):
        if words[start : start + len(target)] == target:
            idx = []
            for w in range(start, start + len(target)):
                idx.extend(prompt.word_spans.get(w, range(0)))
            if idx:
                return tuple(idx)
    raise ConfigurationError(f"blend word {phrase!r} not found in prompt {prompt.text!r}")


def align_tokens(
    src_prompt: PromptEmbedding,
    edit_prompt: PromptEmbedding,
    user_blend_words: Iterable[tuple[str, str]] | None = None,
) -> TokenAlignment:
    """Align two prompts by longest common token subsequence.

    Edit tokens outside the common subsequence are edited. Explicit
    ``(source words, edit words)`` pairs additionally force their tokens to be
    edited and become the concept groups.
    """
    pairs = lcs_pairs(src_prompt.tokens, edit_prompt.tokens)
    src_to_edit = dict(pairs)

    groups = []
    prev_i, prev_j = -1, -1
    for i, j in pairs + [(len(src_prompt), len(edit_prompt))]:
        if i - prev_i > 1 or j - prev_j > 1:
            groups.append((tuple(range(prev_i + 1, i)), tuple(range(prev_j + 1, j))))
        prev_i, prev_j = i, j

    if user_blend_words:
        explicit = []
        for src_words, edit_words in user_blend_words:
            s_idx, e_idx = _find_tokens(src_prompt, src_words), _find_tokens(edit_prompt, edit_words)
            for s in s_idx:
                src_to_edit.pop(s, None)
            e_set = set(e_idx)
            src_to_edit = {s: e for s, e in src_to_edit.items() if e not in e_set}
            explicit.append((s_idx, e_idx))
        covered = {e for _, ee in explicit for e in ee}
        groups = explicit + [g for g in groups if not covered.intersection(g[1])]

    alpha = np.ones(len(edit_prompt), dtype=np.int64)
    alpha[list(src_to_edit.values())] = 0
    edited_src = tuple(i for i in range(len(src_prompt)) if i not in src_to_edit)
    edited_edit = tuple(int(j) for j in np.flatnonzero(alpha))
    return TokenAlignment(alpha, edited_src, edited_edit, src_to_edit, groups)


# ------------------------------------------------------------ masks


@dataclass
class AggregatedCrossAttention:
    """Cross-attention averaged over heads and base-resolution layers: ``(..., side, side, N)``."""

    maps: np.ndarray
    prompt_side: str
    step_index: int = 0

    @property
    def num_tokens(self) -> int:
        return self.maps.shape[-1]


def aggregate_cross_attention(
    records: Iterable[AttentionRecord],
    token_indices: Sequence[int],
    target_side: str = "edit",
    resolution: int = BASE_RESOLUTION,
    step_index: int = 0,
) -> AggregatedCrossAttention:
    """Mean over heads and over every cross-attention layer at ``resolution``, sliced to ``token_indices``.

    Record probs are ``(frames, heads, hw, tokens)`` or ``(heads, hw, tokens)``.
    """
    maps = [
        r.probs for r in records if r.kind is AttentionKind.CROSS and r.address.resolution == resolution
    ]
    if not maps:
        raise ConfigurationError(f"no {resolution}x{resolution} cross-attention layer among the captured records")
    idx = list(token_indices)
    per_layer = [np.mean(np.asarray(p)[..., idx], axis=-3) for p in maps]
    mean = np.mean(per_layer, axis=0)
    mean = mean.reshape(*mean.shape[:-2], resolution, resolution, len(idx))
    return AggregatedCrossAttention(mean, target_side, step_index)


def threshold_mask(normalized, threshold: float) -> np.ndarray:
    """Elementwise ``normalized >= threshold`` as a {0, 1} mask."""
    return (np.asarray(normalized) >= threshold).astype(np.uint8)


def extract_mask(agg: AggregatedCrossAttention | np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Binary mask from the per-pixel max over edited tokens, max-normalized per mask.

    With no edited tokens the mask is empty (nothing to edit).
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    maps = np.asarray(getattr(agg, "maps", agg))
    if maps.shape[-1] == 0:
        return np.zeros(maps.shape[:-1], dtype=np.uint8)
    if np.any(maps < 0):
        raise ValueError("attention maps must be non-negative")
    pooled = maps.max(axis=-1)
    peak = pooled.max(axis=(-2, -1), keepdims=True)
    if np.any(peak <= 0):
        raise DegenerateInputError("cross-attention aggregate is all zero; check the token alignment")
    return threshold_mask(pooled / peak, threshold)


def resize_mask(mask, target_side: int) -> np.ndarray:
    """Nearest-neighbour resampling with pixel-centre alignment; output stays {0, 1}."""
    if target_side < 1:
        raise ValueError(f"target_side must be positive, got {target_side}")
    mask = np.asarray(mask)
    h, w = mask.shape[-2:]
    # floor((i + 1/2) * h / target) in exact integers; a centre on a pixel boundary takes the upper pixel
    rows = np.minimum((2 * np.arange(target_side) + 1) * h // (2 * target_side), h - 1)
    cols = np.minimum((2 * np.arange(target_side) + 1) * w // (2 * target_side), w - 1)
    return mask[..., rows[:, None], cols[None, :]]


@dataclass
class MaskSet:
    """Source/edit foreground masks at base resolution plus cached resized copies."""

    m_src: np.ndarray
    m_edit: np.ndarray
    threshold: float = DEFAULT_THRESHOLD
    token_groups: list = field(default_factory=list)
    group_masks: np.ndarray | None = None
    per_resolution: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def at(self, side: int) -> tuple[np.ndarray, np.ndarray]:
        if side not in self.per_resolution:
            self.per_resolution[side] = (resize_mask(self.m_src, side), resize_mask(self.m_edit, side))
        return self.per_resolution[side]


def build_masks(
    src_records: Iterable[AttentionRecord],
    edit_records: Iterable[AttentionRecord],
    alignment: TokenAlignment,
    threshold: float = DEFAULT_THRESHOLD,
    resolution: int = BASE_RESOLUTION,
    step_index: int = 0,
) -> MaskSet:
    """Masks for one step.

    ``M_s`` pools the source pass over removed/replaced source tokens and
    ``M_e`` the edit pass over added/replacing edit tokens. A pure insertion has
    no source tokens, so ``M_s`` falls back to ``M_e``.
    """
    src_records, edit_records = list(src_records), list(edit_records)
    edit_agg = aggregate_cross_attention(edit_records, alignment.edited_edit_tokens, "edit", resolution, step_index)
    m_edit = extract_mask(edit_agg, threshold)
    if alignment.edited_src_tokens:
        src_agg = aggregate_cross_attention(src_records, alignment.edited_src_tokens, "src", resolution, step_index)
        m_src = extract_mask(src_agg, threshold)
    else:
        m_src = m_edit.copy()
    group_masks = None
    if alignment.groups:
        pos = {t: i for i, t in enumerate(alignment.edited_edit_tokens)}
        per_group = []
        for _, e_idx in alignment.groups:
            cols = [pos[e] for e in e_idx if e in pos]
            per_group.append(extract_mask(edit_agg.maps[..., cols], threshold) if cols else np.zeros_like(m_edit))
        group_masks = np.stack(per_group)
    return MaskSet(m_src, m_edit, threshold, list(alignment.groups), group_masks)


# ------------------------------------------------------------- fusion


def _row_gate(mask, probs) -> np.ndarray:
    """Broadcast a ``(..., side, side)`` mask onto the query rows of ``probs``."""
    mask = np.asarray(mask, dtype=np.float64)
    q = probs.shape[-2]
    if mask.shape[-1] * mask.shape[-2] != q:
        raise ValueError(f"mask {mask.shape[-2:]} does not cover {q} query tokens")
    gate = mask.reshape(*mask.shape[:-2], q, 1)
    # frames-first masks against (frames, heads, q, k) maps
    if gate.ndim == 3 and probs.ndim == 4:
        gate = gate[:, None]
    return gate


def fuse_self_attention(s_src, s_edit, m_src, m_edit, renormalize: bool = True) -> np.ndarray:
    """Cut-and-paste self-attention.

    ``M_e * s_edit + (1 - M_s) * s_src`` per query row; rows where both gates are
    closed (``M_e = 0``, ``M_s = 1``) are zero and are filled from ``s_edit``.
    """
    s_src, s_edit = np.asarray(s_src, dtype=np.float64), np.asarray(s_edit, dtype=np.float64)
    if s_src.shape != s_edit.shape:
        raise ValueError(f"attention map shapes differ: {s_src.shape} vs {s_edit.shape}")
    g_e, g_s = _row_gate(m_edit, s_edit), _row_gate(m_src, s_src)
    fused = g_e * s_edit + (1.0 - g_s) * s_src
    closed = (g_e == 0) & (g_s == 1)
    fused = np.where(closed, s_edit, fused)
    if renormalize:
        fused = fused / fused.sum(axis=-1, keepdims=True)
    return fused


def fuse_cross_attention(c_src, c_edit, alignment: TokenAlignment) -> np.ndarray:
    """Edit-prompt columns for edited tokens, source columns (re-indexed) for the rest."""
    c_src, c_edit = np.asarray(c_src), np.asarray(c_edit)
    alpha = np.asarray(alignment.alpha_w)
    if c_edit.shape[-1] != len(alpha):
        raise ValueError(f"{c_edit.shape[-1]} edit columns but alignment covers {len(alpha)} tokens")
    if c_src.shape[:-1] != c_edit.shape[:-1]:
        raise ValueError(f"map shapes differ: {c_src.shape} vs {c_edit.shape}")
    back = alignment.edit_to_src()
    out = c_edit.copy()
    for j in np.flatnonzero(alpha == 0):
        if j not in back:
            raise AlignmentError(f"unedited edit token {j} has no source token")
        out[..., j] = c_src[..., back[j]]
    return out
