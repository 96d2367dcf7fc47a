"""Denoiser contract: hook surface, capture records and the attention primitive."""

from __future__ import annotations

import abc
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from scipy.special import softmax

from ..errors import ConfigurationError


class Stage(str, Enum):
    ENCODER = "encoder"
    BOTTLENECK = "bottleneck"
    DECODER = "decoder"


class AttentionKind(str, Enum):
    SELF = "self"
    CROSS = "cross"


@dataclass(frozen=True, order=True)
class LayerAddress:
    """Position of a residual/attention layer; ``index`` is the ordinal within its stage."""

    stage: Stage
    index: int
    resolution: int

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))

    def __str__(self) -> str:
        return f"{self.stage.value}.{self.index:02d}@{self.resolution}"

    @staticmethod
    def find(text: str, layers: Iterable["LayerAddress"]) -> "LayerAddress":
        """Look up ``"decoder.04@16"``, ``"decoder.4"`` or a bare decoder ordinal ``"4"`` among ``layers``."""
        m = re.fullmatch(r"(?:(encoder|bottleneck|decoder)\.)?(\d+)(?:@(\d+))?", text.strip())
        if m is None:
            raise ConfigurationError(f"cannot parse layer {text!r}")
        stage = Stage(m.group(1) or "decoder")
        index = int(m.group(2))
        for a in layers:
            if a.stage is stage and a.index == index and (m.group(3) is None or a.resolution == int(m.group(3))):
                return a
        raise ConfigurationError(f"unknown layer {text!r}")


@dataclass
class AttentionRecord:
    """Tensors of one attention call.

    Arrays carry a leading frame axis: ``queries``/``keys``/``values`` are
    ``(frames, heads, tokens, dim)`` and ``probs`` is ``(frames, heads, query_tokens, key_tokens)``.
    ``output`` is ``probs @ values`` before the output projection.
    """

    address: LayerAddress
    kind: AttentionKind
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    probs: np.ndarray
    output: np.ndarray | None = None

    def __post_init__(self):
        self.kind = AttentionKind(self.kind)


@dataclass
class StepCapture:
    """What one denoiser call exposed at the captured layers."""

    step_index: int
    residual_features: dict[LayerAddress, np.ndarray] = field(default_factory=dict)
    attention: list[AttentionRecord] = field(default_factory=list)

    def record(self, address: LayerAddress, kind: AttentionKind | str) -> AttentionRecord:
        kind = AttentionKind(kind)
        for rec in self.attention:
            if rec.address == address and rec.kind == kind:
                return rec
        raise KeyError(f"no {kind.value}-attention record at {address}")

    def records(self, kind: AttentionKind | str) -> list[AttentionRecord]:
        kind = AttentionKind(kind)
        return [r for r in self.attention if r.kind == kind]


@dataclass
class PromptEmbedding:
    """Tokenized and encoded prompt.

    ``word_spans`` maps the index of each whitespace-separated word of ``text``
    to the half-open token range it produced.
    """

    text: str
    tokens: list[int]
    token_strings: list[str]
    embedding: np.ndarray
    word_spans: dict[int, range]
    metadata: dict = field(default_factory=dict)

    @property
    def words(self) -> list[str]:
        return self.text.split()

    def __len__(self) -> int:
        return len(self.tokens)


def attention_probs(q: np.ndarray, k: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Row-stochastic attention matrix ``softmax(scale * q k^T)``; ``scale`` defaults to ``1/sqrt(dim)``."""
    q, k = np.asarray(q), np.asarray(k)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} does not match key dim {k.shape[-1]}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    return softmax(scale * (q @ np.swapaxes(k, -1, -2)), axis=-1)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Scaled dot-product attention over the last two axes."""
    k, v = np.asarray(k), np.asarray(v)
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    return attention_probs(q, k, scale) @ v


class Controller:
    """Hook callbacks invoked by a denoiser at every hooked layer.

    The base class is a no-op; subclasses override what they substitute.
    Frames are batched on the leading axis of every array.
    """

    def wants(self, address: LayerAddress) -> bool:
        """Whether callbacks at ``address`` may change anything; backends may skip the others."""
        return True

    def residual(self, address: LayerAddress, features: np.ndarray) -> np.ndarray:
        return features

    def self_attention_kv(self, address: LayerAddress, queries, keys, values):
        return keys, values

    def attention_probs(self, address: LayerAddress, kind: AttentionKind, probs: np.ndarray) -> np.ndarray:
        return probs


class Denoiser(abc.ABC):
    """A text-conditioned latent noise predictor with an image autoencoder."""

    backend_id: str = "abstract"

    @property
    @abc.abstractmethod
    def layers(self) -> tuple[LayerAddress, ...]:
        """Every hookable layer in forward order."""

    @property
    def decoder_layers(self) -> tuple[LayerAddress, ...]:
        return tuple(a for a in self.layers if a.stage is Stage.DECODER)

    def attention_layers(self) -> frozenset[LayerAddress]:
        return frozenset(self.layers)

    def resolve_layers(self, spec: str | Iterable) -> frozenset[LayerAddress]:
        """Turn ``"decoder"``, ``"all"`` or an iterable of addresses / decoder ordinals into addresses."""
        if isinstance(spec, str):
            if spec == "decoder":
                return frozenset(self.decoder_layers)
            if spec == "all":
                return frozenset(self.layers)
            raise ConfigurationError(f"unknown layer set {spec!r}; expected 'decoder', 'all' or a list")
        by_ordinal = {a.index: a for a in self.decoder_layers}
        known = set(self.layers)
        out = set()
        for item in spec:
            if isinstance(item, LayerAddress):
                if item not in known:
                    raise ConfigurationError(f"unknown layer address {item}")
                out.add(item)
            elif int(item) in by_ordinal:
                out.add(by_ordinal[int(item)])
            else:
                raise ConfigurationError(f"unknown decoder layer ordinal {item}")
        return frozenset(out)

    @abc.abstractmethod
    def encode_prompt(self, text: str) -> PromptEmbedding: ...

    @abc.abstractmethod
    def null_prompt(self) -> PromptEmbedding:
        """Embedding used for the unconditional branch of guidance."""

    @abc.abstractmethod
    def predict_noise(
        self,
        latents,
        prompt: PromptEmbedding,
        t: int,
        controller: Controller | None = None,
        capture: Iterable[LayerAddress] | str | None = None,
        step_index: int = 0,
    ) -> tuple[np.ndarray, StepCapture]: ...

    @abc.abstractmethod
    def encode_frames(self, frames: np.ndarray) -> np.ndarray:
        """``(frames, height, width, 3)`` floats in [0, 1] to latents ``(frames, C, h, w)``."""

    @abc.abstractmethod
    def decode_latents(self, latents: np.ndarray) -> np.ndarray: ...


def word_spans_from_pieces(pieces: Sequence[Sequence[int]], offset: int = 1) -> dict[int, range]:
    """Consecutive token ranges for per-word token lists, starting after ``offset`` leading tokens."""
    spans, pos = {}, offset
    for i, ids in enumerate(pieces):
        spans[i] = range(pos, pos + len(ids))
        pos += len(ids)
    return spans
