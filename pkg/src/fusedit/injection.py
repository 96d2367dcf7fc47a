"""Inject phase: the (step, layer) schedule, differential feature injection and K/V substitution.

Step indices count sampling iterations from the noisy end (iteration 0 starts at
the inverted latent). Windows are half-open: feature injection on ``[0, s1)``
for decoder ordinals ``< l_max``, K/V injection on ``[s1, s2)`` for every
attention layer, fusion on ``[s2, total_steps)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

import numpy as np

from .denoiser.base import AttentionKind, AttentionRecord, attention_probs
from .errors import ConfigurationError, ContractViolation


class FeatureMode(str, Enum):
    REPLACE_WITH_DIFFERENCE = "replace_with_difference"
    ADD_DIFFERENCE = "add_difference"
    REPLACE_WITH_SOURCE = "replace_with_source"


class Action(str, Enum):
    FEATURE_INJECT = "feature_inject"
    KV_INJECT = "kv_inject"
    FUSE = "fuse"
    NONE = "none"


@dataclass(frozen=True)
class ControlDirective:
    action: Action
    parameters: Mapping[str, Any] = field(default_factory=dict)


NONE = ControlDirective(Action.NONE)


@dataclass(frozen=True)
class InjectionPlan:
    total_steps: int = 50
    s1: int = 6
    s2: int = 12
    l_max: int = 6
    feature_mode: FeatureMode = FeatureMode.REPLACE_WITH_DIFFERENCE
    feature_inject: bool = True
    kv_inject: bool = True
    self_fusion: bool = True
    cross_fusion: bool = True

    def __post_init__(self):
        object.__setattr__(self, "feature_mode", FeatureMode(self.feature_mode))
        if not 0 <= self.s1 <= self.s2 <= self.total_steps:
            raise ConfigurationError(
                f"need 0 <= s1 <= s2 <= total_steps, got s1={self.s1}, s2={self.s2}, total_steps={self.total_steps}"
            )
        if self.l_max < 0:
            raise ConfigurationError(f"l_max must be non-negative, got {self.l_max}")

    def phase(self, step: int) -> str:
        if not 0 <= step < self.total_steps:
            raise IndexError(f"step {step} outside [0, {self.total_steps})")
        if step < self.s1:
            return "feature"
        if step < self.s2:
            return "kv"
        return "fuse"

    def directive(self, step: int, layer: int | None, has_attention: bool = True) -> ControlDirective:
        """Directive for sampling iteration ``step`` at decoder ordinal ``layer``.

        ``layer=None`` stands for a hooked layer outside the decoder, which can
        receive K/V injection and fusion but never feature injection.
        """
        phase = self.phase(step)
        if phase == "feature":
            if self.feature_inject and layer is not None and layer < self.l_max:
                return ControlDirective(Action.FEATURE_INJECT, {"mode": self.feature_mode})
            return NONE
        if not has_attention:
            return NONE
        if phase == "kv":
            return ControlDirective(Action.KV_INJECT) if self.kv_inject else NONE
        if self.self_fusion or self.cross_fusion:
            return ControlDirective(Action.FUSE, {"self": self.self_fusion, "cross": self.cross_fusion})
        return NONE


def _get(config, key, default=None):
    if isinstance(config, Mapping):
        return config.get(key, default)
    return getattr(config, key, default)


def compile_plan(config) -> InjectionPlan:
    """Build the plan from a mapping or an object carrying the schedule keys.

    ``num_steps`` (or ``total_steps``), ``s1``, ``s2`` and ``l_max`` are read,
    plus the optional ``feature_mode`` and the per-controller enable flags.
    """
    total = _get(config, "num_steps", _get(config, "total_steps"))
    missing = [k for k, v in (("num_steps", total), ("s1", _get(config, "s1")), ("s2", _get(config, "s2")), ("l_max", _get(config, "l_max"))) if v is None]
    if missing:
        raise ConfigurationError(f"missing plan keys: {', '.join(missing)}")
    return InjectionPlan(
        total_steps=int(total),
        s1=int(_get(config, "s1")),
        s2=int(_get(config, "s2")),
        l_max=int(_get(config, "l_max")),
        feature_mode=_get(config, "feature_mode", FeatureMode.REPLACE_WITH_DIFFERENCE),
        feature_inject=bool(_get(config, "feature_inject", True)),
        kv_inject=bool(_get(config, "kv_inject", True)),
        self_fusion=bool(_get(config, "self_fusion", True)),
        cross_fusion=bool(_get(config, "cross_fusion", True)),
    )


def inject_features(f_src, f_edit, mode: FeatureMode | str = FeatureMode.REPLACE_WITH_DIFFERENCE) -> np.ndarray:
    """Feature substituted for the edit pass's residual output."""
    f_src, f_edit = np.asarray(f_src), np.asarray(f_edit)
    if f_src.shape != f_edit.shape:
        raise ValueError(f"feature shapes differ: {f_src.shape} vs {f_edit.shape}")
    mode = FeatureMode(mode)
    if mode is FeatureMode.REPLACE_WITH_DIFFERENCE:
        return f_src - f_edit
    # f_edit + (f_src - f_edit) is f_src algebraically; return it exactly
    return f_src.copy()


def inject_kv(source_record: AttentionRecord, edit_record: AttentionRecord) -> AttentionRecord:
    """Edit-pass self-attention record with the source pass's keys and values."""
    for rec in (source_record, edit_record):
        if rec.kind is not AttentionKind.SELF:
            raise ContractViolation("key/value injection applies to self-attention only", layer=str(rec.address))
    if source_record.address != edit_record.address:
        raise ContractViolation(f"layer mismatch: {source_record.address} vs {edit_record.address}")
    if source_record.keys.shape != edit_record.keys.shape or source_record.values.shape != edit_record.values.shape:
        raise ValueError(f"token counts differ: {source_record.keys.shape} vs {edit_record.keys.shape}")
    probs = attention_probs(edit_record.queries, source_record.keys)
    return dataclasses.replace(
        edit_record,
        keys=source_record.keys,
        values=source_record.values,
        probs=probs,
        output=probs @ source_record.values,
    )
