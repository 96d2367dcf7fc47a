"""End-to-end editing: invert under the source prompt, then denoise source and
edit passes in lockstep, steering the edit pass with the injection plan."""

from __future__ import annotations

import dataclasses
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .denoiser import Controller, Denoiser, LayerAddress, StepCapture, make_backend
from .denoiser.base import AttentionKind, Stage
from .errors import ConfigurationError, EditError, NumericError
from .fusion import (
    BASE_RESOLUTION,
    MaskSet,
    TokenAlignment,
    align_tokens,
    build_masks,
    fuse_cross_attention,
    fuse_self_attention,
)
from .injection import Action, FeatureMode, InjectionPlan, compile_plan, inject_features
from .io import save_capture
from .scheduler import NoiseSchedule, cfg_combine, ddim_invert_step, ddim_step
from .temporal import KeyFramePolicy

log = logging.getLogger(__name__)

BACKENDS = ("toy", "pretrained-ldm")


@dataclass
class EditConfig:
    """All run settings. Defaults are the reference configuration."""

    num_steps: int = 50
    guidance_scale: float = 7.5
    s1: int = 6
    s2: int = 12
    l_max: int = 6
    mask_threshold: float = 0.3
    feature_mode: str = FeatureMode.REPLACE_WITH_DIFFERENCE.value
    key_frame_policy: str = KeyFramePolicy.PREVIOUS.value
    seed: int = 1234
    backend: str = "toy"
    model_path: str | None = None
    spill_dir: str | None = None
    capture_layers: Any = "decoder"
    blend_words: list | None = None
    renormalize_fused_rows: bool = True
    feature_inject: bool = True
    kv_inject: bool = True
    self_fusion: bool = True
    cross_fusion: bool = True
    inversion_guidance: float = 1.0
    inversion_refine_iters: int = 0
    mask_resolution: int = BASE_RESOLUTION
    save_masks: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_steps < 1:
            raise ConfigurationError(f"num_steps must be positive, got {self.num_steps}")
        if self.guidance_scale < 0 or self.inversion_guidance < 0:
            raise ConfigurationError("guidance scales must be non-negative")
        if not 0 < self.mask_threshold < 1:
            raise ConfigurationError(f"mask_threshold must lie in (0, 1), got {self.mask_threshold}")
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.inversion_refine_iters < 0:
            raise ConfigurationError("inversion_refine_iters must be non-negative")
        try:
            FeatureMode(self.feature_mode)
        except ValueError:
            raise ConfigurationError(f"unknown feature_mode {self.feature_mode!r}") from None
        try:
            KeyFramePolicy(self.key_frame_policy)
        except ValueError:
            raise ConfigurationError(f"unknown key_frame_policy {self.key_frame_policy!r}") from None
        if self.blend_words is not None:
            self.blend_words = [tuple(p) for p in self.blend_words]
            if any(len(p) != 2 for p in self.blend_words):
                raise ConfigurationError("blend_words entries must be (source words, edit words) pairs")
        compile_plan(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any] | None, **overrides) -> "EditConfig":
        """Defaults, then ``values``, then non-None ``overrides``; unknown keys are rejected."""
        known = {f.name for f in dataclasses.fields(cls)}
        merged = dict(values or {})
        merged.update({k: v for k, v in overrides.items() if v is not None})
        for key in merged:
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
        return cls(**merged)

    @classmethod
    def from_file(cls, path: str | Path | None, **overrides) -> "EditConfig":
        values = {}
        if path is not None:
            values = yaml.safe_load(Path(path).read_text()) or {}
            if not isinstance(values, dict):
                raise ConfigurationError(f"{path}: config must be a mapping")
        return cls.from_mapping(values, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.scaled_linear(self.num_steps)


@dataclass
class EditRequest:
    frames: np.ndarray
    source_prompt: str
    edit_prompt: str
    config: EditConfig = field(default_factory=EditConfig)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or len(self.frames) < 1:
            raise ValueError(f"frames must be a non-empty (frames, height, width, 3) array, got {self.frames.shape}")
        if not self.source_prompt.strip() or not self.edit_prompt.strip():
            raise ValueError("prompts must be non-empty")


@dataclass
class EditResult:
    frames: np.ndarray
    source_frames: np.ndarray
    per_step_masks: list[MaskSet | None] | None
    provenance: dict
    trajectories: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    alignment: TokenAlignment | None = None


def get_backend(config: EditConfig, backend: Denoiser | None = None) -> Denoiser:
    if backend is not None:
        return backend
    return make_backend(config.backend, config.model_path, key_frame_policy=config.key_frame_policy, seed=config.seed)


def encode_frames(frames: np.ndarray, backend: Denoiser) -> np.ndarray:
    return backend.encode_frames(frames)


def decode_latents(latents: np.ndarray, backend: Denoiser) -> np.ndarray:
    return backend.decode_latents(latents)


def _check_finite(x, step):
    if not np.isfinite(x).all():
        raise NumericError("non-finite latents", step=step)


def _guided(backend, x, prompt, null, t, w, **kw):
    eps_c, cap = backend.predict_noise(x, prompt, t, **kw)
    if w == 1.0:
        return eps_c, cap
    eps_u, _ = backend.predict_noise(x, null, t)
    return cfg_combine(eps_u, eps_c, w), cap


def invert_latents(latents, source_prompt, config: EditConfig, backend: Denoiser) -> np.ndarray:
    """DDIM inversion of clean latents. Returns ``(T + 1, frames, C, h, w)``; index 0 is clean, -1 is ``z_T``.

    With ``inversion_refine_iters > 0`` each step re-evaluates the noise at its
    own output (fixed-point refinement), which tightens the round trip.
    """
    schedule = config.schedule()
    prompt = backend.encode_prompt(source_prompt) if isinstance(source_prompt, str) else source_prompt
    null = backend.null_prompt()
    x = np.asarray(latents, dtype=np.float64)
    traj = [x]
    prev = -1
    for i, t in enumerate(schedule.inference_steps[::-1]):
        t = int(t)
        eps, _ = _guided(backend, x, prompt, null, t, config.inversion_guidance)
        nxt = ddim_invert_step(x, eps, prev, t, schedule)
        for _ in range(config.inversion_refine_iters):
            eps, _ = _guided(backend, nxt, prompt, null, t, config.inversion_guidance)
            nxt = ddim_invert_step(x, eps, prev, t, schedule)
        _check_finite(nxt, i)
        x, prev = nxt, t
        traj.append(x)
    return np.stack(traj)


def invert_video(frames, source_prompt: str, config: EditConfig | None = None, backend: Denoiser | None = None) -> np.ndarray:
    config = config or EditConfig()
    backend = get_backend(config, backend)
    return invert_latents(backend.encode_frames(frames), source_prompt, config, backend)


def sample(z_t, prompt, config: EditConfig, backend: Denoiser, guidance: float | None = None) -> np.ndarray:
    """Plain guided DDIM sampling from ``z_T``; returns the trajectory ``(T + 1, ...)`` ending at the clean latent."""
    schedule = config.schedule()
    prompt = backend.encode_prompt(prompt) if isinstance(prompt, str) else prompt
    null = backend.null_prompt()
    w = config.guidance_scale if guidance is None else guidance
    x = np.asarray(z_t, dtype=np.float64)
    traj = [x]
    for i, t in enumerate(schedule.inference_steps):
        eps, _ = _guided(backend, x, prompt, null, int(t), w)
        x = ddim_step(x, eps, int(t), schedule.previous_step(i), schedule)
        _check_finite(x, i)
        traj.append(x)
    return np.stack(traj)


@contextmanager
def _at_layer(address):
    try:
        yield
    except EditError as exc:
        if exc.layer is None:
            exc.layer = str(address)
        raise
    except (ValueError, KeyError) as exc:
        raise EditError(str(exc), layer=str(address)) from exc


class EditController(Controller):
    """Applies one step's directives to the edit pass using the same step's source capture."""

    def __init__(
        self,
        plan: InjectionPlan,
        step: int,
        source: StepCapture,
        hooked: frozenset[LayerAddress],
        alignment: TokenAlignment | None = None,
        masks: MaskSet | None = None,
        renormalize: bool = True,
    ):
        self.plan, self.step, self.source, self.hooked = plan, step, source, hooked
        self.alignment, self.masks, self.renormalize = alignment, masks, renormalize
        self.applied: dict[str, int] = {a.value: 0 for a in Action}

    def wants(self, address):
        return address in self.hooked

    def _directive(self, address):
        layer = address.index if address.stage is Stage.DECODER else None
        return self.plan.directive(self.step, layer)

    def residual(self, address, features):
        if address not in self.hooked:
            return features
        d = self._directive(address)
        if d.action is not Action.FEATURE_INJECT:
            return features
        with _at_layer(address):
            if address not in self.source.residual_features:
                raise ConfigurationError(f"layer {address} not captured from the source pass")
            self.applied[d.action.value] += 1
            return inject_features(self.source.residual_features[address], features, d.parameters["mode"])

    def self_attention_kv(self, address, queries, keys, values):
        if address not in self.hooked or self._directive(address).action is not Action.KV_INJECT:
            return keys, values
        with _at_layer(address):
            src = self.source.record(address, AttentionKind.SELF)
            if src.keys.shape != keys.shape:
                raise ValueError(f"source keys {src.keys.shape} do not match edit keys {keys.shape}")
            self.applied[Action.KV_INJECT.value] += 1
            return src.keys, src.values

    def attention_probs(self, address, kind, probs):
        if address not in self.hooked:
            return probs
        d = self._directive(address)
        if d.action is not Action.FUSE:
            return probs
        with _at_layer(address):
            src = self.source.record(address, kind)
            if kind is AttentionKind.SELF and d.parameters["self"] and self.masks is not None:
                m_src, m_edit = self.masks.at(address.resolution)
                self.applied[Action.FUSE.value] += 1
                return fuse_self_attention(src.probs, probs, m_src, m_edit, self.renormalize)
            if kind is AttentionKind.CROSS and d.parameters["cross"] and self.alignment is not None:
                self.applied[Action.FUSE.value] += 1
                return fuse_cross_attention(src.probs, probs, self.alignment)
        return probs


def edit_video(request: EditRequest, backend: Denoiser | None = None, run_id: str = "run") -> EditResult:
    """Edit a clip.

    Per sampling iteration: the source pass runs from its own latent under the
    source prompt and is captured; if the step fuses self-attention, a probe of
    the edit pass yields that step's edit cross-attention for the masks; the
    controlled edit pass then runs with guidance.
    """
    cfg = request.config
    backend = get_backend(cfg, backend)
    schedule = cfg.schedule()
    plan = compile_plan(cfg)

    latents = backend.encode_frames(request.frames)
    inversion = invert_latents(latents, request.source_prompt, cfg, backend)
    z_t = inversion[-1]

    src_prompt = backend.encode_prompt(request.source_prompt)
    edit_prompt = backend.encode_prompt(request.edit_prompt)
    null = backend.null_prompt()
    alignment = align_tokens(src_prompt, edit_prompt, cfg.blend_words)
    hooked = backend.resolve_layers(cfg.capture_layers)

    x = y = z_t
    src_traj, edit_traj, masks_log = [x], [y], []
    applied = {a.value: 0 for a in Action}
    for i, t in enumerate(schedule.inference_steps):
        t, t_prev = int(t), schedule.previous_step(i)
        try:
            eps_src, cap_src = _guided(backend, x, src_prompt, null, t, cfg.inversion_guidance, capture=hooked, step_index=i)
            if cfg.spill_dir:
                save_capture(Path(cfg.spill_dir) / run_id / f"step_{i:03d}.npz", cap_src)

            masks = None
            if plan.phase(i) == "fuse" and cfg.self_fusion:
                if alignment.edited_edit_tokens:
                    _, probe = backend.predict_noise(y, edit_prompt, t, capture=hooked, step_index=i)
                    masks = build_masks(
                        cap_src.records(AttentionKind.CROSS),
                        probe.records(AttentionKind.CROSS),
                        alignment,
                        cfg.mask_threshold,
                        cfg.mask_resolution,
                        i,
                    )
                else:
                    masks = _empty_masks(cap_src, cfg, alignment)
            if cfg.save_masks:
                masks_log.append(masks)

            ctrl = EditController(plan, i, cap_src, hooked, alignment, masks, cfg.renormalize_fused_rows)
            eps_edit, _ = _guided(backend, y, edit_prompt, null, t, cfg.guidance_scale, controller=ctrl, step_index=i)
            for k, v in ctrl.applied.items():
                applied[k] += v

            x = ddim_step(x, eps_src, t, t_prev, schedule)
            y = ddim_step(y, eps_edit, t, t_prev, schedule)
            _check_finite(y, i)
        except EditError as exc:
            if exc.step is None:
                exc.step = i
            raise
        src_traj.append(x)
        edit_traj.append(y)

    log.info("directives applied: %s", applied)
    provenance = {
        "config": cfg.to_dict(),
        "backend": getattr(backend, "backend_id", type(backend).__name__),
        "seed": cfg.seed,
        "source_prompt": request.source_prompt,
        "edit_prompt": request.edit_prompt,
        "directives_applied": applied,
        "edited_tokens": {
            "source": [src_prompt.token_strings[k] for k in alignment.edited_src_tokens],
            "edit": [edit_prompt.token_strings[k] for k in alignment.edited_edit_tokens],
        },
    }
    return EditResult(
        frames=backend.decode_latents(y),
        source_frames=backend.decode_latents(x),
        per_step_masks=masks_log if cfg.save_masks else None,
        provenance=provenance,
        trajectories={"inversion": inversion, "source": np.stack(src_traj), "edit": np.stack(edit_traj)},
        alignment=alignment,
    )


def _empty_masks(cap_src, cfg, alignment) -> MaskSet:
    """Nothing is edited: both masks are empty, so fusion keeps the source maps."""
    # still require the base-resolution layer, as a non-empty edit would
    if not any(r.address.resolution == cfg.mask_resolution for r in cap_src.records(AttentionKind.CROSS)):
        raise ConfigurationError(f"no {cfg.mask_resolution}x{cfg.mask_resolution} cross-attention layer in the capture set")
    frames = next(iter(cap_src.residual_features.values())).shape[0] if cap_src.residual_features else 1
    empty = np.zeros((frames, cfg.mask_resolution, cfg.mask_resolution), dtype=np.uint8)
    return MaskSet(empty, empty.copy(), cfg.mask_threshold, list(alignment.groups))


def collect_features(
    frames,
    prompt: str,
    steps,
    layers,
    config: EditConfig | None = None,
    backend: Denoiser | None = None,
    edit_prompt: str | None = None,
) -> dict[str, dict[int, StepCapture]]:
    """Residual features of the reconstruction (and optionally an unsteered edit pass) at chosen steps.

    Both passes start from the inverted latent; the edit pass is plain guided
    sampling under ``edit_prompt`` with features read from its conditional branch.
    """
    config = config or EditConfig()
    backend = get_backend(config, backend)
    schedule = config.schedule()
    wanted = set(int(s) for s in steps)
    bad = sorted(s for s in wanted if not 0 <= s < config.num_steps)
    if bad or not wanted:
        raise ConfigurationError(f"steps must be non-empty and within [0, {config.num_steps}), got {sorted(wanted)}")
    z_t = invert_latents(backend.encode_frames(frames), prompt, config, backend)[-1]
    null = backend.null_prompt()
    passes = {"src": (backend.encode_prompt(prompt), config.inversion_guidance)}
    if edit_prompt is not None:
        passes["edit"] = (backend.encode_prompt(edit_prompt), config.guidance_scale)
    out: dict[str, dict[int, StepCapture]] = {}
    for name, (emb, w) in passes.items():
        x, caps = z_t, {}
        for i, t in enumerate(schedule.inference_steps):
            if i > max(wanted):
                break
            eps, cap = _guided(backend, x, emb, null, int(t), w, capture=layers if i in wanted else None, step_index=i)
            if i in wanted:
                caps[i] = cap
            x = ddim_step(x, eps, int(t), schedule.previous_step(i), schedule)
        out[name] = caps
    return out
