"""Adapter exposing a diffusers latent-diffusion U-Net through the denoiser hook surface.

Layer taxonomy: every U-Net resnet is one layer, paired with the transformer
block that follows it in the same U-Net block (if any). Encoder, bottleneck and
decoder ordinals count resnets in forward order, so decoder ordinal 0 is the
first resnet of the lowest-resolution up block. Residual features are the
output of each resnet's second convolution, the branch added onto the skip.

Self-attention is replaced by key-frame attention: each frame's keys and values
are its own tokens followed by the key frame's tokens.

Requires ``torch``, ``diffusers`` and ``transformers``.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigurationError, NumericError
from ..temporal import KeyFramePolicy, key_frame_indices
from .base import (
    AttentionKind,
    AttentionRecord,
    Controller,
    Denoiser,
    LayerAddress,
    PromptEmbedding,
    Stage,
    StepCapture,
    word_spans_from_pieces,
)

DEFAULT_MODEL = "runwayml/stable-diffusion-v1-5"


@dataclass
class _Slot:
    stage: Stage
    index: int
    level: int


@dataclass
class _ForwardState:
    controller: Controller | None
    wanted: frozenset
    capture: StepCapture
    key_frames: np.ndarray
    side: int


def _to_np(x: torch.Tensor) -> np.ndarray:
    return x.detach().to(torch.float64).cpu().numpy()


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.view(b, n, heads, d // heads).transpose(1, 2)


class _HookedAttnProcessor:
    """Attention processor calling the controller on keys/values and probabilities."""

    def __init__(self, owner: "LDMDenoiser", slot: _Slot, kind: AttentionKind):
        self.owner, self.slot, self.kind = owner, slot, kind

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kwargs):
        state = self.owner._state
        residual = hidden_states
        if hidden_states.ndim != 3:
            raise ValueError(f"expected token sequences, got hidden states of shape {tuple(hidden_states.shape)}")
        query = attn.to_q(hidden_states)
        if self.kind is AttentionKind.CROSS:
            context = encoder_hidden_states
        else:
            kf = torch.as_tensor(state.key_frames, device=hidden_states.device)
            context = torch.cat([hidden_states, hidden_states[kf]], dim=1)
        key, value = attn.to_k(context), attn.to_v(context)
        q, k, v = (_split_heads(x, attn.heads) for x in (query, key, value))

        address = self.owner._address(self.slot, state.side)
        controller = state.controller
        hooked = controller is not None and controller.wants(address)
        keep = address in state.wanted
        if hooked and self.kind is AttentionKind.SELF:
            nk, nv = controller.self_attention_kv(address, _to_np(q), _to_np(k), _to_np(v))
            k, v = torch.as_tensor(nk).to(q), torch.as_tensor(nv).to(q)
        # half-precision models take the softmax in float32
        work = torch.float32 if q.dtype in (torch.float16, torch.bfloat16) else q.dtype
        probs = (torch.matmul(q.to(work), k.to(work).transpose(-1, -2)) * attn.scale).softmax(dim=-1)
        if hooked:
            probs = torch.as_tensor(controller.attention_probs(address, self.kind, _to_np(probs))).to(probs)
        out = torch.matmul(probs, v.to(work))
        if keep:
            state.capture.attention.append(
                AttentionRecord(address, self.kind, _to_np(q), _to_np(k), _to_np(v), _to_np(probs), _to_np(out))
            )
        out = out.to(q.dtype).transpose(1, 2).reshape(residual.shape[0], -1, attn.heads * q.shape[-1])
        out = attn.to_out[1](attn.to_out[0](out))
        if attn.residual_connection:
            out = out + residual
        return out / attn.rescale_output_factor


class LDMDenoiser(Denoiser):
    """Pretrained text-to-image latent diffusion model behind the denoiser contract.

    Args:
        unet: ``UNet2DConditionModel``.
        vae: ``AutoencoderKL``.
        text_encoder: CLIP text model returning token embeddings as its first output.
        tokenizer: tokenizer with ``model_max_length`` and the Hugging Face call interface.
        key_frame_policy: which frame's tokens extend each frame's self-attention.
        model_id: name recorded in ``backend_id``.
    """

    def __init__(self, unet, vae, text_encoder, tokenizer, key_frame_policy="previous", model_id: str = "custom"):
        self.unet, self.vae, self.text_encoder, self.tokenizer = unet.eval(), vae.eval(), text_encoder.eval(), tokenizer
        self.key_frame_policy = KeyFramePolicy(key_frame_policy)
        self.device = next(unet.parameters()).device
        self.dtype = next(unet.parameters()).dtype
        self.vae_scale = 2 ** (len(vae.config.block_out_channels) - 1)
        self.latent_scale = float(getattr(vae.config, "scaling_factor", 0.18215))
        digest = hashlib.sha256(f"{model_id}|{self.key_frame_policy.value}".encode()).hexdigest()[:12]
        self.backend_id = f"ldm-{digest}"
        self.model_id = model_id
        self._state: _ForwardState | None = None
        self._prompt_cache: dict[str, PromptEmbedding] = {}
        self._slots: list[_Slot] = []
        self._latent_side = int(getattr(unet.config, "sample_size", 64))
        self._install_hooks()

    @classmethod
    def from_pretrained(cls, model_path: str | None = None, key_frame_policy="previous", seed: int = 1234, device=None, dtype=None):
        """Load unet/vae/text_encoder/tokenizer subfolders from a diffusers model directory or hub id."""
        from diffusers import AutoencoderKL, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer

        path = model_path or DEFAULT_MODEL
        device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        dtype = dtype or (torch.float16 if device == "cuda" else torch.float32)
        torch.manual_seed(seed)
        try:
            unet = UNet2DConditionModel.from_pretrained(path, subfolder="unet", torch_dtype=dtype)
            vae = AutoencoderKL.from_pretrained(path, subfolder="vae", torch_dtype=dtype)
            text_encoder = CLIPTextModel.from_pretrained(path, subfolder="text_encoder", torch_dtype=dtype)
            tokenizer = CLIPTokenizer.from_pretrained(path, subfolder="tokenizer")
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot load pretrained backbone from {path!r}: {exc}") from exc
        return cls(unet.to(device), vae.to(device), text_encoder.to(device), tokenizer, key_frame_policy, model_id=str(path))

    # ------------------------------------------------------------------ layout

    def _install_hooks(self):
        counters = {Stage.ENCODER: 0, Stage.BOTTLENECK: 0, Stage.DECODER: 0}

        def add(stage, level, resnet, transformer):
            slot = _Slot(stage, counters[stage], level)
            counters[stage] += 1
            self._slots.append(slot)
            resnet.conv2.register_forward_hook(self._residual_hook(slot))
            if transformer is not None:
                for block in transformer.transformer_blocks:
                    block.attn1.set_processor(_HookedAttnProcessor(self, slot, AttentionKind.SELF))
                    block.attn2.set_processor(_HookedAttnProcessor(self, slot, AttentionKind.CROSS))

        def pairs(block):
            attns = list(getattr(block, "attentions", None) or [])
            return [(r, attns[j] if j < len(attns) else None) for j, r in enumerate(block.resnets)]

        down = self.unet.down_blocks
        for level, block in enumerate(down):
            for r, a in pairs(block):
                add(Stage.ENCODER, level, r, a)
        for r, a in pairs(self.unet.mid_block):
            add(Stage.BOTTLENECK, len(down) - 1, r, a)
        for b, block in enumerate(self.unet.up_blocks):
            for r, a in pairs(block):
                add(Stage.DECODER, len(self.unet.up_blocks) - 1 - b, r, a)

    def _address(self, slot: _Slot, side: int) -> LayerAddress:
        return LayerAddress(slot.stage, slot.index, side >> slot.level)

    def layers_for(self, latent_side: int) -> tuple[LayerAddress, ...]:
        return tuple(self._address(s, latent_side) for s in self._slots)

    @property
    def layers(self) -> tuple[LayerAddress, ...]:
        return self.layers_for(self._latent_side)

    def configure(self, latent_side: int) -> "LDMDenoiser":
        """Fix the latent side used to report layer resolutions."""
        if latent_side % 2 ** (len(self.unet.down_blocks) - 1):
            raise ConfigurationError(f"latent side {latent_side} not divisible by the U-Net downsampling factor")
        self._latent_side = latent_side
        return self

    def _residual_hook(self, slot: _Slot):
        def hook(module, inputs, output):
            state = self._state
            if state is None:
                return output
            address = self._address(slot, state.side)
            hooked = state.controller is not None and state.controller.wants(address)
            keep = address in state.wanted
            if not (hooked or keep):
                return output
            n, c, h, w = output.shape
            f = _to_np(output).reshape(n, c, h * w).transpose(0, 2, 1)
            if hooked:
                f = np.asarray(state.controller.residual(address, f), dtype=np.float64)
            if keep:
                state.capture.residual_features[address] = f
            if not np.isfinite(f).all():
                raise NumericError(f"non-finite activation at layer {address}", layer=str(address))
            return torch.as_tensor(f.transpose(0, 2, 1).reshape(n, c, h, w)).to(output)

        return hook

    # --------------------------------------------------------------- text side

    def _encode_ids(self, ids: list[int]) -> np.ndarray:
        with torch.no_grad():
            out = self.text_encoder(torch.tensor([ids], device=self.device))[0]
        return _to_np(out[0])

    def encode_prompt(self, text: str) -> PromptEmbedding:
        if not text or not text.strip():
            raise ValueError("prompt must be non-empty")
        if text in self._prompt_cache:
            return self._prompt_cache[text]
        tok = self.tokenizer
        limit = tok.model_max_length
        full = tok(text, truncation=False).input_ids
        metadata = {}
        if len(full) > limit:
            warnings.warn(f"prompt truncated to {limit} tokens", stacklevel=2)
            metadata["truncated"] = True
            metadata["warning"] = f"prompt truncated from {len(full)} to {limit} tokens"
        ids = tok(text, padding="max_length", max_length=limit, truncation=True).input_ids
        pieces = [tok(w, add_special_tokens=False).input_ids for w in text.split()]
        spans = {i: range(r.start, min(r.stop, limit - 1)) for i, r in word_spans_from_pieces(pieces).items() if r.start < limit - 1}
        emb = PromptEmbedding(text, list(ids), list(tok.convert_ids_to_tokens(ids)), self._encode_ids(ids), spans, metadata)
        self._prompt_cache[text] = emb
        return emb

    def null_prompt(self) -> PromptEmbedding:
        tok = self.tokenizer
        ids = tok("", padding="max_length", max_length=tok.model_max_length, truncation=True).input_ids
        return PromptEmbedding("", list(ids), list(tok.convert_ids_to_tokens(ids)), self._encode_ids(ids), {}, {})

    # ------------------------------------------------------------- autoencoder

    def encode_frames(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"frames must be (frames, height, width, 3), got {frames.shape}")
        _, h, w, _ = frames.shape
        if h % self.vae_scale or w % self.vae_scale:
            raise ValueError(f"resolution {h}x{w} not divisible by downsampling factor {self.vae_scale}")
        x = torch.as_tensor(frames.transpose(0, 3, 1, 2) * 2 - 1, device=self.device, dtype=self.dtype)
        with torch.no_grad():
            z = self.vae.encode(x).latent_dist.mean * self.latent_scale
        return _to_np(z)

    def decode_latents(self, latents: np.ndarray) -> np.ndarray:
        z = torch.as_tensor(np.asarray(latents) / self.latent_scale, device=self.device, dtype=self.dtype)
        with torch.no_grad():
            x = self.vae.decode(z).sample
        return (_to_np(x).transpose(0, 2, 3, 1) + 1) / 2

    # ----------------------------------------------------------------- forward

    def predict_noise(self, latents, prompt, t, controller=None, capture=None, step_index=0):
        x = np.asarray(latents, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.unet.config.in_channels:
            raise ValueError(f"latents must be (frames, {self.unet.config.in_channels}, h, w), got {x.shape}")
        self.configure(x.shape[-1])
        wanted = frozenset() if capture is None else self.resolve_layers(capture)
        cap = StepCapture(step_index)
        self._state = _ForwardState(controller, wanted, cap, key_frame_indices(x.shape[0], self.key_frame_policy), x.shape[-1])
        text = torch.as_tensor(prompt.embedding, device=self.device, dtype=self.dtype)
        try:
            with torch.no_grad():
                eps = self.unet(
                    torch.as_tensor(x, device=self.device, dtype=self.dtype),
                    int(t),
                    encoder_hidden_states=text.unsqueeze(0).expand(x.shape[0], -1, -1),
                ).sample
        finally:
            self._state = None
        eps = _to_np(eps)
        if not np.isfinite(eps).all():
            raise NumericError("non-finite noise prediction")
        return eps, cap
