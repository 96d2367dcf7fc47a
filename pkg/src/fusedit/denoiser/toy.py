"""Deterministic seeded toy backend with the same hook surface as the pretrained adapter.

Layout (latent side ``S``, tokens after a 2x2 patch embedding):

    encoder.00 @S/2 -> down -> encoder.01 @S/4 -> bottleneck.00 @S/4
    -> decoder.00..05 @S/4 -> up (+skip) -> decoder.06..11 @S/2

Every layer is residual block + (key-frame) self-attention + cross-attention,
so decoder ordinals below 6 are exactly the lowest-resolution ("coarse") layers.
The captured residual feature of a layer is its residual branch output, the
tensor added onto the stream.
"""

from __future__ import annotations

import hashlib
import re
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, NumericError
from ..temporal import KeyFramePolicy, key_frame_indices, with_key_frame
from .base import (
    AttentionKind,
    AttentionRecord,
    Denoiser,
    LayerAddress,
    PromptEmbedding,
    Stage,
    StepCapture,
    word_spans_from_pieces,
)

PAD, BOS, EOS = 0, 1, 2
_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class ToyConfig:
    latent_channels: int = 12
    hidden: int = 32
    heads: int = 2
    text_dim: int = 32
    vocab_size: int = 4096
    max_tokens: int = 77
    piece_len: int = 6
    num_decoder_layers: int = 12
    image_factor: int = 2
    seed: int = 1234
    # branch gains; small input/output gains keep eps smooth in the latent.
    # A small output gain keeps the guided edit pass close to the unguided
    # source pass, so an edit with identical prompts stays near the reconstruction.
    input_gain: float = 0.3
    residual_gain: float = 0.5
    attention_gain: float = 1.0
    cross_gain: float = 0.3
    output_gain: float = 0.00025
    # logit multipliers; larger values give more spatially selective attention maps
    self_sharpness: float = 16.0
    cross_sharpness: float = 12.0


def _sinusoid(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _softmax_jvp(p, ds):
    return p * (ds - np.sum(p * ds, axis=-1, keepdims=True))


class _Layer:
    def __init__(self, rng: np.random.Generator, d: int, e: int):
        def w(n_in, n_out):
            return rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)

        self.w1, self.w2, self.wt = w(d, d), w(d, d), w(d, d)
        self.wq, self.wk, self.wv, self.wo = w(d, d), w(d, d), w(d, d), w(d, d)
        self.cq, self.ck, self.cv, self.co = w(d, d), w(e, d), w(e, d), w(d, d)


class ToyDenoiser(Denoiser):
    """Small numpy U-Net. ``predict_noise`` is a pure function of its inputs and the seed."""

    backend_id = "toy"

    def __init__(self, config: ToyConfig | None = None, key_frame_policy: KeyFramePolicy | str = "previous"):
        self.config = cfg = config or ToyConfig()
        self.key_frame_policy = KeyFramePolicy(key_frame_policy)
        if cfg.hidden % cfg.heads:
            raise ConfigurationError("hidden size must be divisible by heads")
        if cfg.num_decoder_layers % 2:
            raise ConfigurationError("num_decoder_layers must be even")
        rng = np.random.default_rng(cfg.seed)
        d, e, c = cfg.hidden, cfg.text_dim, cfg.latent_channels
        self.w_in = rng.standard_normal((4 * c, d)) / np.sqrt(4 * c)
        self.w_out = rng.standard_normal((d, 4 * c)) / np.sqrt(d)
        self.w_time = rng.standard_normal((d, d)) / np.sqrt(d)
        self.text_table = rng.standard_normal((cfg.vocab_size, e))
        self._pos_rng_seed = int(rng.integers(2**31))
        self._pos_cache: dict[int, np.ndarray] = {}
        n = 2 + 1 + cfg.num_decoder_layers
        self._params = [_Layer(rng, d, e) for _ in range(n)]
        digest = hashlib.sha256(repr((cfg, self.key_frame_policy.value)).encode()).hexdigest()[:12]
        self.backend_id = f"toy-{digest}"

    # ------------------------------------------------------------------ layout

    def layers_for(self, latent_side: int) -> tuple[LayerAddress, ...]:
        hi, lo = latent_side // 2, latent_side // 4
        half = self.config.num_decoder_layers // 2
        out = [LayerAddress(Stage.ENCODER, 0, hi), LayerAddress(Stage.ENCODER, 1, lo), LayerAddress(Stage.BOTTLENECK, 0, lo)]
        out += [LayerAddress(Stage.DECODER, i, lo) for i in range(half)]
        out += [LayerAddress(Stage.DECODER, i, hi) for i in range(half, 2 * half)]
        return tuple(out)

    _latent_side = 32

    @property
    def layers(self) -> tuple[LayerAddress, ...]:
        return self.layers_for(self._latent_side)

    def configure(self, latent_side: int) -> "ToyDenoiser":
        """Fix the latent side used to report layer resolutions."""
        if latent_side % 4:
            raise ConfigurationError(f"toy backend needs latent side divisible by 4, got {latent_side}")
        self._latent_side = latent_side
        return self

    # --------------------------------------------------------------- text side

    def tokenize_word(self, word: str) -> list[str]:
        """Fixed-length character chunks, so long words span several tokens."""
        word = _normalize(word)
        n = self.config.piece_len
        return [word[i : i + n] for i in range(0, len(word), n)] or [word]

    def _token_id(self, piece: str) -> int:
        return 3 + zlib.crc32(piece.encode()) % (self.config.vocab_size - 3)

    def encode_prompt(self, text: str) -> PromptEmbedding:
        if not text or not text.strip():
            raise ValueError("prompt must be non-empty")
        strings = [self.tokenize_word(w) for w in text.split()]
        pieces = [[self._token_id(ch) for ch in ss] for ss in strings]
        tokens = [BOS] + [tok for p in pieces for tok in p] + [EOS]
        token_strings = ["<bos>"] + [s for ss in strings for s in ss] + ["<eos>"]
        spans = word_spans_from_pieces(pieces)
        metadata = {}
        limit = self.config.max_tokens
        if len(tokens) > limit:
            warnings.warn(f"prompt truncated to {limit} tokens", stacklevel=2)
            metadata["truncated"] = True
            metadata["warning"] = f"prompt truncated from {len(tokens)} to {limit} tokens"
            tokens = tokens[: limit - 1] + [EOS]
            token_strings = token_strings[: limit - 1] + ["<eos>"]
            spans = {i: range(r.start, min(r.stop, limit - 1)) for i, r in spans.items() if r.start < limit - 1}
        return PromptEmbedding(text, tokens, token_strings, self.text_table[tokens], spans, metadata)

    def null_prompt(self) -> PromptEmbedding:
        tokens = [BOS, EOS]
        return PromptEmbedding("", tokens, ["<bos>", "<eos>"], self.text_table[tokens], {}, {})

    # ------------------------------------------------------------- autoencoder

    def encode_frames(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"frames must be (frames, height, width, 3), got {frames.shape}")
        f = self.config.image_factor
        n, h, w, _ = frames.shape
        if h % f or w % f:
            raise ValueError(f"resolution {h}x{w} not divisible by downsampling factor {f}")
        x = frames.reshape(n, h // f, f, w // f, f, 3).transpose(0, 5, 2, 4, 1, 3)
        return x.reshape(n, 3 * f * f, h // f, w // f)

    def decode_latents(self, latents: np.ndarray) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float64)
        f = self.config.image_factor
        n, c, h, w = latents.shape
        if c != 3 * f * f:
            raise ValueError(f"expected {3 * f * f} latent channels, got {c}")
        x = latents.reshape(n, 3, f, f, h, w).transpose(0, 4, 2, 5, 3, 1)
        return x.reshape(n, h * f, w * f, 3)

    # ----------------------------------------------------------------- forward

    def _positions(self, side: int) -> np.ndarray:
        if side not in self._pos_cache:
            rng = np.random.default_rng(self._pos_rng_seed + side)
            self._pos_cache[side] = rng.standard_normal((side * side, self.config.hidden))
        return self._pos_cache[side]

    def predict_noise(self, latents, prompt, t, controller=None, capture=None, step_index=0):
        x = np.asarray(getattr(latents, "data", latents), dtype=np.float64)
        self._check_latents(x)
        self.configure(x.shape[-1])
        wanted = frozenset() if capture is None else self.resolve_layers(capture)
        eps, _, cap = self._forward(x, prompt, t, controller, wanted, step_index)
        return eps, cap

    def jvp(self, latents, prompt, t, direction):
        """Exact directional derivative of ``predict_noise`` (no controller) along ``direction``."""
        x = np.asarray(latents, dtype=np.float64)
        self._check_latents(x)
        self.configure(x.shape[-1])
        eps, deps, _ = self._forward(x, prompt, t, None, frozenset(), 0, np.asarray(direction, dtype=np.float64))
        return eps, deps

    def _check_latents(self, x):
        c = self.config.latent_channels
        if x.ndim != 4 or x.shape[1] != c or x.shape[2] != x.shape[3] or x.shape[2] % 4:
            raise ValueError(f"toy latents must be (frames, {c}, S, S) with S divisible by 4, got {x.shape}")

    def _forward(self, x, prompt, t, controller, wanted, step_index, dx=None):
        cfg = self.config
        n, c, s, _ = x.shape
        addrs = self.layers_for(s)
        cap = StepCapture(step_index)
        kf = key_frame_indices(n, self.key_frame_policy)
        text = np.asarray(prompt.embedding, dtype=np.float64)
        temb = np.tanh(_sinusoid(float(t), cfg.hidden) @ self.w_time)

        h = cfg.input_gain * (_patchify(x) @ self.w_in) + self._positions(s // 2)
        dh = None if dx is None else cfg.input_gain * (_patchify(dx) @ self.w_in)

        run = self._make_runner(controller, wanted, cap, kf, text, temb)
        h, dh = run(0, addrs[0], h, dh)
        skip, dskip = h, dh
        h, dh = _pool(h, s // 2), (None if dh is None else _pool(dh, s // 2))
        h, dh = run(1, addrs[1], h, dh)
        skip_lo, dskip_lo = h, dh
        h, dh = run(2, addrs[2], h, dh)
        h = h + skip_lo
        dh = None if dh is None else dh + dskip_lo
        half = cfg.num_decoder_layers // 2
        for i in range(cfg.num_decoder_layers):
            if i == half:
                h = _upsample(h, s // 4) + skip
                dh = None if dh is None else _upsample(dh, s // 4) + dskip
            h, dh = run(3 + i, addrs[3 + i], h, dh)

        n, dn = _rms(h, dh)
        eps = cfg.output_gain * _unpatchify(n @ self.w_out, s)
        deps = None if dn is None else cfg.output_gain * _unpatchify(dn @ self.w_out, s)
        return eps, deps, cap

    def _make_runner(self, controller, wanted, cap, kf, text, temb):
        cfg = self.config
        heads = cfg.heads

        def run(idx, address, h, dh):
            p = self._params[idx]
            hooked = controller is not None
            keep = address in wanted

            n, dn = _rms(h, dh)
            u = np.tanh(n @ p.w1 + temb @ p.wt)
            f = cfg.residual_gain * (u @ p.w2)
            df = None if dh is None else cfg.residual_gain * (((1 - u * u) * (dn @ p.w1)) @ p.w2)
            if hooked:
                f = controller.residual(address, f)
            if keep:
                cap.residual_features[address] = f
            h = h + f
            dh = None if dh is None else dh + df
            _check_finite(h, address)

            # self-attention over [own frame; key frame]
            n, dn = _rms(h, dh)
            ctx = with_key_frame(n, kf)
            q, k, v = _heads(n @ p.wq, heads), _heads(ctx @ p.wk, heads), _heads(ctx @ p.wv, heads)
            if hooked:
                k, v = controller.self_attention_kv(address, q, k, v)
            scale = 1.0 / np.sqrt(q.shape[-1])
            sscale = scale * cfg.self_sharpness
            probs = _softmax(sscale * (q @ np.swapaxes(k, -1, -2)))
            if hooked:
                probs = controller.attention_probs(address, AttentionKind.SELF, probs)
            out = probs @ v
            if keep:
                cap.attention.append(AttentionRecord(address, AttentionKind.SELF, q, k, v, probs, out))
            if dh is not None:
                dctx = with_key_frame(dn, kf)
                dq, dk, dv = _heads(dn @ p.wq, heads), _heads(dctx @ p.wk, heads), _heads(dctx @ p.wv, heads)
                ds = sscale * (dq @ np.swapaxes(k, -1, -2) + q @ np.swapaxes(dk, -1, -2))
                dout = _softmax_jvp(probs, ds) @ v + probs @ dv
                dh = dh + cfg.attention_gain * (_merge(dout) @ p.wo)
            h = h + cfg.attention_gain * (_merge(out) @ p.wo)
            _check_finite(h, address)

            # cross-attention to the prompt tokens
            n, dn = _rms(h, dh)
            q = _heads(n @ p.cq, heads)
            cscale = scale * cfg.cross_sharpness
            k = np.broadcast_to(_heads(text @ p.ck, heads), (h.shape[0], heads, text.shape[0], q.shape[-1]))
            v = np.broadcast_to(_heads(text @ p.cv, heads), k.shape)
            probs = _softmax(cscale * (q @ np.swapaxes(k, -1, -2)))
            if hooked:
                probs = controller.attention_probs(address, AttentionKind.CROSS, probs)
            out = probs @ v
            if keep:
                cap.attention.append(AttentionRecord(address, AttentionKind.CROSS, q, k, v, probs, out))
            if dh is not None:
                ds = cscale * (_heads(dn @ p.cq, heads) @ np.swapaxes(k, -1, -2))
                dh = dh + cfg.cross_gain * (_merge(_softmax_jvp(probs, ds) @ v) @ p.co)
            h = h + cfg.cross_gain * (_merge(out) @ p.co)
            _check_finite(h, address)
            return h, dh

        return run


def _normalize(word: str) -> str:
    return "".join(_WORD_RE.findall(word.lower())) or word.lower()


def _check_finite(h, address):
    if not np.isfinite(h).all():
        raise NumericError(f"non-finite activation at layer {address}", layer=str(address))


def _softmax(s):
    # s is a fresh temporary; work in place
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _rms(h, dh=None):
    """Per-token RMS normalization and its tangent."""
    r = np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + 1e-6)
    n = h / r
    if dh is None:
        return n, None
    return n, dh / r - n * np.mean(n * dh, axis=-1, keepdims=True) / r


def _heads(x, heads):
    *lead, n, d = x.shape
    return np.moveaxis(x.reshape(*lead, n, heads, d // heads), -2, -3)


def _merge(x):
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*x.shape[:-2], -1)


def _patchify(x):
    n, c, s, _ = x.shape
    x = x.reshape(n, c, s // 2, 2, s // 2, 2).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, (s // 2) ** 2, c * 4)


def _unpatchify(tokens, s):
    n = tokens.shape[0]
    c = tokens.shape[-1] // 4
    x = tokens.reshape(n, s // 2, s // 2, c, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(n, c, s, s)


def _pool(h, side):
    n, _, d = h.shape
    g = h.reshape(n, side // 2, 2, side // 2, 2, d)
    return g.mean(axis=(2, 4)).reshape(n, (side // 2) ** 2, d)


def _upsample(h, side):
    n, _, d = h.shape
    g = h.reshape(n, side, side, d)
    g = g.repeat(2, axis=1).repeat(2, axis=2)
    return g.reshape(n, 4 * side * side, d)
