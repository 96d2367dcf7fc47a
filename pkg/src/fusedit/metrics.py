"""Image-text embedding metrics: consecutive-frame consistency and per-frame edit accuracy."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import EmbeddingError, UndefinedMetricError

DEFAULT_CLIP_MODEL = "openai/clip-vit-large-patch14"


class Embedder(Protocol):
    model_id: str

    def embed_images(self, frames: np.ndarray) -> np.ndarray:
        """``(frames, H, W, 3)`` in [0, 1] -> ``(frames, dim)``."""

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """``len(texts)`` strings -> ``(len(texts), dim)``."""


class StubEmbedder:
    """Deterministic weight-free embedder for tests.

    Images are average-pooled to a small grid and projected by a seeded random
    matrix; texts are sums of hashed per-word vectors in the same space.
    """

    def __init__(self, dim: int = 64, grid: int = 4, seed: int = 0):
        self.dim, self.grid, self.seed = dim, grid, seed
        self.model_id = f"stub-d{dim}-g{grid}-s{seed}"
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((grid * grid * 3, dim)) / np.sqrt(grid * grid * 3)

    def embed_images(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        n, h, w, c = frames.shape
        g = self.grid
        rows = np.array_split(np.arange(h), g)
        cols = np.array_split(np.arange(w), g)
        pooled = np.stack(
            [frames[:, r][:, :, cc].mean(axis=(1, 2)) for r in rows for cc in cols], axis=1
        )
        return pooled.reshape(n, g * g * c) @ self._proj

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            for word in text.lower().split():
                rng = np.random.default_rng([self.seed, zlib.crc32(word.encode())])
                out[i] += rng.standard_normal(self.dim)
        return out


class ClipEmbedder:
    """Pretrained image-text model loaded lazily through ``transformers``."""

    def __init__(self, model_id: str = DEFAULT_CLIP_MODEL, device: str | None = None):
        self.model_id = model_id
        self.device = device
        self._model = self._processor = None

    def _load(self):
        if self._model is None:
            import torch
            from transformers import CLIPModel, CLIPProcessor

            self.device = self.device or ("cuda" if torch.cuda.is_available() else "cpu")
            self._model = CLIPModel.from_pretrained(self.model_id).to(self.device).eval()
            self._processor = CLIPProcessor.from_pretrained(self.model_id)
        return self._model, self._processor

    def embed_images(self, frames: np.ndarray) -> np.ndarray:
        import torch

        model, proc = self._load()
        images = list(np.clip(np.rint(np.asarray(frames) * 255), 0, 255).astype(np.uint8))
        inputs = proc(images=images, return_tensors="pt").to(self.device)
        with torch.no_grad():
            feats = model.get_image_features(**inputs)
        return feats.float().cpu().numpy().astype(np.float64)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        import torch

        model, proc = self._load()
        inputs = proc(text=list(texts), return_tensors="pt", padding=True, truncation=True).to(self.device)
        with torch.no_grad():
            feats = model.get_text_features(**inputs)
        return feats.float().cpu().numpy().astype(np.float64)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise UndefinedMetricError("zero-length embedding; cosine similarity is undefined")
    return v / norm


def _embed_frames(frames, embedder: Embedder) -> np.ndarray:
    frames = np.asarray(frames)
    out = []
    for i, frame in enumerate(frames):
        try:
            out.append(np.asarray(embedder.embed_images(frame[None]), dtype=np.float64)[0])
        except Exception as exc:
            raise EmbeddingError(f"image embedding failed: {exc}", frame=i) from exc
    return np.stack(out)


def cosine(a, b) -> np.ndarray:
    return np.sum(_unit(np.asarray(a, dtype=np.float64)) * _unit(np.asarray(b, dtype=np.float64)), axis=-1)


def temporal_from_embeddings(emb: np.ndarray) -> float:
    emb = np.asarray(emb, dtype=np.float64)
    if len(emb) < 2:
        raise UndefinedMetricError(f"temporal consistency needs at least 2 frames, got {len(emb)}")
    return float(np.mean(cosine(emb[:-1], emb[1:])))


def edit_accuracy_from_embeddings(image_emb, src_text_emb, edit_text_emb) -> tuple[float, np.ndarray]:
    """Fraction of frames strictly closer to the edit prompt; ties count as failures.

    Returns the score and the ``(frames, 2)`` per-frame ``(sim_edit, sim_src)`` table.
    """
    image_emb = np.asarray(image_emb, dtype=np.float64)
    if len(image_emb) < 1:
        raise UndefinedMetricError("edit accuracy needs at least one frame")
    sim_edit = cosine(image_emb, edit_text_emb)
    sim_src = cosine(image_emb, src_text_emb)
    return float(np.mean(sim_edit > sim_src)), np.stack([sim_edit, sim_src], axis=1)


def temporal_consistency(frames, embedder: Embedder) -> float:
    """Mean cosine similarity of consecutive frames' image embeddings."""
    if len(frames) < 2:
        raise UndefinedMetricError(f"temporal consistency needs at least 2 frames, got {len(frames)}")
    return temporal_from_embeddings(_embed_frames(frames, embedder))


def _check_prompts(*prompts):
    if any(not p or not p.strip() for p in prompts):
        raise ValueError("prompts must be non-empty")


def edit_accuracy(frames, source_prompt: str, edit_prompt: str, embedder: Embedder) -> float:
    _check_prompts(source_prompt, edit_prompt)
    text = embedder.embed_texts([source_prompt, edit_prompt])
    return edit_accuracy_from_embeddings(_embed_frames(frames, embedder), text[0], text[1])[0]


@dataclass
class EvalReport:
    temporal: float | None
    edit_acc: float
    per_frame: list[tuple[float, float]]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        data = json.loads(Path(path).read_text())
        data["per_frame"] = [tuple(p) for p in data["per_frame"]]
        return cls(**data)


def evaluate(frames, source_prompt: str, edit_prompt: str, embedder: Embedder, video_id: str = "") -> EvalReport:
    """Both metrics from a single embedding pass over the frames."""
    _check_prompts(source_prompt, edit_prompt)
    if len(frames) < 2:
        raise UndefinedMetricError(f"temporal consistency needs at least 2 frames, got {len(frames)}")
    image_emb = _embed_frames(frames, embedder)
    text = embedder.embed_texts([source_prompt, edit_prompt])
    acc, table = edit_accuracy_from_embeddings(image_emb, text[0], text[1])
    return EvalReport(
        temporal=temporal_from_embeddings(image_emb),
        edit_acc=acc,
        per_frame=[(float(a), float(b)) for a, b in table],
        metadata={
            "video_id": video_id,
            "source_prompt": source_prompt,
            "edit_prompt": edit_prompt,
            "model_id": embedder.model_id,
            "num_frames": len(frames),
        },
    )


def aggregate_table(reports: Sequence[EvalReport], method: str = "ours") -> str:
    """Markdown table of mean temporal consistency and edit accuracy over videos."""
    temporal = [r.temporal for r in reports if r.temporal is not None]
    acc = [r.edit_acc for r in reports]
    t = f"{np.mean(temporal):.3f}" if temporal else "n/a"
    a = f"{np.mean(acc):.3f}" if acc else "n/a"
    return "\n".join(
        [
            "| Method | Temporal | Edit Acc | Videos |",
            "|---|---|---|---|",
            f"| {method} | {t} | {a} | {len(reports)} |",
        ]
    )
