"""Frame directories, the latent cache format and run manifests."""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image

FRAME_PATTERN = "{:05d}.png"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
VIDEO_SUFFIXES = {".mp4", ".avi", ".mov", ".mkv", ".webm", ".gif"}

CACHE_MAGIC = b"FLAT"
CACHE_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
# magic, version, dtype code, ndim, step count
_HEADER = struct.Struct("<4sHBBI")


def _frame_key(path: Path):
    digits = re.findall(r"\d+", path.stem)
    return (int(digits[-1]) if digits else -1, path.name)


def read_frames(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Load a clip as ``(frames, height, width, 3)`` floats in [0, 1].

    ``path`` is a directory of numbered images or a video file.
    ``size`` is an optional ``(width, height)`` resize target.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"frames path does not exist: {path}")
    if path.is_dir():
        files = sorted((p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=_frame_key)
        if not files:
            raise FileNotFoundError(f"no image frames in {path}")
        images = []
        for f in files:
            with Image.open(f) as im:
                im = im.convert("RGB")
                if size is not None:
                    im = im.resize(size, Image.BICUBIC)
                images.append(np.asarray(im))
    elif path.suffix.lower() in VIDEO_SUFFIXES:
        images = _demux(path, size)
    else:
        raise ValueError(f"not a frame directory or video file: {path}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"frames differ in resolution: {sorted(shapes)}")
    return np.stack(images).astype(np.float64) / 255.0


def _demux(path: Path, size) -> list[np.ndarray]:
    import cv2

    cap = cv2.VideoCapture(str(path))
    images = []
    try:
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            frame = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
            if size is not None:
                frame = cv2.resize(frame, size, interpolation=cv2.INTER_CUBIC)
            images.append(frame)
    finally:
        cap.release()
    if not images:
        raise ValueError(f"could not decode any frame from {path}")
    return images


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)


def write_frames(frames: np.ndarray, out_dir: str | Path, pattern: str = FRAME_PATTERN) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(to_uint8(frames)):
        p = out_dir / pattern.format(i)
        Image.fromarray(frame).save(p)
        paths.append(p)
    return paths


def write_video(frames: np.ndarray, path: str | Path, fps: float = 8.0) -> Path:
    import cv2

    path = Path(path)
    data = to_uint8(frames)
    h, w = data.shape[1:3]
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"mp4v"), fps, (w, h))
    try:
        for frame in data:
            writer.write(cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    finally:
        writer.release()
    return path


def write_latent_cache(path: str | Path, trajectory: np.ndarray) -> Path:
    """Write ``(steps, *shape)`` latents: fixed header, per-step shape, raw little-endian payloads."""
    traj = np.asarray(trajectory)
    dtype = traj.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported latent dtype {traj.dtype}")
    step_shape = traj.shape[1:]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, _DTYPE_CODES[dtype], len(step_shape), traj.shape[0]))
        fh.write(struct.pack(f"<{len(step_shape)}I", *step_shape))
        for step in traj:
            fh.write(np.ascontiguousarray(step, dtype=dtype).tobytes())
    return path


def read_latent_cache(path: str | Path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated latent cache header")
    magic, version, code, ndim, steps = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise ValueError(f"{path}: not a latent cache (magic {magic!r})")
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"{path}: unknown element type code {code}")
    off = _HEADER.size
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    dtype = _CODE_DTYPES[code]
    expected = steps * int(np.prod(shape)) * dtype.itemsize
    if len(raw) - off != expected:
        raise ValueError(f"{path}: payload has {len(raw) - off} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype=dtype, offset=off).reshape(steps, *shape)
    header = {"version": version, "dtype": dtype.name, "shape": tuple(shape), "steps": steps}
    return data.astype(dtype.newbyteorder("="), copy=True), header


def write_manifest(path: str | Path, manifest: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(obj):
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"not serializable: {type(obj).__name__}")


def save_capture(path: str | Path, capture) -> Path:
    """Spill one StepCapture to an ``.npz`` keyed by layer address."""
    arrays = {}
    for addr, f in capture.residual_features.items():
        arrays[f"residual/{addr}"] = f
    for rec in capture.attention:
        for name in ("keys", "values", "probs"):
            arrays[f"{rec.kind.value}/{rec.address}/{name}"] = np.ascontiguousarray(getattr(rec, name))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)
    return path
