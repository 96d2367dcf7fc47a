"""Command-line entry point: invert, edit, eval and viz-features.

Every command writes a ``manifest.json`` next to its outputs. Failures print a
single ``error: <Type>: <message>`` line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .denoiser.base import LayerAddress
from .errors import ConfigurationError, EditError
from .io import read_frames, write_frames, write_latent_cache, write_manifest
from .pipeline import EditConfig, EditRequest, collect_features, edit_video, get_backend, invert_latents

EXIT_ERROR = 1
EXIT_CONFIG = 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=["toy", "pretrained-ldm"])
    p.add_argument("--model-path", help="pretrained backbone id or directory")
    p.add_argument("--spill-dir", type=Path, help="write per-step source captures here")
    p.add_argument("--steps", dest="num_steps", type=int, help="number of inference steps")
    p.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="resize frames on load")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusedit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", help="DDIM-invert a clip and write its latent trajectory")
    p.add_argument("frames", type=Path, help="frame directory or video file")
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", type=Path, default=Path("inversion.lat"))
    _common(p)

    p = sub.add_parser("edit", help="edit a clip from a source prompt to an edit prompt")
    p.add_argument("frames", type=Path)
    p.add_argument("--source-prompt", required=True)
    p.add_argument("--edit-prompt", required=True)
    p.add_argument("--out-dir", type=Path, default=Path("edited"))
    p.add_argument("--blend", nargs=2, action="append", metavar=("SRC", "EDIT"), help="explicit edited word pair; repeatable")
    p.add_argument("--save-masks", action="store_true", default=None)
    _common(p)

    p = sub.add_parser("eval", help="temporal consistency and edit accuracy of a clip")
    p.add_argument("frames", type=Path)
    p.add_argument("--source-prompt", required=True)
    p.add_argument("--edit-prompt", required=True)
    p.add_argument("--out", type=Path, default=Path("report.json"))
    p.add_argument("--stub-embedder", action="store_true", help="deterministic weight-free embedder")
    p.add_argument("--clip-model", default=None)
    p.add_argument("--video-id", default="")

    p = sub.add_parser("viz-features", help="render principal components of decoder residual features")
    p.add_argument("frames", type=Path)
    p.add_argument("--prompt", required=True)
    p.add_argument("--edit-prompt", help="also render the edit pass and the source-minus-edit difference")
    p.add_argument("--layers", nargs="+", default=["decoder.04"])
    p.add_argument("--at-steps", type=int, nargs="+", default=[0])
    p.add_argument("--out-dir", type=Path, default=Path("features"))
    _common(p)
    return parser


def _config(args) -> EditConfig:
    overrides = {
        "seed": args.seed,
        "backend": args.backend,
        "model_path": args.model_path,
        "spill_dir": None if args.spill_dir is None else str(args.spill_dir),
        "num_steps": args.num_steps,
    }
    if getattr(args, "save_masks", None):
        overrides["save_masks"] = True
    if getattr(args, "blend", None):
        overrides["blend_words"] = [tuple(p) for p in args.blend]
    return EditConfig.from_file(args.config, **overrides)


def _manifest(args, argv, config: EditConfig | None, backend=None, **extra) -> dict:
    return {
        "command": args.command,
        "argv": list(argv),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": None if config is None else config.to_dict(),
        "seed": None if config is None else config.seed,
        "backend": None if backend is None else getattr(backend, "backend_id", type(backend).__name__),
        **extra,
    }


def cmd_invert(args, argv) -> Path:
    cfg = _config(args)
    frames = read_frames(args.frames, args.size)
    backend = get_backend(cfg)
    traj = invert_latents(backend.encode_frames(frames), args.prompt, cfg, backend)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_latent_cache(args.out, traj)
    write_manifest(
        args.out.with_suffix(".manifest.json"),
        _manifest(args, argv, cfg, backend, prompt=args.prompt, frames=str(args.frames), cache=str(args.out), shape=traj.shape),
    )
    return args.out


def cmd_edit(args, argv) -> Path:
    cfg = _config(args)
    frames = read_frames(args.frames, args.size)
    backend = get_backend(cfg)
    result = edit_video(EditRequest(frames, args.source_prompt, args.edit_prompt, cfg), backend, run_id=args.out_dir.name)
    out = args.out_dir
    write_frames(np.clip(result.frames, 0, 1), out / "frames")
    write_frames(np.clip(result.source_frames, 0, 1), out / "reconstruction")
    extra = {}
    if result.per_step_masks is not None:
        saved = {}
        for i, m in enumerate(result.per_step_masks):
            if m is None:
                continue
            saved[f"step{i:03d}_m_src"] = m.m_src
            saved[f"step{i:03d}_m_edit"] = m.m_edit
            if m.group_masks is not None:
                saved[f"step{i:03d}_groups"] = m.group_masks
        np.savez_compressed(out / "masks.npz", **saved)
        extra["mask_groups"] = [[list(s), list(e)] for s, e in result.alignment.groups]
    write_manifest(out / "manifest.json", _manifest(args, argv, cfg, backend, provenance=result.provenance, frames=str(args.frames), **extra))
    return out


def cmd_eval(args, argv) -> Path:
    from .metrics import ClipEmbedder, StubEmbedder, evaluate

    frames = read_frames(args.frames)
    embedder = StubEmbedder() if args.stub_embedder else ClipEmbedder(args.clip_model or "openai/clip-vit-large-patch14")
    report = evaluate(frames, args.source_prompt, args.edit_prompt, embedder, video_id=args.video_id or args.frames.name)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report.save(args.out)
    write_manifest(args.out.with_suffix(".manifest.json"), _manifest(args, argv, None, model_id=embedder.model_id, report=str(args.out)))
    return args.out


def cmd_viz_features(args, argv) -> Path:
    from .feature_viz import image_name, render_difference_features, render_layer

    cfg = _config(args)
    frames = read_frames(args.frames, args.size)
    backend = get_backend(cfg)
    side = backend.encode_frames(frames[:1]).shape[-1]
    if hasattr(backend, "configure"):
        # layer resolutions of the toy backend follow the latent size
        backend.configure(side)
    layers = [LayerAddress.find(s, backend.layers) for s in args.layers]
    caps = collect_features(frames, args.prompt, args.at_steps, layers, cfg, backend, args.edit_prompt)
    out = args.out_dir
    written = []
    for step in sorted(set(args.at_steps)):
        for layer in layers:
            images = {"src": render_layer(caps["src"][step], layer)}
            if "edit" in caps:
                images["edit"] = render_layer(caps["edit"][step], layer)
                images["diff"] = render_difference_features(caps["src"][step], caps["edit"][step], layer)
            for kind, rgb in images.items():
                paths = write_frames(rgb, out, pattern=image_name(layer, step, 0, kind).replace("frame00000", "frame{:05d}"))
                written += [str(p) for p in paths]
    write_manifest(out / "manifest.json", _manifest(args, argv, cfg, backend, images=written))
    return out


COMMANDS = {"invert": cmd_invert, "edit": cmd_edit, "eval": cmd_eval, "viz-features": cmd_viz_features}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        out = COMMANDS[args.command](args, argv)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_CONFIG
    except (EditError, ValueError, IndexError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return EXIT_ERROR
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
