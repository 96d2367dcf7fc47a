"""Render principal components of coarse decoder features for source, edit and their difference.

The difference map is what the edit pass receives in place of its own
coarse residual output during the first sampling steps. Run with
``python demos/feature_pca.py --out-dir pca_out``.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from fusedit.denoiser import LayerAddress, ToyDenoiser
from fusedit.feature_viz import image_name, render_difference_features, render_layer
from fusedit.io import write_frames
from fusedit.pipeline import EditConfig, collect_features

from toy_edit import synthetic_clip


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", type=Path, default=Path("pca_out"))
    parser.add_argument("--layers", nargs="+", default=["decoder.04", "decoder.07", "decoder.11"])
    parser.add_argument("--step", type=int, default=2)
    args = parser.parse_args()

    clip = synthetic_clip(2)
    backend = ToyDenoiser().configure(clip.shape[1] // 2)
    layers = [LayerAddress.find(s, backend.layers) for s in args.layers]
    caps = collect_features(clip, "a cat on grass", [args.step], layers, EditConfig(), backend, "a dog on grass")
    src, edit = caps["src"][args.step], caps["edit"][args.step]
    for layer in layers:
        images = {
            "src": render_layer(src, layer),
            "edit": render_layer(edit, layer),
            "diff": render_difference_features(src, edit, layer),
        }
        for kind, rgb in images.items():
            pattern = image_name(layer, args.step, 0, kind).replace("frame00000", "frame{:05d}")
            write_frames(rgb, args.out_dir, pattern=pattern)
        print(f"{layer}: {rgb.shape[1]}x{rgb.shape[2]} maps")
    print("wrote", args.out_dir)


if __name__ == "__main__":
    main()
