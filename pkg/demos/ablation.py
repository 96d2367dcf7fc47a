"""Switch off feature injection, key/value injection or attention fusion and compare.

Each arm reruns the same edit with one controller disabled and reports how far
its latent trajectory and final frames move from the full pipeline. Run with
``python demos/ablation.py``.
"""

from __future__ import annotations

import argparse

import numpy as np

from fusedit.denoiser import ToyDenoiser
from fusedit.pipeline import EditConfig, EditRequest, edit_video

from toy_edit import synthetic_clip

ARMS = {
    "without feature injection": dict(feature_inject=False),
    "without key/value injection": dict(kv_inject=False),
    "without attention fusion": dict(self_fusion=False, cross_fusion=False),
}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--frames", type=int, default=4)
    parser.add_argument("--source-prompt", default="a cat on grass")
    parser.add_argument("--edit-prompt", default="a dog on grass")
    args = parser.parse_args()

    clip = synthetic_clip(args.frames)
    backend = ToyDenoiser()
    request = EditRequest(clip, args.source_prompt, args.edit_prompt, EditConfig())
    full = edit_video(request, backend)
    ref = full.trajectories["edit"]
    print(f"{'arm':30s} {'trajectory rel L2':>18s} {'frame MAE x255':>15s}")
    for name, flags in ARMS.items():
        arm = edit_video(EditRequest(clip, args.source_prompt, args.edit_prompt, EditConfig(**flags)), backend)
        rel = np.linalg.norm(arm.trajectories["edit"] - ref) / np.linalg.norm(ref)
        mae = np.abs(arm.frames - full.frames).mean() * 255
        print(f"{name:30s} {rel:18.2e} {mae:15.3f}")


if __name__ == "__main__":
    main()
