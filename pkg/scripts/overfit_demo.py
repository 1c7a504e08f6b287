"""Single-video overfit sanity run: trains the desk config on one
bouncing-ball video and reports the final loss plus the next-clip
reconstruction error of the sampler.

Usage:
  python scripts/overfit_demo.py [--steps 500] [--seed 0]
"""

import argparse
import sys
import time

import numpy as np
import torch

from nextclip.model import ClipTransformer, ModelConfig
from nextclip.sampler import HistoryPredictor, SamplerConfig, sample_clip
from nextclip.trainer import StageConfig, TrainState, draw_example, effective_lr, train_step
from nextclip.videodata import SceneConfig, generate_scene


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    torch.set_num_threads(args.threads)

    video = generate_scene(
        SceneConfig("bouncing_ball", 16, 16, num_frames=8, seed=args.seed,
                    radius=2.5, velocity=(1.2, 0.9))
    )
    model = ClipTransformer(
        ModelConfig(depth=4, width=128, heads=4, patch_dim=16, max_frames=32,
                    seed=args.seed)
    )
    state = TrainState.fresh(model, args.seed)
    stage = StageConfig(num_frames=8, clip_rule="uniform", steps=args.steps,
                        lr=1e-3, batch=1)

    t0 = time.time()
    loss = float("nan")
    for step in range(args.steps):
        ex = [draw_example(video, stage, state.streams, 4, 0.9)]
        loss = train_step(state, ex, effective_lr(stage.lr, state.step, 50))
        if (step + 1) % 100 == 0:
            print(f"step {step + 1}: loss {loss:.5f}", flush=True)
    print(f"final loss {loss:.5f} after {time.time() - t0:.0f}s")

    cfg = SamplerConfig(steps=8, cfg_scale=1.0, frames_per_clip=4, seed=args.seed + 1)
    recon = sample_clip([video.frames[:4]], cfg, HistoryPredictor(model), patch_size=4)
    err = float(((recon - video.frames[4:8]) ** 2).mean())
    print(f"next-clip reconstruction MSE {err:.5f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
