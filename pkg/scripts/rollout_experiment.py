"""Desk-scale generalization experiment: pretrain on bouncing-ball videos,
then compare autoregressive rollout MSE against the copy-last-frame baseline
on held-out seeds, at the trained clip width and at one frame per clip.

Usage:
  python scripts/rollout_experiment.py --train-videos 200 --eval-videos 20 \
      --out-dir /tmp/rollout_exp
"""

import argparse
import json
import os
import sys
import time

import numpy as np
import torch

from nextclip.evalkit import evaluate_rollout, write_report_csv
from nextclip.sampler import HistoryPredictor, SamplerConfig
from nextclip.trainer import StageConfig, TrainerConfig, run_training
from nextclip.videodata import SceneConfig, generate_scene, write_dataset

# Progressive desk schedule: long next-frame stage, a multi-frame-clip stage
# at reduced rate, then the strided stage at a low polish rate (mirrors the
# large-scale recipe where the last stage drops the learning rate sharply).
DESK_STAGES = (
    StageConfig(num_frames=8, clip_rule=8, interval=(1, 1), steps=3000, lr=1.5e-3, batch=4),
    StageConfig(num_frames=16, clip_rule="uniform", interval=(1, 1), steps=1500, lr=8e-4, batch=2),
    StageConfig(num_frames=16, clip_rule="uniform", interval=(1, 3), steps=500, lr=2e-4, batch=2),
)

_GRID_DIRS = [(vx, vy) for vx in (-1, 0, 1) for vy in (-1, 0, 1) if (vx, vy) != (0, 0)]


def make_ball_videos(count, num_frames, seed, res=16, radius=2.5, motion="grid"):
    """Bouncing-ball corpus; ``grid`` motion keeps centers on integer pixels
    (one of eight unit directions), ``continuous`` draws free velocities."""
    rng = np.random.default_rng(seed)
    videos = []
    for _ in range(count):
        if motion == "grid":
            vx, vy = _GRID_DIRS[int(rng.integers(0, len(_GRID_DIRS)))]
            lo, hi = int(np.ceil(radius)), int(res - 1 - np.ceil(radius))
            start = (float(rng.integers(lo, hi + 1)), float(rng.integers(lo, hi + 1)))
            velocity = (float(vx), float(vy))
        else:
            speed = rng.uniform(0.8, 1.6)
            angle = rng.uniform(0, 2 * np.pi)
            velocity = (speed * np.cos(angle), speed * np.sin(angle))
            start = None
        videos.append(
            generate_scene(
                SceneConfig(
                    "bouncing_ball",
                    res,
                    res,
                    num_frames=num_frames,
                    seed=int(rng.integers(0, 2**63)),
                    radius=radius,
                    velocity=velocity,
                    start=start,
                )
            )
        )
    return videos


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train-videos", type=int, default=200)
    ap.add_argument("--eval-videos", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--steps-scale", type=float, default=1.0,
                    help="multiply every stage's step count (quick pilots)")
    ap.add_argument("--motion", choices=["grid", "continuous"], default="grid")
    ap.add_argument("--sample-steps", type=int, default=2)
    ap.add_argument("--cfg-scale", type=float, default=3.0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    torch.set_num_threads(args.threads)
    os.makedirs(args.out_dir, exist_ok=True)
    data_path = os.path.join(args.out_dir, "train.ncvd")

    t0 = time.time()
    train_videos = make_ball_videos(args.train_videos, 48, seed=args.seed, motion=args.motion)
    write_dataset(data_path, train_videos)
    eval_videos = make_ball_videos(args.eval_videos, 16, seed=args.seed + 10_000, motion=args.motion)

    stages = tuple(
        StageConfig(**{**s.__dict__, "steps": max(1, int(s.steps * args.steps_scale))})
        for s in DESK_STAGES
    )
    cfg = TrainerConfig(
        stages=stages,
        seed=args.seed,
        data=data_path,
        ckpt_dir=os.path.join(args.out_dir, "ckpts"),
        patch_size=4,
        model_max_frames=32,
    )
    state, ckpt = run_training(cfg, log_path=os.path.join(args.out_dir, "train_log.csv"))
    train_time = time.time() - t0
    print(f"training done in {train_time:.0f}s -> {ckpt}", flush=True)

    predictor = HistoryPredictor(state.model)
    results = {}
    for frames_per_clip, tag in ((4, "clip4"), (1, "clip1")):
        sampler_cfg = SamplerConfig(
            steps=args.sample_steps,
            cfg_scale=args.cfg_scale,
            frames_per_clip=frames_per_clip,
            seed=args.seed + 1,
        )
        report, rows = evaluate_rollout(
            predictor, eval_videos, cond_frames=4, horizon=12, cfg=sampler_cfg
        )
        write_report_csv(os.path.join(args.out_dir, f"report_{tag}.csv"), rows)
        results[tag] = {
            "mean_mse": report.mean_mse,
            "baseline_mse": report.baseline_mean_mse,
            "improvement": report.relative_improvement,
            "per_frame_mse": report.per_frame_mse,
            "mean_iou": float(np.mean(report.per_frame_iou)),
        }
        print(
            f"{tag}: mse={report.mean_mse:.5f} baseline={report.baseline_mean_mse:.5f} "
            f"improvement={report.relative_improvement:.3f}",
            flush=True,
        )
    results["train_seconds"] = train_time
    results["total_seconds"] = time.time() - t0
    with open(os.path.join(args.out_dir, "summary.json"), "w") as f:
        json.dump(results, f, indent=2)
    print(f"total {results['total_seconds']:.0f}s", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
