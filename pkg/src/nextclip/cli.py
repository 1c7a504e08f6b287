"""Single entry point multiplexing the pipeline subcommands.

Exit codes: 0 success, 2 usage error, 1 runtime error.  Failures print one
machine-parsable line ``error: <code>: <message>`` to stderr.  All
randomness derives from ``--seed`` through fixed named substreams, so adding
a new consumer cannot perturb existing ones.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
import torch

from . import __version__
from .errors import InvalidConfigError, NextClipError
from .model import CHECKPOINT_VERSION, load_checkpoint
from .sampler import HistoryPredictor, SamplerConfig, autoregress
from .videodata import (
    FORMAT_VERSION,
    SceneConfig,
    VideoTensor,
    generate_scene,
    read_dataset,
    write_dataset,
)

log = logging.getLogger("nextclip")

# Fixed substream ids per random consumer (never renumber, only append).
_STREAMS = {"gen-data": 1, "predict": 2, "probe-split": 3}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAMS[name]])


def _parse_res(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise UsageError(f"bad resolution {text!r}, expected HxW") from exc


def build_parser() -> _Parser:
    parser = _Parser(prog="nextclip", description=__doc__, add_help=True)
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument(
        "--log-level",
        choices=["debug", "info", "warning", "error"],
        default="warning",
    )
    parser.add_argument("--version", action="store_true", help="print versions and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--scene", required=True, choices=["bouncing_ball", "gravity_drop", "linear_drift"])
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--res", type=_parse_res, required=True)
    p.add_argument("--seed", dest="sub_seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--gravity", type=float, default=0.5)
    p.add_argument("--fps", type=int, default=8)
    p.add_argument(
        "--motion", choices=["continuous", "grid"], default="continuous",
        help="grid keeps centers on integer pixels with unit velocities",
    )

    p = sub.add_parser("pretrain", help="run the progressive training schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--log", default=None, help="CSV step log path")

    p = sub.add_parser("predict", help="autoregressive video prediction")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--video-index", type=int, default=0)
    p.add_argument("--cond-frames", type=int, required=True)
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--frames-per-clip", type=int, required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--cfg", type=float, default=3.0)
    p.add_argument("--seed", dest="sub_seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=4)

    p = sub.add_parser("render", help="dump dataset frames as PGM/PPM images")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="rollout evaluation against ground truth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cond", type=int, required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--cfg", type=float, default=3.0)
    p.add_argument("--frames-per-clip", type=int, default=4)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--seed", dest="sub_seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=4)

    p = sub.add_parser("probe", help="linear probe on pooled clip features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--split", type=float, default=0.5, help="training fraction")
    p.add_argument("--seed", dest="sub_seed", type=int, default=None)
    p.add_argument("--out", default=None, help="per-class accuracy CSV")
    p.add_argument("--patch", type=int, default=4)

    p = sub.add_parser("mask-dump", help="dump a sequence layout and its mask")
    p.add_argument("--sizes", required=True, help="comma list of clip sizes")
    p.add_argument("--res", type=_parse_res, default=(4, 4))
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--mode", choices=["train", "inference"], default="train")
    p.add_argument("--extras", type=int, default=0)
    p.add_argument("--out", required=True, help="output path prefix")
    return parser


def _effective_seed(args) -> int:
    sub = getattr(args, "sub_seed", None)
    if sub is not None:
        return sub
    return args.seed if args.seed is not None else 0


# -- handlers ----------------------------------------------------------------


_GRID_DIRS = [(vx, vy) for vx in (-1, 0, 1) for vy in (-1, 0, 1) if (vx, vy) != (0, 0)]


def _cmd_gen_data(args) -> int:
    rng = _stream(_effective_seed(args), "gen-data")
    h, w = args.res
    videos = []
    for i in range(args.count):
        start = None
        if args.motion == "grid":
            velocity = _GRID_DIRS[int(rng.integers(0, len(_GRID_DIRS)))]
            margin = int(np.ceil(args.radius))
            start = (
                float(rng.integers(margin, max(margin + 1, w - margin))),
                float(rng.integers(margin, max(margin + 1, h - margin))),
            )
        else:
            speed = rng.uniform(0.8, 1.6)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            velocity = (speed * np.cos(angle), speed * np.sin(angle))
        child_seed = int(rng.integers(0, 2**63))
        if args.scene == "gravity_drop":
            velocity = (velocity[0], 0.0)
        cfg = SceneConfig(
            scene_kind=args.scene,
            height=h,
            width=w,
            num_frames=args.frames,
            seed=child_seed,
            radius=args.radius,
            velocity=(float(velocity[0]), float(velocity[1])),
            gravity=args.gravity,
            fps_hint=args.fps,
            start=start,
        )
        videos.append(generate_scene(cfg))
    write_dataset(args.out, videos)
    log.info("wrote %d videos to %s", len(videos), args.out)
    return 0


def _cmd_pretrain(args) -> int:
    from .trainer import parse_config, run_training

    with open(args.config, "r", encoding="utf-8") as f:
        cfg = parse_config(f.read())
    if args.seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, seed=args.seed)
    _state, final = run_training(cfg, resume=args.resume, log_path=args.log)
    print(final)
    return 0


def _cmd_predict(args) -> int:
    model, _extras, _meta = load_checkpoint(args.ckpt)
    videos = read_dataset(args.input)
    if not (0 <= args.video_index < len(videos)):
        raise InvalidConfigError(
            f"video index {args.video_index} outside dataset of {len(videos)}"
        )
    video = videos[args.video_index]
    if args.cond_frames < 1 or args.cond_frames > video.num_frames:
        raise InvalidConfigError(
            f"cond-frames {args.cond_frames} invalid for video of {video.num_frames}"
        )
    cfg = SamplerConfig(
        steps=args.steps,
        cfg_scale=args.cfg,
        frames_per_clip=args.frames_per_clip,
        seed=_effective_seed(args),
    )
    predictor = HistoryPredictor(model)
    out = autoregress(
        video.frames[: args.cond_frames],
        args.clips,
        cfg,
        predictor,
        patch_size=args.patch,
        fps_hint=video.fps_hint,
    )
    write_dataset(args.out, [out])
    return 0


def _write_pnm(path, frame: np.ndarray) -> None:
    """frame: [C, H, W] in [0, 1]; PGM (P5) for C=1, PPM (P6) for C=3."""
    c, h, w = frame.shape
    pixels = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    if c == 1:
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        body = pixels[0].tobytes()
    else:
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        body = pixels.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(header + body)


def _cmd_render(args) -> int:
    videos = read_dataset(args.inp)
    os.makedirs(args.out, exist_ok=True)
    for vi, video in enumerate(videos):
        vdir = os.path.join(args.out, f"video_{vi:03d}")
        os.makedirs(vdir, exist_ok=True)
        ext = "pgm" if video.frames.shape[1] == 1 else "ppm"
        for t, frame in enumerate(video.frames):
            _write_pnm(os.path.join(vdir, f"frame_{t:04d}.{ext}"), frame)
        strip = np.concatenate(list(video.frames), axis=2)  # side by side
        _write_pnm(os.path.join(vdir, f"strip.{ext}"), strip)
    return 0


def _cmd_eval(args) -> int:
    from .evalkit import evaluate_rollout, write_report_csv

    model, _extras, _meta = load_checkpoint(args.ckpt)
    videos = read_dataset(args.data)
    cfg = SamplerConfig(
        steps=args.steps,
        cfg_scale=args.cfg,
        frames_per_clip=args.frames_per_clip,
        seed=_effective_seed(args),
    )
    report, rows = evaluate_rollout(
        HistoryPredictor(model), videos, args.cond, args.horizon, cfg,
        patch_size=args.patch,
    )
    write_report_csv(args.out, rows)
    print(
        f"mean_mse={report.mean_mse:.6f} baseline_mse={report.baseline_mean_mse:.6f} "
        f"improvement={report.relative_improvement:.4f}"
    )
    return 0


def _cmd_probe(args) -> int:
    import csv

    from .condition import pooled_features, probe_accuracy, train_probe
    from .trainer import load_labels

    model, _extras, _meta = load_checkpoint(args.ckpt)
    videos = read_dataset(args.data)
    pairs = load_labels(args.labels)
    if len(pairs) != len(videos):
        raise InvalidConfigError(f"{len(pairs)} labels for {len(videos)} videos")
    labels = np.array([cid for cid, _ in pairs])
    names = {cid: name for cid, name in pairs}
    vocab = int(labels.max()) + 1
    if not (0.0 < args.split < 1.0):
        raise InvalidConfigError("split must lie strictly between 0 and 1")

    feats = pooled_features(model, videos, args.patch)
    rng = _stream(_effective_seed(args), "probe-split")
    order = rng.permutation(len(videos))
    n_train = max(1, int(round(args.split * len(videos))))
    train_idx, test_idx = order[:n_train], order[n_train:]
    if len(test_idx) == 0:
        raise InvalidConfigError("split leaves no held-out videos")
    probe = train_probe(feats[train_idx], labels[train_idx], vocab)
    acc = probe_accuracy(probe, feats[test_idx], labels[test_idx])
    print(f"accuracy {acc:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class_id", "name", "accuracy", "count"])
            for cid in range(vocab):
                sel = [i for i in test_idx if labels[i] == cid]
                if sel:
                    cacc = probe_accuracy(probe, feats[sel], labels[sel])
                else:
                    cacc = float("nan")
                writer.writerow([cid, names.get(cid, ""), f"{cacc:.6f}", len(sel)])
    return 0


def _cmd_mask_dump(args) -> int:
    from .clipseq import build_inference_sequence, build_training_sequence, ClipPartition
    from .maskgen import build_inference_mask, build_training_mask, extend_mask_with_extras

    try:
        sizes = tuple(int(s) for s in args.sizes.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --sizes {args.sizes!r}") from exc
    h, w = args.res
    rng = np.random.default_rng(0)
    if args.mode == "train":
        frames = np.zeros((sum(sizes), 1, h, w), dtype=np.float32)
        seq = build_training_sequence(
            VideoTensor(frames), ClipPartition(sizes), [0.5] * len(sizes),
            args.patch, 1.0, rng,
        )
        mask = build_training_mask(seq)
    else:
        history = [
            np.zeros((s, 1, h, w), dtype=np.float32) for s in sizes[:-1]
        ]
        seq = build_inference_sequence(
            history, sizes[-1], 0.5, args.patch, rng=rng, geometry=(1, h, w)
        )
        mask = build_inference_mask(seq)
    if args.extras > 0:
        mask = extend_mask_with_extras(mask, args.extras)

    with open(args.out + ".layout.txt", "w", encoding="utf-8") as f:
        for i in range(args.extras):
            f.write(f"{i}\tCLASS\textra\t0\t-1\t{i}\n")
        for i, tok in enumerate(seq.tokens):
            f.write(
                f"{i + args.extras}\t{tok.kind.name}\t{tok.role.name.lower()}\t"
                f"{tok.clip}\t{tok.frame}\t{tok.ordinal}\n"
            )
    with open(args.out + ".mask.txt", "w", encoding="utf-8") as f:
        f.write(mask.to_ascii() + "\n")
    with open(args.out + ".mask.pgm", "wb") as f:
        f.write(mask.to_pgm())
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "predict": _cmd_predict,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "probe": _cmd_probe,
    "mask-dump": _cmd_mask_dump,
}


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.version:
            print(
                f"nextclip {__version__} "
                f"(dataset format v{FORMAT_VERSION}, checkpoint format v{CHECKPOINT_VERSION})"
            )
            return 0
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=args.log_level.upper())
        torch.set_num_threads(max(1, args.threads))
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(build_parser().format_usage(), end="", file=sys.stderr)
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except NextClipError as exc:
        print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
