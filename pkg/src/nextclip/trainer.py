"""Pretraining loop: next-clip denoising with an L2 x0 target.

Each step draws, per sample: a video (data-order stream), a frame stride and
clip partition (partition stream), one retention weight per clip (alpha
stream), and the Gaussian noise plus clean-clip corruption (noise stream).
The loss is the mean squared error between predictions at noisy PATCH
positions and the uncorrupted clean latents; the optimizer is decoupled
weight-decay Adam (b1=0.9, b2=0.95, wd=0.1) with linear warmup into a
constant learning rate.

All four RNG streams are named and serialized inside checkpoints, so a
resumed run reproduces the uninterrupted loss trajectory bit-exactly in
single-threaded mode.
"""

from __future__ import annotations

import copy
import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import condition
from .clipseq import (
    ClipPartition,
    TokenSequence,
    build_training_sequence,
    partition_frames,
    patchify,
)
from .errors import DomainError, InvalidConfigError, NumericalError, ShapeError
from .maskgen import AttentionMask, build_training_mask
from .model import ClipTransformer, ModelConfig, load_checkpoint, save_checkpoint
from .videodata import VideoTensor, read_dataset

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.95
ADAM_EPS = 1e-8

STREAM_NAMES = ("partition", "alpha", "noise", "order")


@dataclass(frozen=True)
class StageConfig:
    """One row of the progressive schedule."""

    num_frames: int
    clip_rule: int | str = "uniform"  # fixed K, or "uniform" for K ~ U{2..N}
    interval: tuple[int, int] = (1, 1)  # frame stride drawn from U{lo..hi}
    steps: int = 100
    lr: float = 1e-3
    batch: int = 2

    def validate(self) -> None:
        if self.num_frames < 1 or self.steps < 1 or self.batch < 1:
            raise InvalidConfigError("stage frames/steps/batch must be positive")
        if isinstance(self.clip_rule, int):
            if not (1 <= self.clip_rule <= self.num_frames):
                raise InvalidConfigError(
                    f"fixed clip count {self.clip_rule} invalid for "
                    f"{self.num_frames} frames"
                )
        elif self.clip_rule != "uniform":
            raise InvalidConfigError(f"unknown clip rule {self.clip_rule!r}")
        lo, hi = self.interval
        if lo < 1 or hi < lo:
            raise InvalidConfigError(f"bad interval range {self.interval}")
        if self.lr < 0:
            raise InvalidConfigError("learning rate must be >= 0")


@dataclass(frozen=True)
class TrainerConfig:
    stages: tuple[StageConfig, ...]
    seed: int = 0
    data: str = ""
    labels: str | None = None
    ckpt_dir: str = "."
    patch_size: int = 4
    beta: float = 0.9  # clean-clip retention floor
    warmup: int = 50
    weight_decay: float = 0.1
    model_depth: int = 4
    model_width: int = 128
    model_heads: int = 4
    model_max_frames: int = 64
    model_classes: int = 0


def _default_streams(seed: int) -> dict[str, np.random.Generator]:
    return {
        name: np.random.default_rng([seed, i]) for i, name in enumerate(STREAM_NAMES)
    }


@dataclass
class TrainState:
    model: ClipTransformer
    moments_m: dict[str, torch.Tensor]
    moments_v: dict[str, torch.Tensor]
    step: int  # global optimizer step count
    stage_index: int
    step_in_stage: int
    streams: dict[str, np.random.Generator]

    @classmethod
    def fresh(cls, model: ClipTransformer, seed: int) -> "TrainState":
        zeros = {
            name: torch.zeros_like(p) for name, p in model.named_parameters()
        }
        return cls(
            model=model,
            moments_m={k: v.clone() for k, v in zeros.items()},
            moments_v={k: v.clone() for k, v in zeros.items()},
            step=0,
            stage_index=0,
            step_in_stage=0,
            streams=_default_streams(seed),
        )


def compute_loss(predictions: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every predicted element."""
    if predictions.shape != targets.shape:
        raise ShapeError(
            f"predictions {tuple(predictions.shape)} vs targets "
            f"{tuple(targets.shape)}"
        )
    return ((predictions - targets) ** 2).mean()


def target_array(seq: TokenSequence, video: VideoTensor) -> np.ndarray:
    """Uncorrupted clean latents for each noisy PATCH token, in token order.

    Targets come straight from the video, never from the (possibly corrupted)
    clean-clip payloads in the sequence.
    """
    latents = {}
    rows = []
    for pos in seq.noisy_patch_positions():
        tok = seq.tokens[pos]
        if tok.frame not in latents:
            latents[tok.frame] = patchify(video.frames[tok.frame], seq.patch_size).patches
        rows.append(latents[tok.frame][tok.patch_index])
    return np.stack(rows) if rows else np.zeros((0, seq.patch_dim), dtype=np.float32)


@dataclass
class TrainingExample:
    seq: TokenSequence
    mask: AttentionMask
    targets: np.ndarray
    alphas: tuple[float, ...]
    partition: ClipPartition


def draw_example(
    video: VideoTensor,
    stage: StageConfig,
    streams: dict[str, np.random.Generator],
    patch_size: int,
    beta: float,
    class_id: int | None = None,
) -> TrainingExample:
    """Sample one training sequence from a video under the stage's rules."""
    n_total = video.num_frames
    n = stage.num_frames
    lo, hi = stage.interval
    max_stride = (n_total - 1) // (n - 1) if n > 1 else n_total
    hi = min(hi, max_stride)
    if hi < lo:
        raise InvalidConfigError(
            f"video with {n_total} frames too short for {n} frames at stride >= {lo}"
        )
    part_rng = streams["partition"]
    stride = int(part_rng.integers(lo, hi + 1))
    span = (n - 1) * stride + 1
    start = int(part_rng.integers(0, n_total - span + 1))
    frames = video.frames[start : start + span : stride][:n]
    sub = VideoTensor(frames.copy(), fps_hint=video.fps_hint)

    if isinstance(stage.clip_rule, int):
        k = stage.clip_rule
    else:
        k = int(part_rng.integers(2, n + 1)) if n >= 2 else 1
    part = partition_frames(n, k, part_rng)
    alphas = tuple(float(a) for a in streams["alpha"].uniform(0.0, 1.0, size=k))
    seq = build_training_sequence(sub, part, list(alphas), patch_size, beta, streams["noise"])
    targets = target_array(seq, sub)
    if class_id is not None:
        seq = condition.prefix_class_tokens(seq, class_id)
    mask = build_training_mask(seq)
    return TrainingExample(seq, mask, targets, alphas, part)


def _adamw_update(state: TrainState, lr: float, weight_decay: float) -> None:
    t = state.step + 1
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    with torch.no_grad():
        for name, p in state.model.named_parameters():
            g = p.grad
            if g is None:
                continue
            m = state.moments_m[name]
            v = state.moments_v[name]
            m.mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
            v.mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
            if weight_decay != 0.0:
                p.mul_(1.0 - lr * weight_decay)
            denom = (v / bc2).sqrt_().add_(ADAM_EPS)
            p.addcdiv_(m / bc1, denom, value=-lr)


def train_step(
    state: TrainState,
    examples: list[TrainingExample],
    lr: float,
    weight_decay: float = 0.1,
) -> float:
    """One optimizer update; returns the pre-update batch loss."""
    model = state.model
    preds = model.forward_batch([e.seq for e in examples], [e.mask for e in examples])
    pred_values = torch.cat([p.values for p in preds], dim=0)
    targets = torch.from_numpy(
        np.concatenate([e.targets for e in examples], axis=0)
    ).to(pred_values.dtype)
    loss = compute_loss(pred_values, targets)
    if not torch.isfinite(loss):
        shapes = [e.partition.sizes for e in examples]
        alphas = [e.alphas for e in examples]
        raise NumericalError(
            f"non-finite loss at step {state.step}: alphas={alphas}, clips={shapes}"
        )
    model.zero_grad(set_to_none=True)
    loss.backward()
    _adamw_update(state, lr, weight_decay)
    state.step += 1
    return float(loss.detach())


def effective_lr(base_lr: float, step: int, warmup: int) -> float:
    """Linear warmup into a constant rate; ``step`` is the 0-based step index."""
    if warmup <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup)


def run_stage(
    state: TrainState,
    stage: StageConfig,
    videos: list[VideoTensor],
    cfg: TrainerConfig,
    labels: list[int] | None = None,
    log_rows: list | None = None,
) -> TrainState:
    """Execute the remaining steps of one stage, mutating ``state``."""
    stage.validate()
    if not videos:
        raise InvalidConfigError("training dataset is empty")
    use_classes = labels is not None and cfg.model_classes > 0
    while state.step_in_stage < stage.steps:
        t0 = time.perf_counter()
        order = state.streams["order"]
        idx = order.integers(0, len(videos), size=stage.batch)
        examples = [
            draw_example(
                videos[i],
                stage,
                state.streams,
                cfg.patch_size,
                cfg.beta,
                class_id=labels[i] if use_classes else None,
            )
            for i in idx
        ]
        lr = effective_lr(stage.lr, state.step, cfg.warmup)
        loss = train_step(state, examples, lr, cfg.weight_decay)
        state.step_in_stage += 1
        if log_rows is not None:
            wall_ms = int(round((time.perf_counter() - t0) * 1000))
            log_rows.append((state.step, state.stage_index + 1, loss, wall_ms))
    return state


# -- state serialization -----------------------------------------------------


def save_train_state(path, state: TrainState, extra_meta: dict | None = None) -> None:
    extras = {}
    for name, t in state.moments_m.items():
        extras[f"adam.m.{name}"] = t.detach().cpu().numpy()
    for name, t in state.moments_v.items():
        extras[f"adam.v.{name}"] = t.detach().cpu().numpy()
    meta = {
        "step": state.step,
        "stage_index": state.stage_index,
        "step_in_stage": state.step_in_stage,
        "rng": {k: g.bit_generator.state for k, g in state.streams.items()},
    }
    meta.update(extra_meta or {})
    save_checkpoint(path, state.model, extra_tensors=extras, meta=meta)


def load_train_state(path) -> tuple[TrainState, dict]:
    model, extras, meta = load_checkpoint(path)
    moments_m, moments_v = {}, {}
    for name, p in model.named_parameters():
        m_key, v_key = f"adam.m.{name}", f"adam.v.{name}"
        if m_key not in extras or v_key not in extras:
            raise InvalidConfigError(f"checkpoint lacks optimizer state for {name!r}")
        moments_m[name] = torch.from_numpy(extras[m_key]).to(p.dtype)
        moments_v[name] = torch.from_numpy(extras[v_key]).to(p.dtype)
    streams = {}
    for name in STREAM_NAMES:
        gen = np.random.default_rng()
        gen.bit_generator.state = meta["rng"][name]
        streams[name] = gen
    state = TrainState(
        model=model,
        moments_m=moments_m,
        moments_v=moments_v,
        step=int(meta["step"]),
        stage_index=int(meta["stage_index"]),
        step_in_stage=int(meta["step_in_stage"]),
        streams=streams,
    )
    return state, meta


# -- driver -------------------------------------------------------------------


def load_labels(path) -> list[tuple[int, str]]:
    """Read 'id<TAB>name' lines; line i labels video i of the dataset."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                cid, name = line.split("\t", 1)
                out.append((int(cid), name))
            except ValueError as exc:
                raise InvalidConfigError(f"bad label line {lineno}: {line!r}") from exc
    return out


def run_training(
    cfg: TrainerConfig,
    resume: str | None = None,
    log_path: str | None = None,
) -> tuple[TrainState, str]:
    """Run all stages; returns the final state and final checkpoint path."""
    videos = read_dataset(cfg.data)
    if not videos:
        raise InvalidConfigError(f"dataset {cfg.data} contains no videos")
    labels = None
    if cfg.labels:
        pairs = load_labels(cfg.labels)
        if len(pairs) != len(videos):
            raise InvalidConfigError(
                f"{len(pairs)} labels for {len(videos)} videos"
            )
        labels = [cid for cid, _ in pairs]

    if resume:
        state, _ = load_train_state(resume)
    else:
        c, _h, _w = videos[0].frames.shape[1:]
        model_cfg = ModelConfig(
            depth=cfg.model_depth,
            width=cfg.model_width,
            heads=cfg.model_heads,
            patch_dim=c * cfg.patch_size * cfg.patch_size,
            max_frames=cfg.model_max_frames,
            class_vocab=cfg.model_classes,
            seed=cfg.seed,
        )
        state = TrainState.fresh(ClipTransformer(model_cfg), cfg.seed)

    os.makedirs(cfg.ckpt_dir, exist_ok=True)
    log_rows: list = []
    for i in range(state.stage_index, len(cfg.stages)):
        state.stage_index = i
        run_stage(state, cfg.stages[i], videos, cfg, labels=labels, log_rows=log_rows)
        state.stage_index = i + 1
        state.step_in_stage = 0
        save_train_state(
            os.path.join(cfg.ckpt_dir, f"stage_{i + 1}.nckp"),
            state,
            extra_meta={"stage": i + 1},
        )
    final_path = os.path.join(cfg.ckpt_dir, "final.nckp")
    save_train_state(final_path, state, extra_meta={"stage": len(cfg.stages)})

    if log_path:
        new_file = not os.path.exists(log_path)
        with open(log_path, "a", newline="") as f:
            writer = csv.writer(f)
            if new_file:
                writer.writerow(["step", "stage", "loss", "wall_ms"])
            for row in log_rows:
                writer.writerow([row[0], row[1], repr(row[2]), row[3]])
    return state, final_path


# -- config file --------------------------------------------------------------


def parse_config(text: str) -> TrainerConfig:
    """Parse the flat key=value training config format.

    Keys: seed, data, labels, ckpt_dir, patch, beta, warmup, weight_decay,
    model.{depth,width,heads,max_frames,classes}, stages, and per-stage
    stageN.{frames,clips,interval,steps,lr,batch} where clips is an integer
    or "uniform" and interval is "k" or "lo:hi".
    """
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidConfigError(f"config line {lineno} is not key=value: {raw!r}")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()

    def take(key: str, default=None):
        return kv.pop(key, default)

    def parse_interval(s: str) -> tuple[int, int]:
        if ":" in s:
            lo, hi = s.split(":", 1)
            return (int(lo), int(hi))
        return (int(s), int(s))

    num_stages = int(take("stages", "0"))
    if num_stages < 1:
        raise InvalidConfigError("config must declare stages >= 1")
    stages = []
    for i in range(1, num_stages + 1):
        prefix = f"stage{i}."
        frames = take(prefix + "frames")
        if frames is None:
            raise InvalidConfigError(f"missing {prefix}frames")
        clips_s = take(prefix + "clips", "uniform")
        clip_rule: int | str = clips_s if clips_s == "uniform" else int(clips_s)
        stages.append(
            StageConfig(
                num_frames=int(frames),
                clip_rule=clip_rule,
                interval=parse_interval(take(prefix + "interval", "1")),
                steps=int(take(prefix + "steps", "100")),
                lr=float(take(prefix + "lr", "1e-3")),
                batch=int(take(prefix + "batch", "2")),
            )
        )

    cfg = TrainerConfig(
        stages=tuple(stages),
        seed=int(take("seed", "0")),
        data=take("data", ""),
        labels=take("labels") or None,
        ckpt_dir=take("ckpt_dir", "."),
        patch_size=int(take("patch", "4")),
        beta=float(take("beta", "0.9")),
        warmup=int(take("warmup", "50")),
        weight_decay=float(take("weight_decay", "0.1")),
        model_depth=int(take("model.depth", "4")),
        model_width=int(take("model.width", "128")),
        model_heads=int(take("model.heads", "4")),
        model_max_frames=int(take("model.max_frames", "64")),
        model_classes=int(take("model.classes", "0")),
    )
    if kv:
        raise InvalidConfigError(f"unknown config keys: {sorted(kv)}")
    for s in cfg.stages:
        s.validate()
    if not (0.0 <= cfg.beta <= 1.0):
        raise DomainError(f"beta must lie in [0, 1], got {cfg.beta}")
    return cfg


# -- gradient check ------------------------------------------------------------


def grad_check(
    model: ClipTransformer,
    example: TrainingExample,
    h: float = 1e-5,
    corrupt: str | None = None,
) -> float:
    """Max per-group relative error, analytic vs fp64 central differences.

    Per parameter group the error is max|analytic - numeric| normalized by
    the group's largest numeric-gradient magnitude.  ``corrupt`` names a
    parameter whose analytic gradient gets a deliberate offset (negative
    control for the test harness).
    """
    m = copy.deepcopy(model).double()
    targets = torch.from_numpy(example.targets).double()

    def loss_at() -> torch.Tensor:
        preds = m.forward(example.seq, example.mask)
        return compute_loss(preds.values, targets)

    loss = loss_at()
    m.zero_grad(set_to_none=True)
    loss.backward()
    analytic = {
        name: p.grad.detach().clone() for name, p in m.named_parameters()
    }
    if corrupt is not None:
        analytic[corrupt] = analytic[corrupt] + 0.05

    worst = 0.0
    with torch.no_grad():
        for name, p in m.named_parameters():
            flat = p.view(-1)
            numeric = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_at().item()
                flat[i] = orig - h
                down = loss_at().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * h)
            numeric = numeric.view_as(p)
            scale = max(float(numeric.abs().max()), 1e-12)
            err = float((analytic[name] - numeric).abs().max()) / scale
            worst = max(worst, err)
    return worst
