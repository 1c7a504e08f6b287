"""Rollout evaluation: per-frame MSE, thresholded IoU, and baseline deltas."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, ShapeError
from .sampler import SamplerConfig, autoregress
from .videodata import VideoTensor, copy_last_frame_baseline


@dataclass
class EvalReport:
    per_frame_mse: list[float]
    mean_mse: float
    per_frame_iou: list[float]
    baseline_mean_mse: float
    relative_improvement: float  # (baseline - model) / baseline


def mse(pred: VideoTensor, truth: VideoTensor) -> np.ndarray:
    """Mean squared pixel error per frame."""
    if pred.frames.shape != truth.frames.shape:
        raise ShapeError(
            f"shape mismatch {pred.frames.shape} vs {truth.frames.shape}"
        )
    diff = pred.frames.astype(np.float64) - truth.frames.astype(np.float64)
    return (diff**2).mean(axis=(1, 2, 3))


def binary_iou(pred: VideoTensor, truth: VideoTensor, tau: float = 0.5) -> np.ndarray:
    """Per-frame IoU of the {pixel > tau} sets; empty-vs-empty counts as 1."""
    if pred.frames.shape != truth.frames.shape:
        raise ShapeError(
            f"shape mismatch {pred.frames.shape} vs {truth.frames.shape}"
        )
    a = pred.frames > tau
    b = truth.frames > tau
    inter = (a & b).sum(axis=(1, 2, 3)).astype(np.float64)
    union = (a | b).sum(axis=(1, 2, 3)).astype(np.float64)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def evaluate_rollout(
    predictor,
    videos: list[VideoTensor],
    cond_frames: int,
    horizon: int,
    cfg: SamplerConfig,
    patch_size: int = 4,
    tau: float = 0.5,
) -> tuple[EvalReport, list[tuple]]:
    """Autoregressive prediction vs ground truth on every video.

    Returns the aggregate report plus per-video CSV rows
    (video_index, frame, mse, iou, baseline_mse).
    """
    if cond_frames < 1 or horizon < 1:
        raise InvalidConfigError("cond_frames and horizon must be >= 1")
    num_clips = math.ceil(horizon / cfg.frames_per_clip)
    model_mse = np.zeros((len(videos), horizon))
    model_iou = np.zeros((len(videos), horizon))
    base_mse = np.zeros((len(videos), horizon))
    rows = []
    for vi, video in enumerate(videos):
        if video.num_frames < cond_frames + horizon:
            raise InvalidConfigError(
                f"video {vi} has {video.num_frames} frames, need "
                f"{cond_frames + horizon}"
            )
        initial = video.frames[:cond_frames]
        truth = VideoTensor(video.frames[cond_frames : cond_frames + horizon].copy())
        pred_full = autoregress(initial, num_clips, cfg, predictor, patch_size=patch_size)
        pred = VideoTensor(pred_full.frames[:horizon].copy())
        baseline = copy_last_frame_baseline(VideoTensor(initial.copy()), horizon)
        model_mse[vi] = mse(pred, truth)
        model_iou[vi] = binary_iou(pred, truth, tau)
        base_mse[vi] = mse(baseline, truth)
        for t in range(horizon):
            rows.append((vi, t, model_mse[vi, t], model_iou[vi, t], base_mse[vi, t]))

    mean_model = float(model_mse.mean())
    mean_base = float(base_mse.mean())
    improvement = (mean_base - mean_model) / mean_base if mean_base > 0 else 0.0
    report = EvalReport(
        per_frame_mse=[float(x) for x in model_mse.mean(axis=0)],
        mean_mse=mean_model,
        per_frame_iou=[float(x) for x in model_iou.mean(axis=0)],
        baseline_mean_mse=mean_base,
        relative_improvement=float(improvement),
    )
    return report, rows


def write_report_csv(path, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["video_index", "frame", "mse", "iou", "baseline_mse"])
        for vi, t, m, i, b in rows:
            writer.writerow([vi, t, repr(float(m)), repr(float(i)), repr(float(b))])
