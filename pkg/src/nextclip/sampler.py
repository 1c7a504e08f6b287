"""Clip-by-clip autoregressive sampling.

One clip is denoised by integrating the straight-line probability flow from
pure noise (retention 0) to data (retention 1) on a uniform schedule
a_j = j/m.  The model predicts the clean clip directly, so the velocity is
(x0_hat - psi) / (1 - a); the final step snaps to x0_hat when 1 - a
underflows.  Guidance contrasts the history-conditioned prediction with the
same noisy clip re-presented as a first clip with no history:

    x0 = uncond + c * (cond - uncond)

Rollout appends each denoised clip to the clean history and repeats; clean
history is never re-corrupted at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clipseq import TokenSequence, build_inference_sequence, unpatchify
from .errors import DomainError, NumericalError, ShapeError
from .maskgen import build_inference_mask
from .model import ClipTransformer
from .videodata import VideoTensor

SNAP_EPS = 1e-6


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 10
    cfg_scale: float = 3.0
    frames_per_clip: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise DomainError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise DomainError("cfg scale must be >= 0")
        if self.frames_per_clip < 1:
            raise DomainError("frames per clip must be >= 1")


def euler_step(
    psi: np.ndarray, x0_hat: np.ndarray, alpha_j: float, alpha_next: float
) -> np.ndarray:
    """Advance the flow state from retention alpha_j to alpha_next."""
    if not (0.0 <= alpha_j < alpha_next <= 1.0):
        raise DomainError(
            f"need 0 <= alpha_j < alpha_next <= 1, got ({alpha_j}, {alpha_next})"
        )
    if 1.0 - alpha_j < SNAP_EPS:
        return np.array(x0_hat, copy=True)
    return psi + (alpha_next - alpha_j) * (x0_hat - psi) / (1.0 - alpha_j)


def cfg_combine(cond: np.ndarray, uncond: np.ndarray, scale: float) -> np.ndarray:
    """Standard guidance blend; exact passthrough at scale 0 and 1."""
    if scale == 0.0:
        return np.array(uncond, copy=True)
    if scale == 1.0:
        return np.array(cond, copy=True)
    return uncond + scale * (cond - uncond)


class HistoryPredictor:
    """Model-backed clean-clip predictor with optional class conditioning."""

    def __init__(self, model: ClipTransformer, class_id: int | None = None):
        self.model = model
        self.class_id = class_id

    def _prepare(self, seq: TokenSequence) -> TokenSequence:
        if self.class_id is not None:
            from .condition import prefix_class_tokens

            seq = prefix_class_tokens(seq, self.class_id, vocab=self.model.config.class_vocab)
        return seq

    def predict_batch(self, seqs: list[TokenSequence]) -> list[np.ndarray]:
        seqs = [self._prepare(s) for s in seqs]
        masks = [build_inference_mask(s) for s in seqs]
        preds = self.model.forward_batch(seqs, masks)
        return [p.as_array() for p in preds]


def sample_clip(
    history: list[np.ndarray],
    cfg: SamplerConfig,
    predictor,
    rng: np.random.Generator | None = None,
    geometry: tuple[int, int, int] | None = None,
    patch_size: int = 4,
    num_frames: int | None = None,
) -> np.ndarray:
    """Denoise one clip of ``num_frames`` frames conditioned on clean history.

    Returns pixels [n, C, H, W] clamped to [0, 1].  ``predictor`` must expose
    ``predict_batch(seqs) -> [n_noisy_patch, D] arrays``; the two guidance
    branches share one noise trajectory and are evaluated as a single batch.
    """
    cfg.validate()
    n = num_frames if num_frames is not None else cfg.frames_per_clip
    if n < 1:
        raise DomainError("clip must contain at least one frame")
    if history:
        c, h, w = history[0].shape[1:]
    elif geometry is not None:
        c, h, w = geometry
    else:
        raise ShapeError("geometry (C, H, W) required when history is empty")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    pp = (h // patch_size) * (w // patch_size)
    dd = c * patch_size * patch_size

    psi = rng.standard_normal((n, pp, dd))  # float64 flow state at retention 0
    m = cfg.steps
    for j in range(m):
        a_j = j / m
        a_next = (j + 1) / m
        cond_seq = build_inference_sequence(
            history, n, a_j, patch_size,
            noisy_patches=psi.astype(np.float32),
            geometry=(c, h, w),
        )
        try:
            if history:
                uncond_seq = build_inference_sequence(
                    [], n, a_j, patch_size,
                    noisy_patches=psi.astype(np.float32),
                    geometry=(c, h, w),
                )
                cond_flat, uncond_flat = predictor.predict_batch([cond_seq, uncond_seq])
                x0 = cfg_combine(
                    cond_flat.astype(np.float64),
                    uncond_flat.astype(np.float64),
                    cfg.cfg_scale,
                )
            else:
                # No history: the two branches coincide and guidance is inert.
                (cond_flat,) = predictor.predict_batch([cond_seq])
                x0 = cond_flat.astype(np.float64)
        except NumericalError as exc:
            raise NumericalError(
                f"model failure at flow step {j}/{m}: {exc.message}", layer=exc.layer
            ) from exc
        psi = euler_step(psi, x0.reshape(n, pp, dd), a_j, a_next)

    frames = np.stack(
        [unpatchify(psi[i], patch_size, c, h, w) for i in range(n)]
    )
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def autoregress(
    initial_clip: np.ndarray,
    num_future_clips: int,
    cfg: SamplerConfig,
    predictor,
    patch_size: int = 4,
    fps_hint: int = 8,
) -> VideoTensor:
    """Roll the sampler forward clip by clip; the initial clip is excluded.

    The history grows by one denoised clip per iteration, so the sequence the
    model sees lengthens accordingly.
    """
    initial_clip = np.asarray(initial_clip, dtype=np.float32)
    if initial_clip.ndim != 4 or initial_clip.shape[0] < 1:
        raise ShapeError(f"initial clip must be [n, C, H, W], got {initial_clip.shape}")
    if num_future_clips < 0:
        raise DomainError("num_future_clips must be >= 0")
    c, h, w = initial_clip.shape[1:]
    rng = np.random.default_rng(cfg.seed)
    history = [initial_clip]
    generated = []
    for _ in range(num_future_clips):
        clip = sample_clip(
            history, cfg, predictor, rng=rng, geometry=(c, h, w), patch_size=patch_size
        )
        history.append(clip)
        generated.append(clip)
    if generated:
        frames = np.concatenate(generated, axis=0)
    else:
        frames = np.zeros((0, c, h, w), dtype=np.float32)
    return VideoTensor(frames, fps_hint=fps_hint)
