"""Class conditioning and linear probing on pooled clip features.

Class-to-video conditioning prefixes one learned extra token per class; the
extended mask keeps extras causal among themselves while every clip token
may read them.  For classification, a frozen backbone encodes each video as
the mean final-layer activation over one all-clean clip, and a multinomial
logistic probe is fit on those features by full-batch gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .clipseq import Role, Token, TokenKind, TokenSequence
from .errors import InvalidConfigError, ShapeError
from .maskgen import build_training_mask
from .model import ClipTransformer
from .videodata import VideoTensor


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str = ""


@dataclass
class LinearProbe:
    weight: np.ndarray  # [vocab, d]
    bias: np.ndarray  # [vocab]


def prefix_class_tokens(
    seq: TokenSequence, label: int | ClassLabel, vocab: int | None = None
) -> TokenSequence:
    """Prefix one extra class token; rejects unconditional vocabularies."""
    cid = label.id if isinstance(label, ClassLabel) else int(label)
    if vocab is not None:
        if vocab == 0:
            raise InvalidConfigError("model is unconditional (class vocabulary is 0)")
        if not (0 <= cid < vocab):
            raise InvalidConfigError(f"class id {cid} outside vocabulary of {vocab}")
    elif cid < 0:
        raise InvalidConfigError(f"class id must be >= 0, got {cid}")
    extra = Token(TokenKind.CLASS, Role.EXTRA, clip=0, frame=-1, ordinal=0, class_id=cid)
    return TokenSequence(
        [extra] + list(seq.tokens),
        channels=seq.channels,
        height=seq.height,
        width=seq.width,
        patch_size=seq.patch_size,
    )


def build_clean_sequence(video: VideoTensor, patch_size: int) -> TokenSequence:
    """One clean clip holding the whole video (used for feature pooling)."""
    from .clipseq import _clean_frame_tokens, patchify

    tokens: list[Token] = []
    for i, frame in enumerate(video.frames):
        tokens.extend(_clean_frame_tokens(patchify(frame, patch_size, clip=1, frame_index=i)))
    c, h, w = video.frames.shape[1:]
    return TokenSequence(tokens, channels=c, height=h, width=w, patch_size=patch_size)


def pooled_features(
    model: ClipTransformer, videos: list[VideoTensor], patch_size: int
) -> np.ndarray:
    """Frozen-backbone feature per video: pooled clean-clip activations."""
    feats = []
    with torch.no_grad():
        for v in videos:
            seq = build_clean_sequence(v, patch_size)
            mask = build_training_mask(seq)
            feats.append(model.pool_clip_features(seq, mask, clip=1).cpu().numpy())
    return np.stack(feats)


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    epochs: int = 500,
    lr: float = 0.5,
    l2: float = 1e-4,
) -> LinearProbe:
    """Multinomial logistic regression by full-batch gradient descent.

    Zero initialization, so the fit is deterministic with no randomness.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ShapeError(f"features {x.shape} vs labels {y.shape}")
    if num_classes < 2:
        raise InvalidConfigError("probe needs at least 2 classes")
    if y.min() < 0 or y.max() >= num_classes:
        raise InvalidConfigError("label outside class range")
    n, d = x.shape
    w = np.zeros((num_classes, d))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(epochs):
        logits = x @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        w -= lr * (err.T @ x + l2 * w)
        b -= lr * err.sum(axis=0)
    return LinearProbe(w.astype(np.float32), b.astype(np.float32))


def classify(probe: LinearProbe, feature: np.ndarray) -> int:
    """Argmax class; ties break toward the lowest id."""
    scores = probe.weight @ np.asarray(feature, dtype=np.float32) + probe.bias
    return int(np.argmax(scores))


def probe_accuracy(probe: LinearProbe, features: np.ndarray, labels: np.ndarray) -> float:
    preds = [classify(probe, f) for f in features]
    return float(np.mean([p == y for p, y in zip(preds, labels)]))
