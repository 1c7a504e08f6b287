"""Clip partitioning, per-clip noising, and interleaved token sequences.

A video of N frames is split into K ordered clips.  Every clip is corrupted
toward Gaussian noise along the straight-line path psi = a*phi + (1-a)*eps
with one retention weight ``a`` per clip, and the model input interleaves the
noisy and clean copies in temporal order:

    NS(1), CL(1), NS(2), CL(2), ..., NS(K)        (no clean copy of clip K)

Each clean frame is the token triple [IMG_OPEN, P patch tokens, IMG_CLOSE];
each noisy frame is [DIFF, ALPHA, P patch tokens].  Frame indices stored on
tokens are global (position in the sampled video), and the noisy and clean
copies of a frame share the same index so positional codes coincide.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InvalidPartitionError, ShapeError
from .videodata import VideoTensor


class TokenKind(enum.IntEnum):
    IMG_OPEN = 0
    IMG_CLOSE = 1
    DIFF = 2
    ALPHA = 3
    PATCH = 4
    CLASS = 5  # extra-token prefix used by class conditioning


class Role(enum.IntEnum):
    CLEAN = 0
    NOISY = 1
    EXTRA = 2


# Intra-frame attention groups: hint-open < payload < hint-close for clean
# frames, hint < timestep < payload for noisy frames.  Patch tokens of one
# frame share a group, which makes them mutually visible.
_GROUP = {
    TokenKind.IMG_OPEN: 0,
    TokenKind.DIFF: 0,
    TokenKind.ALPHA: 1,
    TokenKind.IMG_CLOSE: 2,
}


def token_group(kind: TokenKind, role: Role) -> int:
    if kind == TokenKind.PATCH:
        return 1 if role == Role.CLEAN else 2
    return _GROUP.get(kind, 0)


@dataclass
class Token:
    kind: TokenKind
    role: Role
    clip: int  # 1-based clip index; 0 for extra tokens
    frame: int  # global frame index; -1 for extra tokens
    ordinal: int  # position within the frame block; extra-prefix index for extras
    payload: np.ndarray | None = None  # patch vector for PATCH tokens
    alpha: float = 0.0  # retention weight, ALPHA tokens only
    class_id: int = -1  # CLASS tokens only

    @property
    def group(self) -> int:
        return token_group(self.kind, self.role)

    @property
    def patch_index(self) -> int:
        """0-based patch position within the frame (-1 for non-patch tokens)."""
        if self.kind != TokenKind.PATCH:
            return -1
        return self.ordinal - 1 if self.role == Role.CLEAN else self.ordinal - 2


@dataclass
class TokenSequence:
    tokens: list[Token]
    channels: int
    height: int
    width: int
    patch_size: int
    _meta: dict | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def patches_per_frame(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def grid_width(self) -> int:
        return self.width // self.patch_size

    def meta_arrays(self) -> dict:
        """Columnar view of token metadata (cached) for vectorized consumers."""
        if self._meta is None:
            toks = self.tokens
            n = len(toks)
            payload = np.zeros((n, self.patch_dim), dtype=np.float32)
            for i, t in enumerate(toks):
                if t.payload is not None:
                    payload[i] = t.payload
            self._meta = {
                "kind": np.array([t.kind for t in toks], dtype=np.int64),
                "role": np.array([t.role for t in toks], dtype=np.int64),
                "clip": np.array([t.clip for t in toks], dtype=np.int64),
                "frame": np.array([t.frame for t in toks], dtype=np.int64),
                "ordinal": np.array([t.ordinal for t in toks], dtype=np.int64),
                "group": np.array([t.group for t in toks], dtype=np.int64),
                "patch_index": np.array([t.patch_index for t in toks], dtype=np.int64),
                "alpha": np.array([t.alpha for t in toks], dtype=np.float32),
                "class_id": np.array([t.class_id for t in toks], dtype=np.int64),
                "payload": payload,
            }
        return self._meta

    def noisy_patch_positions(self) -> list[int]:
        return [
            i
            for i, t in enumerate(self.tokens)
            if t.kind == TokenKind.PATCH and t.role == Role.NOISY
        ]


@dataclass(frozen=True)
class ClipPartition:
    sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.sizes) < 1 or any(s < 1 for s in self.sizes):
            raise InvalidPartitionError(f"clip sizes must be positive: {self.sizes}")

    @property
    def num_clips(self) -> int:
        return len(self.sizes)

    @property
    def num_frames(self) -> int:
        return sum(self.sizes)

    def clip_slices(self) -> list[slice]:
        out, start = [], 0
        for s in self.sizes:
            out.append(slice(start, start + s))
            start += s
        return out


@dataclass
class LatentFrame:
    patches: np.ndarray  # [P, D]
    clip: int
    frame: int


@dataclass
class NoisyFrame:
    patches: np.ndarray  # [P, D]
    alpha: float
    clip: int
    frame: int


def partition_frames(num_frames: int, num_clips: int, rng: np.random.Generator) -> ClipPartition:
    """Uniformly random composition of ``num_frames`` into ``num_clips`` parts.

    Sampled by choosing num_clips-1 of the num_frames-1 gaps between frames,
    which is a bijection onto compositions, hence exactly uniform.
    """
    if num_clips < 1 or num_clips > num_frames:
        raise InvalidPartitionError(
            f"cannot split {num_frames} frames into {num_clips} clips"
        )
    if num_clips == 1:
        return ClipPartition((num_frames,))
    cuts = np.sort(rng.choice(num_frames - 1, size=num_clips - 1, replace=False)) + 1
    bounds = np.concatenate(([0], cuts, [num_frames]))
    return ClipPartition(tuple(int(b - a) for a, b in zip(bounds[:-1], bounds[1:])))


def patchify(frame: np.ndarray, patch_size: int, clip: int = 0, frame_index: int = 0) -> LatentFrame:
    """Split [C, H, W] into non-overlapping patches -> [P, D], row-major.

    Patch order scans the grid row-major; within a patch, values are laid out
    channel-major then row-major, so D = C * p * p.
    """
    frame = np.asarray(frame)
    if frame.ndim != 3:
        raise ShapeError(f"expected [C, H, W] frame, got shape {frame.shape}")
    c, h, w = frame.shape
    p = patch_size
    if p < 1 or h % p != 0 or w % p != 0:
        raise ShapeError(f"patch size {p} does not divide frame {h}x{w}")
    gh, gw = h // p, w // p
    x = frame.reshape(c, gh, p, gw, p)
    x = x.transpose(1, 3, 0, 2, 4)  # [gh, gw, C, p, p]
    patches = x.reshape(gh * gw, c * p * p)
    return LatentFrame(np.ascontiguousarray(patches), clip=clip, frame=frame_index)


def unpatchify(latent: LatentFrame | np.ndarray, patch_size: int, channels: int, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`patchify`; returns the [C, H, W] frame."""
    patches = latent.patches if isinstance(latent, LatentFrame) else np.asarray(latent)
    p = patch_size
    gh, gw = height // p, width // p
    if patches.shape != (gh * gw, channels * p * p):
        raise ShapeError(
            f"patch matrix {patches.shape} inconsistent with "
            f"{channels}x{height}x{width} at patch size {p}"
        )
    x = patches.reshape(gh, gw, channels, p, p)
    x = x.transpose(2, 0, 3, 1, 4)  # [C, gh, p, gw, p]
    return np.ascontiguousarray(x.reshape(channels, height, width))


def forward_diffuse(
    clip: list[LatentFrame], alpha: float, rng: np.random.Generator
) -> list[NoisyFrame]:
    """Blend each frame toward noise: psi = alpha*phi + (1-alpha)*eps, eps ~ N(0, I).

    One shared alpha for every frame of the clip; fresh noise per element.
    """
    if not (0.0 <= alpha <= 1.0):
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    a = np.float32(alpha)
    out = []
    for lf in clip:
        eps = rng.standard_normal(lf.patches.shape).astype(np.float32)
        psi = a * lf.patches + (np.float32(1.0) - a) * eps
        out.append(NoisyFrame(psi, alpha=float(alpha), clip=lf.clip, frame=lf.frame))
    return out


def corrupt_clean(
    clip: list[LatentFrame], beta: float, rng: np.random.Generator
) -> list[LatentFrame]:
    """Lightly noise clean conditioning frames (training only).

    Per frame the retention coefficient is beta + gamma with
    gamma ~ Uniform[0, 1-beta], so the output stays a convex combination
    (beta+gamma)*phi + (1-beta-gamma)*eps with coefficient in [beta, 1].
    """
    if not (0.0 <= beta <= 1.0):
        raise DomainError(f"beta must lie in [0, 1], got {beta}")
    out = []
    for lf in clip:
        gamma = rng.uniform(0.0, 1.0 - beta)
        keep = np.float32(beta + gamma)
        eps = rng.standard_normal(lf.patches.shape).astype(np.float32)
        noised = keep * lf.patches + (np.float32(1.0) - keep) * eps
        out.append(LatentFrame(noised, clip=lf.clip, frame=lf.frame))
    return out


def _clean_frame_tokens(lf: LatentFrame) -> list[Token]:
    toks = [Token(TokenKind.IMG_OPEN, Role.CLEAN, lf.clip, lf.frame, 0)]
    for j, vec in enumerate(lf.patches):
        toks.append(Token(TokenKind.PATCH, Role.CLEAN, lf.clip, lf.frame, j + 1, payload=vec))
    toks.append(Token(TokenKind.IMG_CLOSE, Role.CLEAN, lf.clip, lf.frame, len(lf.patches) + 1))
    return toks


def _noisy_frame_tokens(nf: NoisyFrame) -> list[Token]:
    toks = [
        Token(TokenKind.DIFF, Role.NOISY, nf.clip, nf.frame, 0),
        Token(TokenKind.ALPHA, Role.NOISY, nf.clip, nf.frame, 1, alpha=nf.alpha),
    ]
    for j, vec in enumerate(nf.patches):
        toks.append(Token(TokenKind.PATCH, Role.NOISY, nf.clip, nf.frame, j + 2, payload=vec, alpha=nf.alpha))
    return toks


def build_training_sequence(
    video: VideoTensor,
    part: ClipPartition,
    alphas: list[float],
    patch_size: int,
    beta: float,
    rng: np.random.Generator,
) -> TokenSequence:
    """Interleaved training input: NS(1), CL(1), ..., NS(K-1), CL(K-1), NS(K).

    Noisy payloads come from :func:`forward_diffuse` at the clip's alpha;
    clean payloads from :func:`corrupt_clean`.  RNG order is per clip:
    noisy draw first, then the clean corruption for the same clip.
    """
    n, c, h, w = video.frames.shape
    if part.num_frames != n:
        raise InvalidPartitionError(
            f"partition covers {part.num_frames} frames, video has {n}"
        )
    if len(alphas) != part.num_clips:
        raise DomainError(f"need {part.num_clips} alphas, got {len(alphas)}")

    k_total = part.num_clips
    blocks: list[list[Token]] = []
    for k, sl in enumerate(part.clip_slices(), start=1):
        latents = [
            patchify(video.frames[i], patch_size, clip=k, frame_index=i)
            for i in range(sl.start, sl.stop)
        ]
        noisy = forward_diffuse(latents, alphas[k - 1], rng)
        noisy_toks: list[Token] = []
        for nf in noisy:
            noisy_toks.extend(_noisy_frame_tokens(nf))
        blocks.append(noisy_toks)
        if k < k_total:
            clean = corrupt_clean(latents, beta, rng)
            clean_toks: list[Token] = []
            for lf in clean:
                clean_toks.extend(_clean_frame_tokens(lf))
            blocks.append(clean_toks)

    tokens = [t for block in blocks for t in block]
    return TokenSequence(tokens, channels=c, height=h, width=w, patch_size=patch_size)


def build_inference_sequence(
    history: list[np.ndarray],
    next_clip_len: int,
    alpha: float,
    patch_size: int,
    rng: np.random.Generator | None = None,
    noisy_patches: np.ndarray | None = None,
    geometry: tuple[int, int, int] | None = None,
) -> TokenSequence:
    """Causal inference input: CL(1), ..., CL(k), NS(k+1).

    ``history`` is a list of clean clips, each an [n_i, C, H, W] array; clean
    payloads are used as-is (no corruption outside training).  The noisy
    block carries ``noisy_patches`` ([next_clip_len, P, D], the sampler's
    current state) or, when absent, fresh standard-normal draws from ``rng``.
    ``geometry`` = (C, H, W) is required when the history is empty.
    """
    if not (0.0 <= alpha <= 1.0):
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    if next_clip_len < 1:
        raise DomainError("next clip must contain at least one frame")
    if history:
        c, h, w = history[0].shape[1:]
    elif geometry is not None:
        c, h, w = geometry
    else:
        raise ShapeError("geometry (C, H, W) required when history is empty")
    pp = (h // patch_size) * (w // patch_size)
    dd = c * patch_size * patch_size

    tokens: list[Token] = []
    frame_idx = 0
    for k, clip_frames in enumerate(history, start=1):
        for frame in clip_frames:
            lf = patchify(frame, patch_size, clip=k, frame_index=frame_idx)
            tokens.extend(_clean_frame_tokens(lf))
            frame_idx += 1

    noisy_clip = len(history) + 1
    if noisy_patches is None:
        if rng is None:
            raise DomainError("rng required when noisy_patches is not supplied")
        noisy_patches = rng.standard_normal((next_clip_len, pp, dd)).astype(np.float32)
    noisy_patches = np.asarray(noisy_patches, dtype=np.float32)
    if noisy_patches.shape != (next_clip_len, pp, dd):
        raise ShapeError(
            f"noisy patches {noisy_patches.shape} != {(next_clip_len, pp, dd)}"
        )
    for i in range(next_clip_len):
        nf = NoisyFrame(noisy_patches[i], alpha=float(alpha), clip=noisy_clip, frame=frame_idx)
        tokens.extend(_noisy_frame_tokens(nf))
        frame_idx += 1

    return TokenSequence(tokens, channels=c, height=h, width=w, patch_size=patch_size)


def sequence_token_count(sizes: tuple[int, ...], patches_per_frame: int) -> int:
    """Closed-form length of a training sequence over the given clip sizes."""
    per_frame = patches_per_frame + 2
    noisy = sum(sizes) * per_frame
    clean = sum(sizes[:-1]) * per_frame
    return noisy + clean
