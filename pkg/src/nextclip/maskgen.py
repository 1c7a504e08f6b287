"""Hierarchical attention mask over interleaved clip sequences.

Visibility is the conjunction of three levels:

  clip level   - clean queries see clean clips up to their own; noisy queries
                 see strictly earlier clean clips plus their own noisy clip.
                 Noisy never sees noisy history, clean never sees noisy at all.
  frame level  - within a clean clip, frames are causal; within a noisy clip,
                 frames are fully bidirectional.  Frames of earlier (clean)
                 clips are visible in full.
  patch level  - within one frame the element groups are causal
                 (open-hint < patches < close-hint for clean frames,
                 hint < timestep < patches for noisy frames) and the patch
                 group itself is fully bidirectional.  Across distinct frames
                 no patch-level constraint applies.

Extra tokens (class prefix) are causal among themselves and invisible to
nothing below them: every clip token sees all extras, extras see no clip
tokens.  Masks are materialized as explicit boolean matrices; entry (q, t)
true means query q may attend target t.
"""

from __future__ import annotations

import numpy as np

from .clipseq import Role, Token, TokenSequence


def allowed(q: Token, t: Token) -> bool:
    """Pairwise visibility rule for two tokens of one sequence."""
    if q.role == Role.EXTRA:
        return t.role == Role.EXTRA and t.ordinal <= q.ordinal
    if t.role == Role.EXTRA:
        return True

    # Clip level.
    if q.role == Role.CLEAN:
        if t.role != Role.CLEAN or t.clip > q.clip:
            return False
    else:  # noisy query
        if t.role == Role.CLEAN:
            if t.clip >= q.clip:
                return False
        elif t.clip != q.clip:
            return False

    # Frame level (same clip and same role only; earlier clips are fully open).
    if t.clip == q.clip and t.role == q.role:
        if q.role == Role.CLEAN and t.frame > q.frame:
            return False
        # Patch level applies within one frame.
        if t.frame == q.frame and t.group > q.group:
            return False
    return True


def _pairwise_mask(meta: dict) -> np.ndarray:
    role = meta["role"]
    clip = meta["clip"]
    frame = meta["frame"]
    group = meta["group"]
    ordinal = meta["ordinal"]

    q_clean = (role == Role.CLEAN)[:, None]
    q_noisy = (role == Role.NOISY)[:, None]
    q_extra = (role == Role.EXTRA)[:, None]
    t_clean = (role == Role.CLEAN)[None, :]
    t_noisy = (role == Role.NOISY)[None, :]
    t_extra = (role == Role.EXTRA)[None, :]

    clip_le = clip[None, :] <= clip[:, None]
    clip_lt = clip[None, :] < clip[:, None]
    clip_eq = clip[None, :] == clip[:, None]

    ok = np.zeros((len(role), len(role)), dtype=bool)
    ok |= q_clean & t_clean & clip_le
    ok |= q_noisy & t_clean & clip_lt
    ok |= q_noisy & t_noisy & clip_eq

    same_block = clip_eq & (role[None, :] == role[:, None])
    frame_violation = q_clean & same_block & (frame[None, :] > frame[:, None])
    ok &= ~frame_violation

    same_frame = same_block & (frame[None, :] == frame[:, None])
    group_violation = same_frame & (group[None, :] > group[:, None])
    ok &= ~group_violation

    # Extra tokens: causal prefix among themselves, visible to every clip token.
    extra_rule = t_extra & (ordinal[None, :] <= ordinal[:, None])
    ok = np.where(q_extra, extra_rule, ok)
    ok |= ~q_extra & t_extra
    return ok


class AttentionMask:
    """L x L boolean visibility matrix indexed (query, target)."""

    def __init__(self, allowed_matrix: np.ndarray):
        m = np.asarray(allowed_matrix, dtype=bool)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"mask must be square, got {m.shape}")
        self.allowed = m

    def __len__(self) -> int:
        return self.allowed.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(
            self.allowed, other.allowed
        )

    def restrict(self, indices) -> "AttentionMask":
        idx = np.asarray(indices, dtype=np.int64)
        return AttentionMask(self.allowed[np.ix_(idx, idx)])

    def to_ascii(self) -> str:
        return "\n".join("".join("1" if v else "0" for v in row) for row in self.allowed)

    def to_pgm(self) -> bytes:
        """Binary PGM (P5, maxval 255); 255 = allowed, 0 = blocked."""
        h, w = self.allowed.shape
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        return header + (self.allowed.astype(np.uint8) * 255).tobytes()


def build_training_mask(seq: TokenSequence) -> AttentionMask:
    return AttentionMask(_pairwise_mask(seq.meta_arrays()))


def build_inference_mask(seq: TokenSequence) -> AttentionMask:
    # Same pairwise rule; an inference sequence is the clean-history prefix
    # plus one trailing noisy block, so this equals the training mask
    # restricted to those blocks.
    return AttentionMask(_pairwise_mask(seq.meta_arrays()))


def extend_mask_with_extras(mask: AttentionMask, num_extras: int) -> AttentionMask:
    """Prefix ``num_extras`` rows/columns following the extra-token rule."""
    if num_extras < 0:
        raise ValueError("num_extras must be >= 0")
    e = num_extras
    n = len(mask)
    out = np.zeros((e + n, e + n), dtype=bool)
    out[e:, e:] = mask.allowed
    out[:e, :e] = np.tril(np.ones((e, e), dtype=bool))
    out[e:, :e] = True
    return AttentionMask(out)
