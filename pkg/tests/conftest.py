"""Shared fixtures and independent oracles for the test suite."""

import numpy as np
import pytest
import torch

from nextclip.clipseq import Role, TokenKind

torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# Independent visibility-rule oracle.  Deliberately written as explicit case
# analysis over token metadata, with intra-frame element groups re-derived
# from ordinals and the per-frame patch count instead of token kinds, so it
# shares no code path with the production mask builder.
# ---------------------------------------------------------------------------


def _oracle_group(role, ordinal, patches_per_frame):
    if role == Role.CLEAN:
        if ordinal == 0:
            return 0  # opening boundary hint
        if ordinal == patches_per_frame + 1:
            return 2  # closing boundary hint
        return 1  # patch block
    # noisy frame: hint, then timestep, then patches
    if ordinal == 0:
        return 0
    if ordinal == 1:
        return 1
    return 2


def oracle_allowed(q, t, patches_per_frame):
    """Reference visibility decision for a (query, target) token pair."""
    if q.role == Role.EXTRA:
        if t.role != Role.EXTRA:
            return False
        return t.ordinal <= q.ordinal
    if t.role == Role.EXTRA:
        return True

    if q.role == Role.CLEAN:
        if t.role == Role.NOISY:
            return False  # clean context must never read noisy tokens
        if t.clip > q.clip:
            return False
        if t.clip < q.clip:
            return True  # whole earlier clean clips are visible
        if t.frame < q.frame:
            return True  # causal frames inside the clean clip
        if t.frame > q.frame:
            return False
        qg = _oracle_group(q.role, q.ordinal, patches_per_frame)
        tg = _oracle_group(t.role, t.ordinal, patches_per_frame)
        return tg <= qg

    # noisy query
    if t.role == Role.CLEAN:
        return t.clip < q.clip  # strictly earlier clean history only
    if t.clip != q.clip:
        return False  # other noisy clips are never visible
    if t.frame != q.frame:
        return True  # bidirectional frames inside the noisy clip
    qg = _oracle_group(q.role, q.ordinal, patches_per_frame)
    tg = _oracle_group(t.role, t.ordinal, patches_per_frame)
    return tg <= qg


def oracle_mask(seq) -> np.ndarray:
    p = seq.patches_per_frame
    toks = seq.tokens
    n = len(toks)
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            out[i, j] = oracle_allowed(toks[i], toks[j], p)
    return out


# ---------------------------------------------------------------------------
# Common helpers
# ---------------------------------------------------------------------------


def all_compositions(n, k):
    """Every ordered composition of n into k positive parts."""
    if k == 1:
        return [(n,)]
    out = []
    for first in range(1, n - k + 2):
        for rest in all_compositions(n - first, k - 1):
            out.append((first,) + rest)
    return out


def make_training_sequence(sizes, height=4, width=4, patch_size=4, seed=0, beta=0.9):
    """Random-content training sequence over the given clip sizes."""
    from nextclip.clipseq import ClipPartition, build_training_sequence
    from nextclip.videodata import VideoTensor

    rng = np.random.default_rng(seed)
    n = sum(sizes)
    frames = rng.uniform(0.0, 1.0, size=(n, 1, height, width)).astype(np.float32)
    video = VideoTensor(frames)
    alphas = rng.uniform(0.0, 1.0, size=len(sizes)).tolist()
    return build_training_sequence(
        video, ClipPartition(tuple(sizes)), alphas, patch_size, beta, rng
    )


def sensitivity_blocks(model, seq, mask, query_positions):
    """|d hidden[q] / d embedding[t]| summed over feature dims, [Q, L].

    Measures end-to-end autodiff sensitivity of final activations at the
    query positions with respect to every token's input embedding.
    """
    h0 = model.embed_sequence(seq).detach().requires_grad_(True)
    blocked = torch.from_numpy(~mask.allowed)[None]
    hidden = model._run_stack(h0[None], blocked)[0]
    rows = []
    for q in query_positions:
        grad = torch.autograd.grad(hidden[q].sum(), h0, retain_graph=True)[0]
        rows.append(grad.abs().sum(dim=1))
    return torch.stack(rows)


@pytest.fixture
def tiny_model():
    from nextclip.model import ClipTransformer, ModelConfig

    return ClipTransformer(
        ModelConfig(depth=2, width=16, heads=2, patch_dim=16, max_frames=16, seed=7)
    )
