"""Vanilla pre-norm transformer over clip token sequences.

The attention mask is supplied externally (see :mod:`nextclip.maskgen`);
blocked pairs get the most-negative finite logit before softmax, which makes
their post-softmax weight exactly zero, so the leakage-freedom property holds
bit-exactly, not just approximately.

Input embedding per token kind:
  PATCH(clean)  clean-input projection of the payload
  PATCH(noisy)  noisy-input projection of the payload
  IMG_OPEN / IMG_CLOSE / DIFF   learned hint embeddings
  ALPHA         sinusoidal features of the retention weight -> learned linear
  CLASS         learned per-class embedding (extra-token prefix)

Positions are additive sinusoidal codes built from (global frame index,
patch row, patch col); the noisy and clean copies of a frame share the same
frame index, so swapping a denoised clip into the history keeps positions
identical between training and inference.  Hint and ALPHA tokens take their
frame's first position (row 0, col 0); extra tokens carry no position.

The output head reads only noisy PATCH positions and regresses the clean
patch vector directly (x0 prediction), with no squashing.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .clipseq import Role, TokenKind, TokenSequence
from .errors import CheckpointError, InvalidConfigError, NumericalError, ShapeError
from .maskgen import AttentionMask

CHECKPOINT_MAGIC = b"NCKP"
CHECKPOINT_VERSION = 1

ALPHA_FEATURES = 64
_ALPHA_SCALE = 1000.0  # maps [0, 1] onto the usual sinusoidal timestep range

_HINT_ROW = {TokenKind.IMG_OPEN: 0, TokenKind.IMG_CLOSE: 1, TokenKind.DIFF: 2}


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    patch_dim: int = 16
    max_frames: int = 64
    class_vocab: int = 0
    seed: int = 0
    mlp_ratio: int = 4

    def validate(self) -> None:
        if min(self.depth, self.width, self.heads, self.patch_dim, self.max_frames) < 1:
            raise InvalidConfigError("all model dimensions must be positive")
        if self.width % self.heads != 0:
            raise InvalidConfigError(
                f"width {self.width} not divisible by heads {self.heads}"
            )
        if self.class_vocab < 0:
            raise InvalidConfigError("class_vocab must be >= 0")


def _sinusoid_table(num_pos: int, dim: int) -> np.ndarray:
    """Standard sin/cos position table, shape [num_pos, dim]."""
    table = np.zeros((num_pos, dim), dtype=np.float64)
    half = dim // 2
    if half == 0:
        return table.astype(np.float32)
    pos = np.arange(num_pos, dtype=np.float64)[:, None]
    div = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    table[:, 0 : 2 * half : 2] = np.sin(pos * div)
    table[:, 1 : 2 * half : 2] = np.cos(pos * div)
    return table.astype(np.float32)


def alpha_features(alpha: np.ndarray) -> np.ndarray:
    """Sinusoidal features of retention weights, shape [n, ALPHA_FEATURES]."""
    a = np.asarray(alpha, dtype=np.float64).reshape(-1, 1) * _ALPHA_SCALE
    half = ALPHA_FEATURES // 2
    div = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    return np.concatenate([np.sin(a * div), np.cos(a * div)], axis=1).astype(np.float32)


@dataclass
class Predictions:
    """Clean-patch estimates at the noisy PATCH positions of one sequence."""

    positions: list[int]
    values: torch.Tensor  # [len(positions), patch_dim]

    def as_array(self) -> np.ndarray:
        return self.values.detach().cpu().numpy()


class Block(torch.nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.ln1 = torch.nn.LayerNorm(width)
        self.wq = torch.nn.Linear(width, width)
        self.wk = torch.nn.Linear(width, width)
        self.wv = torch.nn.Linear(width, width)
        self.wo = torch.nn.Linear(width, width)
        self.ln2 = torch.nn.LayerNorm(width)
        self.fc1 = torch.nn.Linear(width, mlp_ratio * width)
        self.fc2 = torch.nn.Linear(mlp_ratio * width, width)

    def forward(self, h: torch.Tensor, blocked: torch.Tensor) -> torch.Tensor:
        # h: [B, L, d]; blocked: [B, L, L] bool, True where attention is forbidden.
        b, length, width = h.shape
        a = self.ln1(h)
        q = self.wq(a).view(b, length, self.heads, self.head_dim).transpose(1, 2)
        k = self.wk(a).view(b, length, self.heads, self.head_dim).transpose(1, 2)
        v = self.wv(a).view(b, length, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / (self.head_dim**0.5)
        scores = scores.masked_fill(blocked[:, None, :, :], torch.finfo(h.dtype).min)
        att = torch.softmax(scores, dim=-1)
        o = (att @ v).transpose(1, 2).reshape(b, length, width)
        h = h + self.wo(o)
        m = self.ln2(h)
        h = h + self.fc2(torch.nn.functional.gelu(self.fc1(m)))
        return h


class ClipTransformer(torch.nn.Module):
    """Denoising transformer over interleaved noisy/clean clip sequences."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.width
        self.hint_embed = torch.nn.Embedding(3, d)
        self.alpha_proj = torch.nn.Linear(ALPHA_FEATURES, d)
        self.clean_in = torch.nn.Linear(config.patch_dim, d)
        self.noisy_in = torch.nn.Linear(config.patch_dim, d)
        self.class_embed = (
            torch.nn.Embedding(config.class_vocab, d) if config.class_vocab > 0 else None
        )
        self.blocks = torch.nn.ModuleList(
            Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.final_ln = torch.nn.LayerNorm(d)
        self.out_proj = torch.nn.Linear(d, config.patch_dim)
        self._init_weights()

    def _init_weights(self) -> None:
        # Scaled-normal projections/embeddings, unit LayerNorm, zero biases
        # (including the output head bias); deterministic in config.seed.
        gen = torch.Generator().manual_seed(self.config.seed)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            with torch.no_grad():
                if p.ndim >= 2 or "embed" in name:
                    p.normal_(mean=0.0, std=0.02, generator=gen)
                elif name.endswith(".weight"):  # LayerNorm scales
                    p.fill_(1.0)
                else:
                    p.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.out_proj.weight.dtype

    # -- embedding ---------------------------------------------------------

    def _positions(self, seq: TokenSequence) -> np.ndarray:
        """Additive positional code per token, [L, width] fp32."""
        meta = seq.meta_arrays()
        frame = meta["frame"]
        if frame.max(initial=0) >= self.config.max_frames:
            raise ShapeError(
                f"frame index {int(frame.max())} >= max_frames "
                f"{self.config.max_frames}"
            )
        d = self.config.width
        d_frame = d // 2
        d_row = d // 4
        d_col = d - d_frame - d_row
        grid_w = seq.grid_width
        patch = meta["patch_index"]
        row = np.where(patch >= 0, patch // max(grid_w, 1), 0)
        col = np.where(patch >= 0, patch % max(grid_w, 1), 0)

        n_rows = seq.height // seq.patch_size
        frame_tab = _sinusoid_table(self.config.max_frames, d_frame)
        row_tab = _sinusoid_table(max(n_rows, 1), d_row)
        col_tab = _sinusoid_table(max(grid_w, 1), d_col)
        code = np.concatenate(
            [
                frame_tab[np.maximum(frame, 0)],
                row_tab[row],
                col_tab[col],
            ],
            axis=1,
        )
        code[meta["role"] == Role.EXTRA] = 0.0  # extras carry no position
        return code

    def embed_sequence(self, seq: TokenSequence) -> torch.Tensor:
        """Token embeddings plus positional codes, [L, width]."""
        meta = seq.meta_arrays()
        if seq.patch_dim != self.config.patch_dim:
            raise ShapeError(
                f"sequence patch dim {seq.patch_dim} != model {self.config.patch_dim}"
            )
        kind = meta["kind"]
        role = meta["role"]
        dtype = self.dtype
        payload = torch.from_numpy(meta["payload"]).to(dtype)
        length = len(seq)
        h = torch.zeros((length, self.config.width), dtype=dtype)

        is_patch = kind == TokenKind.PATCH
        clean_patch = torch.from_numpy(is_patch & (role == Role.CLEAN))
        noisy_patch = torch.from_numpy(is_patch & (role == Role.NOISY))
        if clean_patch.any():
            h[clean_patch] = self.clean_in(payload[clean_patch])
        if noisy_patch.any():
            h[noisy_patch] = self.noisy_in(payload[noisy_patch])

        is_hint = np.isin(kind, [TokenKind.IMG_OPEN, TokenKind.IMG_CLOSE, TokenKind.DIFF])
        if is_hint.any():
            rows = np.array([_HINT_ROW[TokenKind(k)] for k in kind[is_hint]])
            h[torch.from_numpy(is_hint)] = self.hint_embed(torch.from_numpy(rows))

        is_alpha = kind == TokenKind.ALPHA
        if is_alpha.any():
            feats = torch.from_numpy(alpha_features(meta["alpha"][is_alpha])).to(dtype)
            h[torch.from_numpy(is_alpha)] = self.alpha_proj(feats)

        is_class = kind == TokenKind.CLASS
        if is_class.any():
            if self.class_embed is None:
                raise InvalidConfigError("class token in sequence but class_vocab is 0")
            ids = meta["class_id"][is_class]
            if ids.min() < 0 or ids.max() >= self.config.class_vocab:
                raise InvalidConfigError(f"class id out of range: {ids}")
            h[torch.from_numpy(is_class)] = self.class_embed(torch.from_numpy(ids))

        h = h + torch.from_numpy(self._positions(seq)).to(dtype)
        return h

    # -- forward -----------------------------------------------------------

    def _run_stack(self, h: torch.Tensor, blocked: torch.Tensor) -> torch.Tensor:
        for i, block in enumerate(self.blocks):
            h = block(h, blocked)
            if not torch.isfinite(h).all():
                raise NumericalError(f"non-finite activations after layer {i}", layer=i)
        return self.final_ln(h)

    def forward(
        self,
        seq: TokenSequence,
        mask: AttentionMask,
        return_hidden: bool = False,
    ):
        """Predict clean patch vectors at the noisy PATCH positions of ``seq``."""
        if len(mask) != len(seq):
            raise ShapeError(f"mask size {len(mask)} != sequence length {len(seq)}")
        h = self.embed_sequence(seq)[None]
        blocked = torch.from_numpy(~mask.allowed)[None]
        hidden = self._run_stack(h, blocked)[0]
        positions = seq.noisy_patch_positions()
        preds = Predictions(positions, self.out_proj(hidden[positions]))
        if return_hidden:
            return preds, hidden
        return preds

    def forward_batch(
        self, seqs: list[TokenSequence], masks: list[AttentionMask]
    ) -> list[Predictions]:
        """Batched forward over sequences padded to a common length.

        Padding rows attend only to themselves (keeps softmax well-defined)
        and are excluded from every real token's column set and from the
        returned predictions.
        """
        if len(seqs) != len(masks):
            raise ShapeError("need one mask per sequence")
        lengths = [len(s) for s in seqs]
        l_max = max(lengths)
        b = len(seqs)
        h = torch.zeros((b, l_max, self.config.width), dtype=self.dtype)
        blocked = torch.ones((b, l_max, l_max), dtype=torch.bool)
        for i, (seq, mask) in enumerate(zip(seqs, masks)):
            if len(mask) != len(seq):
                raise ShapeError(f"mask size {len(mask)} != sequence length {len(seq)}")
            li = lengths[i]
            h[i, :li] = self.embed_sequence(seq)
            blocked[i, :li, :li] = torch.from_numpy(~mask.allowed)
            blocked[i].fill_diagonal_(False)
        hidden = self._run_stack(h, blocked)
        out = []
        for i, seq in enumerate(seqs):
            positions = seq.noisy_patch_positions()
            out.append(Predictions(positions, self.out_proj(hidden[i, positions])))
        return out

    def pool_clip_features(
        self, seq: TokenSequence, mask: AttentionMask, clip: int
    ) -> torch.Tensor:
        """Mean of final-layer activations at the clean PATCH tokens of a clip."""
        _, hidden = self.forward(seq, mask, return_hidden=True)
        positions = [
            i
            for i, t in enumerate(seq.tokens)
            if t.kind == TokenKind.PATCH and t.role == Role.CLEAN and t.clip == clip
        ]
        if not positions:
            raise ShapeError(f"sequence has no clean PATCH tokens for clip {clip}")
        return hidden[positions].mean(dim=0)


def init_params(config: ModelConfig) -> ClipTransformer:
    """Fresh model; bit-identical for identical configs (seed included)."""
    return ClipTransformer(config)


# ---------------------------------------------------------------------------
# Checkpoint container: magic "NCKP", u32 version, u32 header length, UTF-8
# JSON header {config, meta, tensors: [{name, shape, offset}]}, then fp32
# little-endian tensor payloads (offsets relative to the payload section).
# ---------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<4sII")


def save_checkpoint(
    path,
    model: ClipTransformer,
    extra_tensors: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = {
        name: p.detach().cpu().numpy().astype("<f4")
        for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0])
    }
    for name, arr in (extra_tensors or {}).items():
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.asarray(arr, dtype="<f4")

    manifest = []
    offset = 0
    for name, arr in tensors.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "config": dataclasses.asdict(model.config),
        "meta": meta or {},
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> tuple[ClipTransformer, dict[str, np.ndarray], dict]:
    """Rebuild the model; returns (model, non-parameter tensors, meta)."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointError("file too short for checkpoint header")
    magic, version, header_len = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"expected magic {CHECKPOINT_MAGIC!r}, found {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported")
    header_end = _CKPT_HEADER.size + header_len
    if header_end > len(data):
        raise CheckpointError("file ends inside the JSON header")
    header = json.loads(data[_CKPT_HEADER.size : header_end].decode("utf-8"))

    config = ModelConfig(**header["config"])
    model = ClipTransformer(config)
    payload = data[header_end:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(payload):
            raise CheckpointError(f"payload truncated at tensor {entry['name']!r}")
        tensors[entry["name"]] = (
            np.frombuffer(payload, dtype="<f4", count=count, offset=start)
            .reshape(shape)
            .copy()
        )

    params = dict(model.named_parameters())
    extras: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name in params:
            if tuple(params[name].shape) != arr.shape:
                raise CheckpointError(
                    f"tensor {name!r} shape {arr.shape} does not match config "
                    f"shape {tuple(params[name].shape)}"
                )
            with torch.no_grad():
                params[name].copy_(torch.from_numpy(arr))
        else:
            extras[name] = arr
    missing = set(params) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    return model, extras, header.get("meta", {})
