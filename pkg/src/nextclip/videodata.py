"""Synthetic physics videos and the binary dataset container.

Scenes are rendered as hard (non-antialiased) disks on a dark background so
kinematic invariants are exactly checkable at the pixel level.  The dataset
file format is a tiny versioned binary container (magic ``NCVD``) holding raw
fp32 frames; lossy codecs would break the bit-exact roundtrip contract.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    InvalidConfigError,
    TruncatedPayloadError,
    VersionMismatchError,
)

MAGIC = b"NCVD"
FORMAT_VERSION = 1

SCENE_KINDS = ("bouncing_ball", "gravity_drop", "linear_drift")


@dataclass
class VideoTensor:
    """N frames of [C, H, W] pixels in [0, 1], plus an fps hint (metadata only)."""

    frames: np.ndarray  # [N, C, H, W] float32
    fps_hint: int = 8

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise InvalidConfigError(
                f"frames must be [N, C, H, W], got shape {self.frames.shape}"
            )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape)

    def validate(self) -> None:
        n, c, h, w = self.frames.shape
        if n < 1:
            raise InvalidConfigError("video must contain at least one frame")
        if c not in (1, 3):
            raise InvalidConfigError(f"channel count must be 1 or 3, got {c}")
        if h < 1 or w < 1:
            raise InvalidConfigError("frame resolution must be positive")
        if self.fps_hint < 1:
            raise InvalidConfigError("fps_hint must be positive")
        if not np.isfinite(self.frames).all():
            raise InvalidConfigError("frames contain non-finite values")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise InvalidConfigError("pixel values must lie in [0, 1]")


@dataclass(frozen=True)
class SceneConfig:
    """Deterministic recipe for one synthetic video.

    The same config always renders the bit-identical video.  ``start`` pins
    the object's initial center; when None the center is drawn from ``seed``.
    Velocity/gravity are in pixels per frame (per frame squared for gravity).
    """

    scene_kind: str
    height: int = 16
    width: int = 16
    num_frames: int = 16
    seed: int = 0
    radius: float = 2.0
    velocity: tuple[float, float] = (1.0, 0.5)
    gravity: float = 0.5
    start: tuple[float, float] | None = None
    channels: int = 1
    fps_hint: int = 8
    background: float = 0.0
    foreground: float = 1.0

    def validate(self) -> None:
        if self.scene_kind not in SCENE_KINDS:
            raise InvalidConfigError(f"unknown scene kind {self.scene_kind!r}")
        if self.num_frames < 1:
            raise InvalidConfigError("num_frames must be >= 1")
        if self.channels not in (1, 3):
            raise InvalidConfigError("channels must be 1 or 3")
        if self.radius <= 0:
            raise InvalidConfigError("radius must be positive")
        if min(self.height, self.width) < 2 * self.radius:
            raise InvalidConfigError(
                f"resolution {self.height}x{self.width} smaller than twice the "
                f"object radius {self.radius}"
            )
        for v in (self.background, self.foreground):
            if not (0.0 <= v <= 1.0):
                raise InvalidConfigError("background/foreground must lie in [0, 1]")


def _render_disk(cfg: SceneConfig, cx: float, cy: float) -> np.ndarray:
    """Hard disk mask: pixel on iff its center lies within radius of (cx, cy)."""
    ys = np.arange(cfg.height, dtype=np.float64)[:, None]
    xs = np.arange(cfg.width, dtype=np.float64)[None, :]
    inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= cfg.radius**2
    frame = np.where(inside, cfg.foreground, cfg.background).astype(np.float32)
    return np.broadcast_to(frame, (cfg.channels, cfg.height, cfg.width)).copy()


def _reflect(x: float, lo: float, hi: float, v: float) -> tuple[float, float]:
    # Mirror-fold until inside [lo, hi]; each fold flips the velocity sign,
    # preserving speed magnitude exactly.
    if lo >= hi:
        return lo, 0.0
    while x < lo or x > hi:
        if x < lo:
            x = 2.0 * lo - x
            v = -v
        else:
            x = 2.0 * hi - x
            v = -v
    return x, v


def generate_scene(cfg: SceneConfig) -> VideoTensor:
    """Render a scene; a pure function of the config (bit-identical per seed)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    r = cfg.radius
    x_lo, x_hi = r, cfg.width - 1.0 - r
    y_lo, y_hi = r, cfg.height - 1.0 - r
    vx, vy = float(cfg.velocity[0]), float(cfg.velocity[1])
    # Degenerate reflecting axis (disk exactly fills it): pin center, no motion.
    reflects = cfg.scene_kind in ("bouncing_ball", "gravity_drop")
    if x_hi < x_lo:
        x_lo = x_hi = (cfg.width - 1.0) / 2.0
        if reflects:
            vx = 0.0
    if y_hi < y_lo:
        y_lo = y_hi = (cfg.height - 1.0) / 2.0
        if reflects:
            vy = 0.0
    if cfg.start is not None:
        cx, cy = float(cfg.start[0]), float(cfg.start[1])
    else:
        cx = rng.uniform(x_lo, x_hi)
        cy = rng.uniform(y_lo, y_hi)
    frames = []
    for _ in range(cfg.num_frames):
        frames.append(_render_disk(cfg, cx, cy))
        if cfg.scene_kind == "linear_drift":
            cx += vx
            cy += vy
        elif cfg.scene_kind == "bouncing_ball":
            cx += vx
            cy += vy
            cx, vx = _reflect(cx, x_lo, x_hi, vx)
            cy, vy = _reflect(cy, y_lo, y_hi, vy)
        elif cfg.scene_kind == "gravity_drop":
            # Discrete update: v <- v + g, y <- y + v, bouncing off floor/ceiling.
            vy += cfg.gravity
            cx += vx
            cy += vy
            cy, vy = _reflect(cy, y_lo, y_hi, vy)
    return VideoTensor(np.stack(frames), fps_hint=cfg.fps_hint)


def copy_last_frame_baseline(history: VideoTensor, horizon: int) -> VideoTensor:
    """Predict by repeating the final history frame ``horizon`` times."""
    if horizon < 0:
        raise InvalidConfigError("horizon must be >= 0")
    n, c, h, w = history.frames.shape
    if n < 1:
        raise InvalidConfigError("history must contain at least one frame")
    if horizon == 0:
        return VideoTensor(np.zeros((0, c, h, w), dtype=np.float32), history.fps_hint)
    last = history.frames[-1]
    return VideoTensor(np.repeat(last[None], horizon, axis=0), history.fps_hint)


# ---------------------------------------------------------------------------
# Dataset container: magic "NCVD", u32 version, u32 count, then per video
# u32 N, u16 C, u16 H, u16 W, u16 fps_hint, N*C*H*W fp32 little-endian.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sII")
_VIDEO_HEADER = struct.Struct("<IHHHH")


def write_dataset(path, videos: list[VideoTensor]) -> None:
    for v in videos:
        v.validate()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(videos)))
        for v in videos:
            n, c, h, w = v.frames.shape
            f.write(_VIDEO_HEADER.pack(n, c, h, w, v.fps_hint))
            f.write(np.ascontiguousarray(v.frames, dtype="<f4").tobytes())


def read_dataset(path) -> list[VideoTensor]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("file too short for dataset header")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"dataset version {version} unsupported (expected {FORMAT_VERSION})"
        )
    offset = _HEADER.size
    videos = []
    for _ in range(count):
        if offset + _VIDEO_HEADER.size > len(data):
            raise TruncatedPayloadError("file ends inside a video header")
        n, c, h, w, fps = _VIDEO_HEADER.unpack_from(data, offset)
        offset += _VIDEO_HEADER.size
        nbytes = n * c * h * w * 4
        if offset + nbytes > len(data):
            raise TruncatedPayloadError("file ends inside a video payload")
        frames = np.frombuffer(data, dtype="<f4", count=n * c * h * w, offset=offset)
        videos.append(VideoTensor(frames.reshape(n, c, h, w).copy(), fps_hint=fps))
        offset += nbytes
    return videos
