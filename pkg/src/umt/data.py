"""Clips, frame sampling, patch tokens, and the synthetic video-text corpus.

Spatial tokens are always ordered row-major, top-left patch first. Inside a
patch, pixels are flattened in (row, column, channel) order.
"""
from __future__ import annotations

import itertools
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import (
    BadMagicError,
    ChecksumError,
    ClipFormatError,
    DimOverflowError,
    InvalidInputError,
    TruncatedPayloadError,
)


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    frame_indices: Sequence[int]
    source_id: str = ""
    label: Optional[int] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise InvalidInputError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise InvalidInputError("clip needs at least one frame")
        self.frame_indices = [int(i) for i in self.frame_indices]
        if len(self.frame_indices) != self.frames.shape[0]:
            raise InvalidInputError("one frame index per frame is required")
        if any(b <= a for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise InvalidInputError("frame_indices must be strictly increasing")
        if self.frames.size and (self.frames.min() < 0.0 or self.frames.max() > 1.0):
            raise InvalidInputError("pixel values must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    tokens_per_frame: int
    frames: int
    embed_dim: int
    grid_hw: tuple = field(default=None, compare=False)

    @classmethod
    def for_clip(cls, frames: int, height: int, width: int, patch_size: int, embed_dim: int):
        if height % patch_size or width % patch_size:
            raise InvalidInputError(
                f"frame size {height}x{width} not divisible by patch size {patch_size}")
        gh, gw = height // patch_size, width // patch_size
        return cls(patch_size, gh * gw, frames, embed_dim, (gh, gw))

    @property
    def num_tokens(self) -> int:
        return self.tokens_per_frame * self.frames


@dataclass
class TokenBatch:
    """Gathered tokens with their (frame, spatial index) origin."""

    tokens: torch.Tensor  # (N, C)
    provenance: torch.Tensor  # (N, 2) long
    grid: PatchGrid

    def __post_init__(self):
        n = self.tokens.shape[-2]
        if self.provenance.shape != (n, 2):
            raise InvalidInputError("provenance must be (N, 2) matching tokens")
        if n > self.grid.num_tokens:
            raise InvalidInputError("more tokens than grid positions")

    def __len__(self):
        return self.tokens.shape[-2]

    @property
    def flat_index(self) -> torch.Tensor:
        return self.provenance[:, 0] * self.grid.tokens_per_frame + self.provenance[:, 1]


# ---------------------------------------------------------------------------
# frame sampling

def _segment_bounds(total_frames: int, num_segments: int):
    edges = [(k * total_frames) // num_segments for k in range(num_segments + 1)]
    return list(zip(edges[:-1], edges[1:]))


def sparse_sample(total_frames: int, T: int, rng: Optional[np.random.Generator] = None,
                  deterministic: bool = False) -> list[int]:
    """One frame per equal temporal segment.

    Stochastic mode draws uniformly inside each segment; deterministic mode
    takes ``start + len // 2`` and ignores ``rng``.
    """
    if T < 1 or total_frames < T:
        raise InvalidInputError(f"cannot sample {T} frames from a {total_frames}-frame video")
    bounds = _segment_bounds(total_frames, T)
    if deterministic:
        return [s + (e - s) // 2 for s, e in bounds]
    if rng is None:
        raise InvalidInputError("stochastic sampling needs an rng")
    return [int(rng.integers(s, e)) for s, e in bounds]


def dense_sample(total_frames: int, T: int, stride: int, rng: Optional[np.random.Generator] = None,
                 start: Optional[int] = None) -> list[int]:
    """A contiguous window of T frames spaced by ``stride``."""
    span = (T - 1) * stride + 1
    if T < 1 or stride < 1 or span > total_frames:
        raise InvalidInputError(
            f"window of {T} frames at stride {stride} does not fit in {total_frames} frames")
    last_start = total_frames - span
    if start is None:
        if rng is None:
            raise InvalidInputError("dense sampling needs an rng or an explicit start")
        start = int(rng.integers(0, last_start + 1))
    elif not 0 <= start <= last_start:
        raise InvalidInputError(f"start {start} outside [0, {last_start}]")
    return [start + k * stride for k in range(T)]


# ---------------------------------------------------------------------------
# tokens

def frames_to_patches(frames, patch_size: int) -> torch.Tensor:
    """(..., H, W, 3) pixels -> (..., L, P*P*3) flattened patches."""
    x = torch.as_tensor(frames)
    *lead, H, W, ch = x.shape
    P = patch_size
    if H % P or W % P:
        raise InvalidInputError(f"frame size {H}x{W} not divisible by patch size {P}")
    gh, gw = H // P, W // P
    x = x.reshape(*lead, gh, P, gw, P, ch)
    nd = len(lead)
    perm = list(range(nd)) + [nd, nd + 2, nd + 1, nd + 3, nd + 4]
    x = x.permute(*perm)
    return x.reshape(*lead, gh * gw, P * P * ch)


def patchify(clip: VideoClip, grid: PatchGrid, embed_weights, bias=None) -> torch.Tensor:
    """Project each non-overlapping P x P patch to ``grid.embed_dim`` channels.

    Returns a (T, L, C) tensor in the dtype of ``embed_weights``.
    """
    w = torch.as_tensor(embed_weights)
    P = grid.patch_size
    T, H, W, _ = clip.frames.shape
    if T != grid.frames or (H // P) * (W // P) != grid.tokens_per_frame:
        raise InvalidInputError(f"clip {clip.frames.shape} does not match grid {grid}")
    if w.shape != (P * P * 3, grid.embed_dim):
        raise InvalidInputError(f"embed weights must be {(P * P * 3, grid.embed_dim)}, got {tuple(w.shape)}")
    patches = frames_to_patches(torch.as_tensor(clip.frames, dtype=w.dtype), P)
    out = patches @ w
    if bias is not None:
        out = out + torch.as_tensor(bias, dtype=w.dtype)
    return out


def sincos_positions(T: int, L: int, C: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 1-D sine-cosine table over the flattened T*L sequence.

    Channel 2i holds sin(pos / 10000^(2i/C)) and channel 2i+1 the matching cos.
    """
    if C % 2:
        raise InvalidInputError(f"embedding width must be even, got {C}")
    pos = torch.arange(T * L, dtype=torch.float64)[:, None]
    freq = torch.pow(10000.0, -torch.arange(0, C, 2, dtype=torch.float64) / C)
    angle = pos * freq
    table = torch.empty(T * L, C, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table.to(dtype)


# ---------------------------------------------------------------------------
# synthetic corpus

PAD_ID, CLS_ID, MASK_ID, SEP_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[MASK]", "[SEP]")
SHAPES = ("square", "circle", "diamond", "cross")
COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "magenta": (0.85, 0.1, 0.85),
    "cyan": (0.1, 0.85, 0.9),
}
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}
WORDS = ("a", "moves") + SHAPES + tuple(COLORS) + tuple(DIRECTIONS)
VOCAB = SPECIAL_TOKENS + WORDS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
CAPTION_LEN = 7
COMBINATIONS = list(itertools.product(SHAPES, COLORS, DIRECTIONS))


def caption_ids(shape: str, color: str, direction: str) -> list[int]:
    words = ["a", color, shape, "moves", direction]
    return [CLS_ID] + [TOKEN_ID[w] for w in words] + [SEP_ID]


def _shape_mask(shape, yy, xx, cy, cx, radius):
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= radius ** 2
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius
    bar = max(radius / 3.0, 1.0)
    return ((np.abs(dy) <= bar) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= bar) & (np.abs(dy) <= radius))


def render_video(shape: str, color: str, direction: str, rng: np.random.Generator,
                 num_frames: int = 16, size: int = 32) -> np.ndarray:
    """Render a shape translating across a noisy dark background."""
    radius = size * rng.uniform(0.15, 0.22)
    dy, dx = DIRECTIONS[direction]
    travel = size - 2 * radius - 2
    # starting point leaves room to move the full travel distance
    lo, hi = radius + 1, size - radius - 1
    cy = rng.uniform(lo, hi) if dy == 0 else (lo if dy > 0 else hi)
    cx = rng.uniform(lo, hi) if dx == 0 else (lo if dx > 0 else hi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    bg = np.clip(0.1 + 0.03 * rng.standard_normal((size, size, 1)), 0.0, 1.0)
    rgb = np.asarray(COLORS[color])
    video = np.empty((num_frames, size, size, 3), dtype=np.float32)
    for t in range(num_frames):
        frac = t / max(num_frames - 1, 1)
        m = _shape_mask(shape, yy, xx, cy + dy * travel * frac, cx + dx * travel * frac, radius)
        frame = np.broadcast_to(bg, (size, size, 3)).copy()
        frame[m] = rgb
        video[t] = frame
    return video


def synth_item(seed: int, index: int, frames: int = 4, size: int = 32, source_frames: int = 16,
               deterministic_sampling: bool = False):
    """Item ``index`` of the corpus with seed ``seed``; independent of other items."""
    perm = np.random.default_rng(seed).permutation(len(COMBINATIONS))
    combo = perm[index % len(COMBINATIONS)]
    shape, color, direction = COMBINATIONS[combo]
    rng = np.random.default_rng([seed, index])
    video = render_video(shape, color, direction, rng, source_frames, size)
    idx = sparse_sample(source_frames, frames, rng, deterministic=deterministic_sampling)
    clip = VideoClip(video[idx], idx, source_id=f"synth-{seed}-{index}", label=int(combo))
    return clip, caption_ids(shape, color, direction)


def synth_video_text(count: int, seed=0, vocab_size: int = 64, frames: int = 4, size: int = 32,
                     source_frames: int = 16, start: int = 0):
    """Deterministic corpus of (clip, caption token ids) pairs.

    ``seed`` may be an int or a numpy Generator (one corpus seed is drawn from it).
    Captions encode shape, color, and motion direction with fixed template ids.
    """
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    if vocab_size < len(VOCAB):
        raise InvalidInputError(f"vocab_size must be at least {len(VOCAB)}")
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2 ** 31))
    return [synth_item(seed, i, frames, size, source_frames) for i in range(start, start + count)]


def image_as_video(image, source_id: str = "image", label: Optional[int] = None) -> VideoClip:
    """Wrap an (H, W, 3) image as a one-frame clip."""
    img = np.asarray(image)
    if img.ndim != 3:
        raise InvalidInputError(f"image must be (H, W, 3), got {img.shape}")
    return VideoClip(img[None], [0], source_id=source_id, label=label)


# ---------------------------------------------------------------------------
# on-disk formats

CLIP_MAGIC = b"UMTC"
CLIP_VERSION = 1
_CLIP_HEADER = struct.Struct("<4sHBB4IQ")
_DTYPES = {0: np.dtype("<f4")}
MAX_CLIP_BYTES = 1 << 34


def write_clip(path, clip: VideoClip) -> None:
    frames = np.ascontiguousarray(clip.frames, dtype="<f4")
    payload = frames.tobytes()
    T, H, W, ch = frames.shape
    header = _CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, 0, 0, T, H, W, ch, len(payload))
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def read_clip(path) -> VideoClip:
    """Parse a clip container; raises a ClipFormatError subclass on any defect."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != CLIP_MAGIC:
        raise BadMagicError(f"{path}: not a clip container")
    if len(data) < _CLIP_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, dtype_code, _, T, H, W, ch, nbytes = _CLIP_HEADER.unpack_from(data)
    if version != CLIP_VERSION:
        raise ClipFormatError(f"{path}: unsupported version {version}")
    if dtype_code not in _DTYPES:
        raise ClipFormatError(f"{path}: unknown dtype code {dtype_code}")
    if ch != 3:
        raise ClipFormatError(f"{path}: expected 3 channels, got {ch}")
    itemsize = _DTYPES[dtype_code].itemsize
    if min(T, H, W) == 0 or T * H * W * ch * itemsize > MAX_CLIP_BYTES:
        raise DimOverflowError(f"{path}: dimensions {T}x{H}x{W}x{ch} out of range")
    expected = T * H * W * ch * itemsize
    start = _CLIP_HEADER.size
    if nbytes != expected or len(data) < start + nbytes + 4:
        raise TruncatedPayloadError(
            f"{path}: header promises {expected} bytes, declared {nbytes}, file holds {len(data) - start - 4}")
    payload = data[start:start + nbytes]
    (crc,) = struct.unpack_from("<I", data, start + nbytes)
    if crc != zlib.crc32(payload):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    frames = np.frombuffer(payload, dtype=_DTYPES[dtype_code]).reshape(T, H, W, ch).astype(np.float32)
    return VideoClip(frames, list(range(T)), source_id=Path(path).stem)


def write_manifest(path, records) -> None:
    """records: iterable of (clip path, label or None, caption ids)."""
    with open(path, "w") as f:
        for clip_path, label, ids in records:
            lab = "" if label is None else str(int(label))
            f.write(f"{clip_path}\t{lab}\t{','.join(str(int(i)) for i in ids)}\n")


def read_manifest(path):
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise InvalidInputError(f"{path}:{lineno}: expected 3 tab-separated fields")
        clip_path, lab, ids = parts
        label = int(lab) if lab else None
        records.append((clip_path, label, [int(i) for i in ids.split(",") if i]))
    return records


def write_vocab(path, vocab: Sequence[str] = VOCAB) -> None:
    with open(path, "w") as f:
        for i, surface in enumerate(vocab):
            f.write(f"{i}\t{surface}\n")


def read_vocab(path) -> dict[int, str]:
    vocab = {}
    for line in Path(path).read_text().splitlines():
        if line:
            i, surface = line.split("\t", 1)
            vocab[int(i)] = surface
    return vocab


def normalize_pixels(frames, mean: float = 0.5, std: float = 0.5):
    return (frames - mean) / std
