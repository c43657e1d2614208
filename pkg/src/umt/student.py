"""Class-token-free video ViT trained on unmasked tokens only."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .data import PatchGrid, TokenBatch, frames_to_patches, sincos_positions
from .errors import ConfigError, InvalidInputError
from .layers import Block, init_weights


@dataclass(frozen=True)
class StudentConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    k_align: int = 2
    proj_dim: int = 32
    drop_path_rate: float = 0.0
    patch_size: int = 8
    image_size: int = 32
    frames: int = 4
    temporal_patch: int = 1
    attention: str = "joint"  # "joint" (space-time) or "spatial" (within-frame only)
    align_dims: Optional[tuple] = None  # per aligned layer, defaults to proj_dim everywhere

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"student width {self.width} not divisible by {self.heads} heads")
        if not 1 <= self.k_align <= self.depth:
            raise ConfigError(f"k_align={self.k_align} must be within [1, depth={self.depth}]")
        if self.temporal_patch not in (1, 2):
            raise ConfigError("temporal_patch must be 1 or 2")
        if self.attention not in ("joint", "spatial"):
            raise ConfigError(f"unknown attention pattern {self.attention!r}")
        if self.align_dims is not None and len(self.align_dims) != self.k_align:
            raise ConfigError("align_dims needs one entry per aligned layer")

    @property
    def tokens_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def temporal_positions(self) -> int:
        return self.frames // self.temporal_patch

    @property
    def head_dims(self) -> tuple:
        return tuple(self.align_dims) if self.align_dims is not None else (self.proj_dim,) * self.k_align

    def grid(self) -> PatchGrid:
        return PatchGrid.for_clip(self.temporal_positions, self.image_size, self.image_size,
                                  self.patch_size, self.width)


def temporal_downsample_toggle(cfg: StudentConfig, enabled: bool = True) -> StudentConfig:
    """Tokens span two frames in time when enabled (T/2 temporal positions)."""
    if enabled and cfg.frames % 2:
        raise InvalidInputError(f"temporal downsampling needs an even frame count, got {cfg.frames}")
    return dataclasses.replace(cfg, temporal_patch=2 if enabled else 1)


@dataclass
class StudentOutput:
    layer_outputs: list  # K tensors (..., N, C_s)
    projected: list  # K tensors (..., N, D_k)
    final: torch.Tensor  # last block output after the final norm


class AlignHead(nn.Module):
    def __init__(self, dim, out_dim):
        super().__init__()
        self.ln = nn.LayerNorm(dim, eps=1e-6)
        self.fc = nn.Linear(dim, out_dim)

    def forward(self, x):
        return self.fc(self.ln(x))


class Student(nn.Module):
    def __init__(self, cfg: StudentConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        P = cfg.patch_size
        self.patch_embed = nn.Linear(cfg.temporal_patch * P * P * 3, cfg.width)
        dpr = torch.linspace(0, cfg.drop_path_rate, cfg.depth).tolist()
        for i in range(cfg.depth):
            self.add_module(f"block{i}", Block(cfg.width, cfg.heads, drop_path=dpr[i]))
        for k, d in enumerate(cfg.head_dims):
            self.add_module(f"align_head{k}", AlignHead(cfg.width, d))
        self.norm = nn.LayerNorm(cfg.width, eps=1e-6)
        self.register_buffer(
            "pos", sincos_positions(cfg.temporal_positions, cfg.tokens_per_frame, cfg.width), persistent=False)
        init_weights(self, torch.Generator().manual_seed(seed))

    @property
    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(self.cfg.depth)]

    @property
    def align_heads(self):
        return [getattr(self, f"align_head{k}") for k in range(self.cfg.k_align)]

    def embed(self, frames) -> torch.Tensor:
        """Pixels (..., T, H, W, 3) -> tokens (..., T', L, C_s)."""
        x = torch.as_tensor(frames, dtype=self.patch_embed.weight.dtype)
        tp = self.cfg.temporal_patch
        if tp > 1:
            *lead, T, H, W, ch = x.shape
            if T % tp:
                raise InvalidInputError(f"temporal downsampling needs an even frame count, got {T}")
            # fold the frame pair into the channel axis so each token covers both frames
            x = x.reshape(*lead, T // tp, tp, H, W, ch).movedim(-4, -2).reshape(*lead, T // tp, H, W, tp * ch)
        return self.patch_embed(frames_to_patches(x, self.cfg.patch_size))

    def forward(self, batch) -> StudentOutput:
        """Accepts a TokenBatch or a list of equal-size TokenBatches (stacked)."""
        batches = [batch] if isinstance(batch, TokenBatch) else list(batch)
        tokens = torch.stack([b.tokens for b in batches])
        prov = torch.stack([b.provenance for b in batches])
        out = self.forward_tokens(tokens, prov)
        if isinstance(batch, TokenBatch):
            out = StudentOutput([x[0] for x in out.layer_outputs], [x[0] for x in out.projected], out.final[0])
        return out

    def forward_tokens(self, tokens: torch.Tensor, provenance: torch.Tensor) -> StudentOutput:
        """tokens (B, N, C_s) patch embeddings, provenance (B, N, 2) (frame, spatial index)."""
        cfg = self.cfg
        T, L = cfg.temporal_positions, cfg.tokens_per_frame
        t, l = provenance[..., 0], provenance[..., 1]
        if ((t < 0) | (t >= T) | (l < 0) | (l >= L)).any():
            raise InvalidInputError(f"provenance outside the {T}x{L} token grid")
        x = tokens + self.pos.to(tokens.dtype)[t * L + l]
        attn_mask = (t[:, :, None] == t[:, None, :]) if cfg.attention == "spatial" else None
        first_aligned = cfg.depth - cfg.k_align
        layers = []
        for i, blk in enumerate(self.blocks):
            x = blk(x, attn_mask=attn_mask)
            if i >= first_aligned:
                layers.append(x)
        projected = [head(h) for head, h in zip(self.align_heads, layers)]
        return StudentOutput(layers, projected, self.norm(x))


def init_student(cfg: StudentConfig, seed: int) -> Student:
    return Student(cfg, seed)
