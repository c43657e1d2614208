"""Frozen per-frame teacher: layer tokens, class-token attention, visual projection."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import frames_to_patches, sincos_positions
from .errors import CheckpointError, ConfigError, InvalidInputError
from .layers import Block, init_weights


@dataclass(frozen=True)
class TeacherConfig:
    depth: int = 4
    width: int = 64
    heads: int = 4
    proj_dim: int = 32
    patch_size: int = 8
    image_size: int = 32
    seed: int = 1234

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("teacher depth must be >= 1")
        if self.width % self.heads:
            raise ConfigError(f"teacher width {self.width} not divisible by {self.heads} heads")

    @property
    def tokens_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class AttentionMap:
    scores: torch.Tensor  # (..., T, L), rows sum to one

    def __post_init__(self):
        if (self.scores < 0).any():
            raise InvalidInputError("attention scores must be non-negative")


@dataclass
class TeacherOutput:
    layer_tokens: list  # K tensors (..., T, L, C_t), last layer last
    class_tokens: torch.Tensor  # (..., T, C_t)
    attention: AttentionMap


def attention_scores(z_cls, Z, w_q, w_k, num_heads: int, b_q=None, b_k=None):
    """Head-averaged class-token attention over spatial tokens.

    z_cls: (..., C), Z: (..., L, C); w_q, w_k are (C, C) weights in
    ``nn.Linear`` layout (out, in). The class-token key is not in the support.
    """
    C = z_cls.shape[-1]
    if C % num_heads:
        raise ConfigError(f"{num_heads} heads do not divide width {C}")
    d = C // num_heads
    q = nn.functional.linear(z_cls, w_q, b_q)
    k = nn.functional.linear(Z, w_k, b_k)
    q = q.reshape(*q.shape[:-1], num_heads, 1, d)
    k = k.reshape(*k.shape[:-1], num_heads, d).transpose(-3, -2)
    logits = (q @ k.transpose(-2, -1)).squeeze(-2) / math.sqrt(d)
    return logits.softmax(dim=-1).mean(dim=-2)


class Teacher(nn.Module):
    """Small spatial ViT with a class token, applied to every frame independently."""

    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        self.cfg = cfg
        P = cfg.patch_size
        self.patch_embed = nn.Linear(P * P * 3, cfg.width)
        self.cls_token = nn.Parameter(torch.zeros(cfg.width))
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.ln_post = nn.LayerNorm(cfg.width, eps=1e-6)
        self.proj = nn.Linear(cfg.width, cfg.proj_dim)
        self.register_buffer("pos", sincos_positions(1, cfg.tokens_per_frame + 1, cfg.width), persistent=False)
        g = torch.Generator().manual_seed(cfg.seed)
        init_weights(self, g)
        nn.init.trunc_normal_(self.cls_token, std=0.02, a=-0.04, b=0.04, generator=g)
        self.freeze()

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        # always in inference mode
        return super().train(False)

    def embed(self, frames) -> torch.Tensor:
        """Pixels (..., T, H, W, 3) -> patch tokens (..., T, L, C_t)."""
        x = frames_to_patches(torch.as_tensor(frames, dtype=self.patch_embed.weight.dtype), self.cfg.patch_size)
        return self.patch_embed(x)

    @torch.no_grad()
    def forward(self, frame_tokens: torch.Tensor, num_layers: int = 1) -> TeacherOutput:
        cfg = self.cfg
        L = cfg.tokens_per_frame
        if frame_tokens.ndim < 3 or frame_tokens.shape[-2:] != (L, cfg.width):
            raise InvalidInputError(f"teacher expects (..., T, {L}, {cfg.width}), got {tuple(frame_tokens.shape)}")
        if not 1 <= num_layers <= cfg.depth:
            raise ConfigError(f"cannot return {num_layers} layers from a depth-{cfg.depth} teacher")
        lead = frame_tokens.shape[:-2]
        x = frame_tokens.reshape(-1, L, cfg.width)
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos.to(x.dtype)
        outputs = []
        for i, blk in enumerate(self.blocks):
            if i == cfg.depth - 1:
                h = blk.ln1(x)
                attn = blk.attn
                A = attention_scores(h[:, 0], h[:, 1:], attn.q.weight, attn.k.weight, cfg.heads,
                                     attn.q.bias, attn.k.bias)
            x = blk(x)
            if i >= cfg.depth - num_layers:
                outputs.append(self.ln_post(x))
        layer_tokens = [o[:, 1:].reshape(*lead, L, cfg.width) for o in outputs]
        return TeacherOutput(
            layer_tokens=layer_tokens,
            class_tokens=outputs[-1][:, 0].reshape(*lead, cfg.width),
            attention=AttentionMap(A.reshape(*lead, L)),
        )

    @torch.no_grad()
    def visual_project(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.proj(tokens)


def save_teacher(path, teacher: Teacher):
    from .pipeline.checkpoint import save_tensors

    save_tensors(path, {f"teacher.{k}": v for k, v in teacher.state_dict().items()})


def load_teacher(path, cfg: TeacherConfig) -> Teacher:
    """Build a teacher from ``teacher.*`` tensors in a checkpoint and freeze it."""
    from .pipeline.checkpoint import load_tensors

    tensors = load_tensors(path)
    teacher = Teacher(cfg)
    own = teacher.state_dict()
    found = {k[len("teacher."):]: v for k, v in tensors.items() if k.startswith("teacher.")}
    missing = sorted(set(own) - set(found))
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing teacher tensors: {', '.join(missing)}")
    bad = [f"{k} {tuple(found[k].shape)} != {tuple(own[k].shape)}" for k in own if found[k].shape != own[k].shape]
    if bad:
        raise CheckpointError("teacher shape mismatch: " + "; ".join(bad))
    extra = sorted(set(found) - set(own))
    if extra:
        warnings.warn(f"ignoring unused teacher tensors: {', '.join(extra)}")
    teacher.load_state_dict({k: found[k] for k in own})
    return teacher.freeze()
