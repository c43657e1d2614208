"""Text encoder and cross-modal decoder for multimodal training."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import CLS_ID, MASK_ID, PAD_ID, image_as_video  # noqa: F401  (re-exported)
from .errors import ConfigError, InvalidInputError
from .layers import Block, CrossBlock, init_weights


@dataclass(frozen=True)
class TextEncoderConfig:
    depth: int = 2
    width: int = 64
    heads: int = 4
    vocab_size: int = 64
    max_len: int = 16
    pad_id: int = PAD_ID
    mask_id: int = MASK_ID
    cls_id: int = CLS_ID

    def __post_init__(self):
        special = {self.pad_id, self.mask_id, self.cls_id}
        if len(special) != 3 or max(special) >= self.vocab_size:
            raise ConfigError("pad/mask/cls ids must be distinct and inside the vocabulary")
        if self.width % self.heads:
            raise ConfigError(f"text width {self.width} not divisible by {self.heads} heads")


@dataclass(frozen=True)
class CrossDecoderConfig:
    depth: int = 1
    width: int = 64
    heads: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("decoder depth must be >= 1")


class TextEncoder(nn.Module):
    """Bidirectional transformer over token ids with learned positions."""

    def __init__(self, cfg: TextEncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos = nn.Embedding(cfg.max_len, cfg.width)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width, eps=1e-6)
        init_weights(self, torch.Generator().manual_seed(seed))

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (ids.max() >= self.cfg.vocab_size or ids.min() < 0):
            raise InvalidInputError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        if ids.shape[-1] > self.cfg.max_len:
            raise InvalidInputError(f"sequence longer than max_len={self.cfg.max_len}")
        return self.tok(ids) + self.pos.weight[: ids.shape[-1]]

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None, inputs_embeds=None):
        """ids (B, n) or (n,); pad_mask True at padding. Returns (..., n, D_t)."""
        single = ids.ndim == 1
        if single:
            ids = ids[None]
            pad_mask = None if pad_mask is None else pad_mask[None]
        if pad_mask is None:
            pad_mask = ids == self.cfg.pad_id
        x = self.embed(ids) if inputs_embeds is None else inputs_embeds
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad_mask)
        x = self.norm(x)
        return x[0] if single else x


class CrossDecoder(nn.Module):
    """Text-side decoder fusing unmasked visual tokens through cross-attention.

    The first output token feeds the matching head, every position feeds the
    masked-word head.
    """

    def __init__(self, cfg: CrossDecoderConfig, visual_dim: int, vocab_size: int, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(CrossBlock(cfg.width, cfg.heads, visual_dim) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width, eps=1e-6)
        self.vtm_head = nn.Linear(cfg.width, 1)
        self.mlm_head = nn.Linear(cfg.width, vocab_size)
        init_weights(self, torch.Generator().manual_seed(seed))

    def forward(self, text: torch.Tensor, visual: torch.Tensor, pad_mask: torch.Tensor | None = None):
        """text (B, n, D_t), visual (B, N, C_v) -> fused (B, n, D_t)."""
        if visual.shape[-2] == 0:
            raise InvalidInputError("cross decoding needs at least one visual token")
        single = text.ndim == 2
        if single:
            text, visual = text[None], visual[None]
            pad_mask = None if pad_mask is None else pad_mask[None]
        x = text
        for blk in self.blocks:
            x = blk(x, visual, key_padding_mask=pad_mask)
        x = self.norm(x)
        return x[0] if single else x

    def match_logit(self, fused: torch.Tensor) -> torch.Tensor:
        return self.vtm_head(fused[..., 0, :]).squeeze(-1)

    def word_logits(self, fused: torch.Tensor) -> torch.Tensor:
        return self.mlm_head(fused)


def text_encode(encoder: TextEncoder, ids, pad_mask=None):
    return encoder(torch.as_tensor(ids, dtype=torch.long), pad_mask)


def cross_decode(decoder: CrossDecoder, text_tokens, visual_tokens, pad_mask=None):
    return decoder(text_tokens, visual_tokens, pad_mask)
