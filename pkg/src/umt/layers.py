"""Transformer building blocks shared by every tower."""
from __future__ import annotations

import contextlib
import hashlib
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

_COUNTERS: list["AttentionCounter"] = []


class AttentionCounter:
    """Tallies attention score-matrix elements (per sample, heads not multiplied)."""

    def __init__(self):
        self.elements = 0
        self.calls = 0
        self.shapes: list[tuple[int, int]] = []

    def record(self, batch: int, n_q: int, n_k: int):
        self.elements += batch * n_q * n_k
        self.calls += 1
        self.shapes.append((n_q, n_k))


@contextlib.contextmanager
def count_attention():
    counter = AttentionCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def init_weights(module: nn.Module, generator: torch.Generator | None = None):
    """Truncated-normal (std 0.02) linear weights, zero biases, unit norm scales."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04, generator=generator)


def param_checksum(named) -> str:
    """sha256 over (name, dtype, shape, bytes) of every tensor, in name order."""
    if isinstance(named, nn.Module):
        named = dict(named.named_parameters())
    h = hashlib.sha256()
    for name in sorted(named):
        t = named[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        mask = torch.empty(shape, dtype=x.dtype, device=x.device).bernoulli_(keep)
        return x * mask / keep


class Attention(nn.Module):
    """Multi-head attention; self-attention when ``context`` is None.

    ``key_padding_mask`` is True at keys to ignore; ``attn_mask`` is True where
    a query may attend.
    """

    def __init__(self, dim, heads, context_dim=None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(context_dim or dim, dim)
        self.v = nn.Linear(context_dim or dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.identity_attention = False  # test hook: each query attends only to itself

    def _split(self, x):
        B, n, _ = x.shape
        return x.view(B, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context=None, key_padding_mask=None, attn_mask=None):
        kv = x if context is None else context
        B, n_q, C = x.shape
        n_k = kv.shape[1]
        for c in _COUNTERS:
            c.record(B, n_q, n_k)
        v = self._split(self.v(kv))
        if self.identity_attention:
            out = v
        else:
            q, k = self._split(self.q(x)), self._split(self.k(kv))
            logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
            if key_padding_mask is not None:
                logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
            if attn_mask is not None:
                logits = logits.masked_fill(~attn_mask[:, None], float("-inf"))
            out = logits.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, n_q, C))


class Mlp(nn.Module):
    def __init__(self, dim, ratio=4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x))."""

    def __init__(self, dim, heads, mlp_ratio=4.0, drop_path=0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio)
        self.drop_path = DropPath(drop_path)

    def forward(self, x, key_padding_mask=None, attn_mask=None):
        x = x + self.drop_path(self.attn(self.ln1(x), key_padding_mask=key_padding_mask, attn_mask=attn_mask))
        return x + self.drop_path(self.mlp(self.ln2(x)))


class CrossBlock(nn.Module):
    """Self-attention over text, cross-attention to visual tokens, then MLP."""

    def __init__(self, dim, heads, context_dim, mlp_ratio=4.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.ln_cross = nn.LayerNorm(dim, eps=1e-6)
        self.cross = Attention(dim, heads, context_dim=context_dim)
        self.ln2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, context, key_padding_mask=None):
        x = x + self.attn(self.ln1(x), key_padding_mask=key_padding_mask)
        x = x + self.cross(self.ln_cross(x), context=context)
        return x + self.mlp(self.ln2(x))
