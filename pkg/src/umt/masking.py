"""Mask plans: semantic (attention-weighted), random, and tube masking."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .data import PatchGrid, TokenBatch
from .errors import InvalidInputError, InvalidRatioError


@dataclass
class MaskPlan:
    keep: np.ndarray  # (T, L) bool
    ratio: float
    unmasked_per_frame: int

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        counts = self.keep.sum(axis=1)
        if not (counts == self.unmasked_per_frame).all():
            raise InvalidInputError(f"every frame must keep exactly {self.unmasked_per_frame} tokens")

    @property
    def shape(self):
        return self.keep.shape

    @property
    def num_unmasked(self) -> int:
        return self.unmasked_per_frame * self.keep.shape[0]

    def kept_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(row) for row in self.keep]


def unmasked_count(L: int, ratio: float) -> int:
    """Tokens kept per frame, floor(L * (1 - ratio))."""
    if not 0.0 <= ratio < 1.0:
        raise InvalidRatioError(f"masking ratio must be in [0, 1), got {ratio}")
    # guard against 196 * (1 - 0.8) = 39.19999... style drift
    return int(math.floor(L * (1.0 - ratio) + 1e-9))


def _checked_count(L, ratio):
    m = unmasked_count(L, ratio)
    if m < 1:
        raise InvalidRatioError(f"ratio {ratio} keeps no tokens out of {L}")
    return m


def sample_without_replacement(weights: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Sequential weighted draws; each pick renormalizes over the remaining tokens.

    ``weights`` is (L,) or (F, L); rows are sampled independently and in row
    order per draw. A row whose remaining weight is all zero falls back to
    uniform over its remaining tokens. Returns (m,) or (F, m) indices in draw order.
    """
    w = np.array(weights, dtype=np.float64, ndmin=2)
    F, L = w.shape
    if not 0 <= m <= L:
        raise InvalidInputError(f"cannot draw {m} of {L} tokens")
    alive = np.ones((F, L), dtype=bool)
    picked = np.empty((F, m), dtype=np.int64)
    rows = np.arange(F)
    for j in range(m):
        p = np.where(alive, w, 0.0)
        empty = p.sum(axis=1) <= 0
        p[empty] = alive[empty]
        cdf = np.cumsum(p, axis=1)
        x = rng.random(F) * cdf[:, -1]
        idx = (cdf <= x[:, None]).sum(axis=1)
        picked[:, j] = idx
        alive[rows, idx] = False
    return picked[0] if np.ndim(weights) == 1 else picked


def semantic_mask(A, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Keep tokens per frame by multinomial draws weighted by the attention map."""
    scores = A.scores if hasattr(A, "scores") else A
    scores = np.asarray(torch.as_tensor(scores).detach().double().cpu())
    if scores.ndim != 2:
        raise InvalidInputError(f"attention must be (T, L), got {scores.shape}")
    if (scores < 0).any():
        raise InvalidInputError("attention weights must be non-negative")
    T, L = scores.shape
    m = _checked_count(L, ratio)
    keep = np.zeros((T, L), dtype=bool)
    np.put_along_axis(keep, sample_without_replacement(scores, m, rng), True, axis=1)
    return MaskPlan(keep, ratio, m)


def random_mask(grid: PatchGrid, ratio: float, rng: np.random.Generator) -> MaskPlan:
    T, L = grid.frames, grid.tokens_per_frame
    m = _checked_count(L, ratio)
    keep = np.zeros((T, L), dtype=bool)
    for t in range(T):
        keep[t, rng.permutation(L)[:m]] = True
    return MaskPlan(keep, ratio, m)


def tube_mask(grid: PatchGrid, ratio: float, rng: np.random.Generator) -> MaskPlan:
    T, L = grid.frames, grid.tokens_per_frame
    m = _checked_count(L, ratio)
    row = np.zeros(L, dtype=bool)
    row[rng.permutation(L)[:m]] = True
    return MaskPlan(np.tile(row, (T, 1)), ratio, m)


def make_mask(kind: str, grid: PatchGrid, ratio: float, rng: np.random.Generator, attention=None) -> MaskPlan:
    if kind == "semantic":
        if attention is None:
            raise InvalidInputError("semantic masking needs a teacher attention map")
        return semantic_mask(attention, ratio, rng)
    if kind == "random":
        return random_mask(grid, ratio, rng)
    if kind == "tube":
        return tube_mask(grid, ratio, rng)
    raise InvalidInputError(f"unknown mask type {kind!r}")


def apply_mask(tokens: torch.Tensor, plan: MaskPlan, grid: PatchGrid | None = None) -> TokenBatch:
    """Gather kept tokens frame-major, spatial index ascending."""
    T, L = plan.shape
    if tokens.ndim != 3 or tokens.shape[:2] != (T, L):
        raise InvalidInputError(f"tokens {tuple(tokens.shape)} do not match plan {(T, L)}")
    if grid is None:
        grid = PatchGrid(0, L, T, tokens.shape[-1])
    elif (grid.frames, grid.tokens_per_frame) != (T, L):
        raise InvalidInputError(f"plan {(T, L)} does not match grid {grid}")
    t_idx, l_idx = np.nonzero(plan.keep)
    prov = torch.as_tensor(np.stack([t_idx, l_idx], axis=1), dtype=torch.long)
    gathered = tokens[prov[:, 0], prov[:, 1]]
    return TokenBatch(gathered, prov, grid)


def scatter_tokens(batch: TokenBatch, fill: float = 0.0) -> torch.Tensor:
    """Inverse of apply_mask: place tokens back on a (T, L, C) canvas."""
    g = batch.grid
    out = torch.full((g.frames, g.tokens_per_frame, batch.tokens.shape[-1]), fill, dtype=batch.tokens.dtype)
    out[batch.provenance[:, 0], batch.provenance[:, 1]] = batch.tokens
    return out


def pack_plan(plan: MaskPlan) -> bytes:
    """Header (T, L, m) as little-endian u32, then the keep bits row-major."""
    T, L = plan.shape
    return struct.pack("<3I", T, L, plan.unmasked_per_frame) + np.packbits(plan.keep.ravel()).tobytes()


def unpack_plan(blob: bytes, ratio: float = float("nan")) -> MaskPlan:
    T, L, m = struct.unpack_from("<3I", blob)
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, offset=12), count=T * L)
    return MaskPlan(bits.reshape(T, L).astype(bool), ratio, m)
