"""Training losses (UTA, VTC, VTM, MLM), text masking, and pooling."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import CLS_ID, MASK_ID, PAD_ID, SEP_ID
from .errors import InvalidInputError

EPS = 1e-6
SPECIAL_IDS = (PAD_ID, CLS_ID, MASK_ID, SEP_ID)
OBJECTIVES = ("uta", "vtc", "vtm", "mlm")


def l2_normalize(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def alignment_targets(teacher, teacher_out, provenance: torch.Tensor) -> list:
    """Teacher tokens at the student's kept positions, one tensor per aligned layer.

    The final layer goes through the teacher's visual projection; earlier
    layers are used as normalized layer outputs. Every row is unit L2 norm.
    ``provenance`` is (..., N, 2) matching the leading dims of the teacher output.
    """
    t, l = provenance[..., 0], provenance[..., 1]
    targets = []
    last = len(teacher_out.layer_tokens) - 1
    for k, layer in enumerate(teacher_out.layer_tokens):
        if provenance.ndim == 3:
            b = torch.arange(layer.shape[0])[:, None]
            picked = layer[b, t, l]
        else:
            picked = layer[t, l]
        if k == last:
            picked = teacher.visual_project(picked)
        targets.append(l2_normalize(picked))
    return targets


def uta_loss(projected, targets) -> torch.Tensor:
    """Element-mean squared error between L2-normalized student and teacher tokens,
    averaged over aligned layers."""
    if len(projected) != len(targets):
        raise InvalidInputError(f"{len(projected)} student layers vs {len(targets)} targets")
    per_layer = []
    for s, t in zip(projected, targets):
        if s.shape != t.shape:
            raise InvalidInputError(f"student {tuple(s.shape)} vs target {tuple(t.shape)}")
        per_layer.append(((l2_normalize(s) - t) ** 2).mean())
    return torch.stack(per_layer).mean()


def vtc_loss(video_emb: torch.Tensor, text_emb: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric InfoNCE over (B, D) embeddings; row i of each side is a positive pair."""
    temperature = torch.as_tensor(temperature, dtype=video_emb.dtype)
    if (temperature <= 0).any():
        raise InvalidInputError("temperature must be positive")
    if video_emb.shape != text_emb.shape:
        raise InvalidInputError("video and text batches must match")
    logits = video_emb @ text_emb.T / temperature
    labels = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def hard_negative_probs(similarity: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax over similarities with the diagonal (positive) excluded."""
    s = similarity.detach().double()
    s = s.masked_fill(torch.eye(s.shape[0], dtype=torch.bool), float("-inf"))
    return s.softmax(dim=1)


def mine_hard_negatives(similarity: torch.Tensor, rng: np.random.Generator):
    """Sample one negative text per video and one negative video per text.

    ``similarity`` is (B, B) with video rows and text columns. Returns
    ``(neg_text_for_video, neg_video_for_text)`` index arrays, or None when B < 2.
    """
    B = similarity.shape[0]
    if B < 2:
        warnings.warn("batch of one has no negatives; skipping VTM")
        return None
    p_v2t = hard_negative_probs(similarity).numpy()
    p_t2v = hard_negative_probs(similarity.T).numpy()
    neg_text = np.array([rng.choice(B, p=row / row.sum()) for row in p_v2t])
    neg_video = np.array([rng.choice(B, p=row / row.sum()) for row in p_t2v])
    return neg_text, neg_video


def vtm_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy over match logits (1 = matched pair)."""
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def mask_text(ids, rng: np.random.Generator, ratio: float = 0.5, vocab_size: int = 64,
              mask_id: int = MASK_ID, special_ids=SPECIAL_IDS):
    """Mask floor(ratio * n) non-special tokens, BERT style (80% mask, 10% random, 10% kept).

    Returns ``(masked_ids, target_ids, positions)``; targets hold the original
    ids at the masked positions, in position order.
    """
    ids = [int(i) for i in ids]
    maskable = [i for i, tok in enumerate(ids) if tok not in special_ids]
    if not maskable:
        raise InvalidInputError("sequence has no maskable tokens")
    k = int(math.floor(ratio * len(maskable) + 1e-9))
    positions = sorted(int(p) for p in rng.choice(maskable, size=k, replace=False))
    masked = list(ids)
    n_special = max(special_ids) + 1
    for p in positions:
        u = rng.random()
        if u < 0.8:
            masked[p] = mask_id
        elif u < 0.9:
            masked[p] = int(rng.integers(n_special, vocab_size))
    return masked, [ids[p] for p in positions], positions


def mlm_loss(logits: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor):
    """Mean cross-entropy over masked positions only.

    logits (..., n, V), targets (..., n) ids, masked (..., n) bool. Returns None
    (with a warning) when nothing is masked.
    """
    if not masked.any():
        warnings.warn("no masked text positions; skipping MLM")
        return None
    return F.cross_entropy(logits[masked], targets[masked])


def pool_video(tokens: torch.Tensor, proj) -> torch.Tensor:
    """Mean over unmasked tokens (..., N, C), project, then L2-normalize."""
    if tokens.shape[-2] == 0:
        raise InvalidInputError("cannot pool an empty token batch")
    return l2_normalize(proj(tokens.mean(dim=-2)))


def pool_text(tokens: torch.Tensor, proj) -> torch.Tensor:
    """First (class) token embedding, projected and L2-normalized."""
    return l2_normalize(proj(tokens[..., 0, :]))


@dataclass
class LossReport:
    losses: dict = field(default_factory=dict)  # objective -> float or None when skipped
    weights: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return sum(self.weights.get(k, 1.0) * v for k, v in self.losses.items() if v is not None)

    def get(self, name, default=float("nan")):
        v = self.losses.get(name)
        return default if v is None else v


def weighted_total(losses: dict, weights: dict) -> torch.Tensor:
    terms = [weights.get(k, 1.0) * v for k, v in losses.items() if v is not None]
    if not terms:
        raise InvalidInputError("no objective produced a loss")
    return torch.stack(terms).sum()
