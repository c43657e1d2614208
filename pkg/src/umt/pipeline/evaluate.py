"""Retrieval recall and token/attention accounting."""
from __future__ import annotations

import dataclasses

import torch

from ..errors import InvalidInputError
from ..masking import unmasked_count
from ..objectives import l2_normalize


def eval_recall(video_embs, text_embs, ks=(1, 5, 10)) -> dict:
    """Text-to-video recall@k by cosine similarity; ties go to the lower index."""
    v = l2_normalize(torch.as_tensor(video_embs, dtype=torch.float64))
    t = l2_normalize(torch.as_tensor(text_embs, dtype=torch.float64))
    Q = v.shape[0]
    if Q == 0:
        raise InvalidInputError("no queries")
    if t.shape[0] != Q:
        raise InvalidInputError("video and text sets must pair row by row")
    sim = t @ v.T  # (text, video)
    own = sim.diagonal()[:, None]
    idx = torch.arange(Q)
    better = (sim > own) | ((sim == own) & (idx[None, :] < idx[:, None]))
    rank = better.sum(dim=1)
    return {k: float((rank < k).double().mean()) for k in ks}


@dataclasses.dataclass
class TokenAccount:
    frames: int
    tokens_per_frame: int
    teacher_tokens: int
    student_tokens: int
    unmasked_per_frame: int
    student_attention_elements: int  # per block, per sample
    teacher_attention_elements: int  # per block, per sample, all frames

    def as_dict(self):
        return dataclasses.asdict(self)


def count_tokens(frames: int, tokens_per_frame: int, ratio: float, temporal_patch: int = 1) -> TokenAccount:
    T = frames // temporal_patch
    L = tokens_per_frame
    m = unmasked_count(L, ratio)
    n = m * T
    return TokenAccount(
        frames=T,
        tokens_per_frame=L,
        teacher_tokens=frames * L,
        student_tokens=n,
        unmasked_per_frame=m,
        student_attention_elements=n * n,
        teacher_attention_elements=frames * (L + 1) ** 2,
    )


def token_account(cfg) -> dict:
    """Closed-form token counts per pathway of a run config."""
    L = (cfg.data.image_size // cfg.data.patch_size) ** 2
    return {
        "video": count_tokens(cfg.data.frames, L, cfg.mask.video, cfg.student.temporal_patch).as_dict(),
        "image": count_tokens(1, L, cfg.mask.image).as_dict(),
    }
