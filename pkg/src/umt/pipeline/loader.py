"""Synthetic corpus access and batch assembly for training."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from ..data import COMBINATIONS, PAD_ID, VideoClip, caption_ids, dense_sample, image_as_video, render_video, sparse_sample


@dataclass
class PairBatch:
    clips: list  # VideoClip per sample
    captions: list  # token id lists, may be empty for stage 1
    kind: str = "video"  # video | image


def num_workers() -> int:
    return max(int(os.environ.get("UMT_NUM_WORKERS", "0")), 0)


class SynthCorpus:
    """Item ``i`` is rendered from its own seed (corpus seed, i), so batches are
    identical whatever the worker count or fetch order."""

    def __init__(self, data_cfg, seed: int):
        self.cfg = data_cfg
        self.seed = seed
        self._perm = np.random.default_rng(seed).permutation(len(COMBINATIONS))
        self._render = lru_cache(maxsize=1024)(self._render_uncached)

    def __len__(self):
        return self.cfg.corpus_size

    def _render_uncached(self, index: int):
        shape, color, direction = COMBINATIONS[self._perm[index % len(COMBINATIONS)]]
        rng = np.random.default_rng([self.seed, index])
        video = render_video(shape, color, direction, rng, self.cfg.source_frames, self.cfg.image_size)
        return video, caption_ids(shape, color, direction), int(self._perm[index % len(COMBINATIONS)])

    def _fetch(self, indices):
        workers = num_workers()
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                return list(pool.map(self._render, indices))
        return [self._render(i) for i in indices]

    def sample_indices(self, rng, T):
        c = self.cfg
        if c.sampling == "dense":
            return dense_sample(c.source_frames, T, c.dense_stride, rng)
        return sparse_sample(c.source_frames, T, rng)

    def video_batch(self, indices, rng, deterministic: bool = False) -> PairBatch:
        clips, caps = [], []
        for i, (video, cap, label) in zip(indices, self._fetch(list(indices))):
            if deterministic:
                idx = sparse_sample(self.cfg.source_frames, self.cfg.frames, deterministic=True)
            else:
                idx = self.sample_indices(rng, self.cfg.frames)
            clips.append(VideoClip(video[idx], idx, source_id=f"synth-{self.seed}-{i}", label=label))
            caps.append(cap)
        return PairBatch(clips, caps, "video")

    def image_batch(self, indices) -> PairBatch:
        clips, caps = [], []
        for i, (video, cap, label) in zip(indices, self._fetch(list(indices))):
            clips.append(image_as_video(video[len(video) // 2], source_id=f"synth-{self.seed}-{i}", label=label))
            caps.append(cap)
        return PairBatch(clips, caps, "image")

    def random_batch(self, rng, batch_size: int, kind: str = "video") -> PairBatch:
        n = len(self)
        indices = rng.choice(n, size=batch_size, replace=batch_size > n).tolist()
        return self.video_batch(indices, rng) if kind == "video" else self.image_batch(indices)


def stack_frames(clips, mean: float, std: float, dtype) -> torch.Tensor:
    frames = np.stack([c.frames for c in clips])
    return ((torch.as_tensor(frames, dtype=torch.float64) - mean) / std).to(dtype)


def pad_captions(captions, length: int):
    """Right-pad id lists; returns (ids (B, n) long, pad_mask (B, n) bool)."""
    ids = torch.full((len(captions), length), PAD_ID, dtype=torch.long)
    for b, cap in enumerate(captions):
        cap = list(cap)[:length]
        ids[b, : len(cap)] = torch.as_tensor(cap, dtype=torch.long)
    return ids, ids == PAD_ID
