"""All towers of a run bundled under checkpoint-stable names."""
from __future__ import annotations

import torch
import torch.nn as nn

from ..layers import init_weights
from ..multimodal import CrossDecoder, TextEncoder
from ..student import Student
from ..teacher import Teacher

VISUAL_PREFIXES = ("student.", "teacher.")
TEMPERATURE_RANGE = (0.001, 0.5)


class UMTModel(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.teacher = Teacher(cfg.teacher)
        self.student = Student(cfg.student_config(), seed=cfg.seed)
        if cfg.stage == 2:
            self.text = TextEncoder(cfg.text, seed=cfg.seed + 1)
            self.decoder = CrossDecoder(cfg.decoder, cfg.student.width, cfg.text.vocab_size, seed=cfg.seed + 2)
            self.vision_proj = nn.Linear(cfg.student.width, cfg.embed_dim)
            self.text_proj = nn.Linear(cfg.text.width, cfg.embed_dim)
            g = torch.Generator().manual_seed(cfg.seed + 3)
            init_weights(self.vision_proj, g)
            init_weights(self.text_proj, g)
            self.temp = nn.Parameter(torch.tensor(cfg.temperature))
        self.to(getattr(torch, cfg.dtype))

    @property
    def dtype(self):
        return self.student.patch_embed.weight.dtype

    def temperature(self) -> torch.Tensor:
        return self.temp.clamp(*TEMPERATURE_RANGE)

    def trainable(self) -> dict:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def visual_parameters(self) -> dict:
        """Parameters shared by the image and video pathways."""
        return {n: p for n, p in self.named_parameters() if n.startswith("student.")}
