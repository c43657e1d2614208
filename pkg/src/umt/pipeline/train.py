"""Two-stage trainer: loss computation, optimizer steps, checkpoints, metrics."""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..data import PatchGrid
from ..errors import CheckpointError, ConfigError
from ..masking import apply_mask, make_mask
from ..objectives import (
    LossReport,
    alignment_targets,
    mask_text,
    mine_hard_negatives,
    mlm_loss,
    pool_text,
    pool_video,
    uta_loss,
    vtc_loss,
    vtm_loss,
    weighted_total,
)
from .checkpoint import bytes_tensor, load_tensors, match_tensors, save_tensors, tensor_bytes
from .config import RunConfig, from_dict
from .evaluate import eval_recall
from .loader import PairBatch, SynthCorpus, pad_captions, stack_frames
from .model import VISUAL_PREFIXES, UMTModel
from .optim import TrainState, adamw_step, cosine_lr

log = logging.getLogger(__name__)

# per-step random streams
DATA, MASK, TEXT, NEGATIVES, DROP_PATH = range(5)


@dataclass
class MetricsRecord:
    step: int
    losses: dict
    lr: float
    tokens: int
    wall_time: float = 0.0
    total: float = float("nan")

    def line(self) -> str:
        def f(name):
            v = self.losses.get(name)
            return "nan" if v is None else f"{v:.6g}"

        return (f"step={self.step} lr={self.lr:.6g} uta={f('uta')} vtc={f('vtc')} "
                f"vtm={f('vtm')} mlm={f('mlm')} tokens={self.tokens}")


def parse_metrics_line(line: str) -> dict:
    out = {}
    for part in line.split():
        key, value = part.split("=", 1)
        out[key] = int(value) if key in ("step", "tokens") else float(value)
    return out


@dataclass
class VisualPass:
    out: object  # StudentOutput, batched
    provenance: torch.Tensor  # (B, N, 2)
    teacher_out: object = None
    plans: list = field(default_factory=list)


class Trainer:
    """Owns the model, the TrainState and the metrics log of one run.

    Stage 2 loads the visual tower from ``cfg.init_checkpoint`` unless
    ``cfg.one_stage`` is set. Pass ``resume`` to continue from a full checkpoint.
    """

    def __init__(self, cfg: RunConfig, metrics_path=None, resume=None):
        self.cfg = cfg.validate()
        self.model = UMTModel(cfg)
        self.corpus = SynthCorpus(cfg.data, cfg.seed)
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.init_report = None
        if resume is None and cfg.stage == 2 and not cfg.one_stage:
            if not cfg.init_checkpoint:
                raise ConfigError("stage 2 needs a stage-1 checkpoint (init_checkpoint); "
                                  "set one_stage to train from scratch")
            self.init_report = self.load_visual(cfg.init_checkpoint)
        o = cfg.optim
        self.state = TrainState(self.model.trainable(), step=0, seed=cfg.seed,
                                beta1=o.beta1, beta2=o.beta2, eps=o.eps)
        if resume is not None:
            self.resume(resume)

    # ------------------------------------------------------------------ rng

    def rng(self, stream: int, step: int | None = None) -> np.random.Generator:
        step = self.state.step if step is None else step
        return np.random.default_rng([self.cfg.seed, step, stream])

    # --------------------------------------------------------------- losses

    def visual_pass(self, batch: PairBatch, mask_rng, ratio=None) -> VisualPass:
        cfg, m = self.cfg, self.model
        frames = stack_frames(batch.clips, cfg.data.pixel_mean, cfg.data.pixel_std, m.dtype)
        if ratio is None:
            ratio = cfg.mask.image if batch.kind == "image" else cfg.mask.video
        need_teacher = "uta" in cfg.loss.enabled or cfg.mask.type == "semantic"
        tout = None
        if need_teacher:
            tout = m.teacher(m.teacher.embed(frames), num_layers=cfg.student.k_align)
        tokens = m.student.embed(frames)
        B, T, L, C = tokens.shape
        grid = PatchGrid(cfg.data.patch_size, L, T, C)
        plans, batches = [], []
        for b in range(B):
            attn = tout.attention.scores[b] if tout is not None else None
            plan = make_mask(cfg.mask.type, grid, ratio, mask_rng, attention=attn)
            plans.append(plan)
            batches.append(apply_mask(tokens[b], plan, grid))
        out = m.student(batches)
        prov = torch.stack([tb.provenance for tb in batches])
        return VisualPass(out, prov, tout, plans)

    def compute_losses(self, batch: PairBatch, step: int | None = None) -> tuple[dict, int]:
        """Loss tensors per enabled objective (None when skipped) and the student token count."""
        cfg, m = self.cfg, self.model
        enabled = cfg.loss.enabled
        vp = self.visual_pass(batch, self.rng(MASK, step))
        losses = {}
        if "uta" in enabled:
            targets = alignment_targets(m.teacher, vp.teacher_out, vp.provenance)
            losses["uta"] = uta_loss(vp.out.projected, targets)
        if cfg.stage == 2:
            losses.update(self._multimodal_losses(batch, vp.out.final, step))
        return losses, int(vp.provenance.shape[0] * vp.provenance.shape[1])

    def _multimodal_losses(self, batch: PairBatch, visual: torch.Tensor, step) -> dict:
        cfg, m = self.cfg, self.model
        enabled = cfg.loss.enabled
        ids, pad = pad_captions(batch.captions, cfg.data.text_len)
        losses = {}
        text = m.text(ids, pad)
        if "vtc" in enabled or "vtm" in enabled:
            v_emb = pool_video(visual, m.vision_proj)
            t_emb = pool_text(text, m.text_proj)
            temp = m.temperature()
        if "vtc" in enabled:
            losses["vtc"] = vtc_loss(v_emb, t_emb, temp)
        if "vtm" in enabled:
            sim = (v_emb @ t_emb.T / temp).detach()
            negs = mine_hard_negatives(sim, self.rng(NEGATIVES, step))
            if negs is None:
                losses["vtm"] = None
            else:
                B = ids.shape[0]
                neg_text, neg_video = (torch.as_tensor(x, dtype=torch.long) for x in negs)
                arange = torch.arange(B)
                vi = torch.cat([arange, arange, neg_video])
                ti = torch.cat([arange, neg_text, arange])
                fused = m.decoder(text[ti], visual[vi], pad[ti])
                logits = m.decoder.match_logit(fused)
                labels = torch.cat([torch.ones(B), torch.zeros(2 * B)])
                losses["vtm"] = vtm_loss(logits, labels)
        if "mlm" in enabled:
            rng = self.rng(TEXT, step)
            masked_ids = ids.clone()
            is_masked = torch.zeros_like(pad)
            for b, cap in enumerate(batch.captions):
                cap = list(cap)[: cfg.data.text_len]
                new, _, positions = mask_text(cap, rng, cfg.mask.text, cfg.text.vocab_size, cfg.text.mask_id)
                masked_ids[b, : len(new)] = torch.as_tensor(new)
                is_masked[b, positions] = True
            fused = m.decoder(m.text(masked_ids, pad), visual, pad)
            losses["mlm"] = mlm_loss(m.decoder.word_logits(fused), ids, is_masked)
        return losses

    # ---------------------------------------------------------------- steps

    def next_batch(self) -> PairBatch:
        cfg = self.cfg
        kind = "video"
        if cfg.stage == 2 and cfg.data.interleave_images and self.state.step % 2 == 1:
            kind = "image"
        return self.corpus.random_batch(self.rng(DATA), cfg.optim.batch_size, kind)

    def train_step(self, batch: PairBatch | None = None) -> MetricsRecord:
        cfg, o = self.cfg, self.cfg.optim
        t0 = time.perf_counter()
        if batch is None:
            batch = self.next_batch()
        step = self.state.step
        lr = cosine_lr(step + 1, o.warmup_steps, o.total_steps, o.lr, o.min_lr)
        self.model.train()
        params = self.state.params
        for p in params.values():
            p.grad = None
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(self.rng(DROP_PATH).integers(2 ** 62)))
            losses, tokens = self.compute_losses(batch)
            total = weighted_total(losses, cfg.loss.weights())
            total.backward()
        grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
        if o.clip_grad > 0:
            torch.nn.utils.clip_grad_norm_(list(grads.values()), o.clip_grad)
        adamw_step(self.state, grads, lr, o.weight_decay)
        rec = MetricsRecord(
            step=self.state.step,
            losses={k: (None if v is None else float(v.detach())) for k, v in losses.items()},
            lr=lr, tokens=tokens, wall_time=time.perf_counter() - t0, total=float(total.detach()))
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as f:
                f.write(rec.line() + "\n")
        return rec

    def fit(self, steps: int, batch=None, callback=None) -> list:
        """Run ``steps`` updates. ``batch`` fixes the data (or is a callable of the step).

        ``callback(trainer, record)`` returning True stops early.
        """
        records = []
        for _ in range(steps):
            b = batch(self.state.step) if callable(batch) else batch
            rec = self.train_step(b)
            records.append(rec)
            if callback is not None and callback(self, rec):
                break
        return records

    def report(self, losses: dict) -> LossReport:
        vals = {k: (None if v is None else float(v)) for k, v in losses.items()}
        return LossReport(vals, self.cfg.loss.weights())

    # ----------------------------------------------------------- evaluation

    @torch.no_grad()
    def embed_pairs(self, batch: PairBatch):
        """Unmasked video and text embeddings for retrieval."""
        if self.cfg.stage != 2:
            raise ConfigError("retrieval needs the stage-2 towers")
        m = self.model
        m.eval()
        vp = self.visual_pass(batch, np.random.default_rng(0), ratio=0.0)
        ids, pad = pad_captions(batch.captions, self.cfg.data.text_len)
        v = pool_video(vp.out.final, m.vision_proj)
        t = pool_text(m.text(ids, pad), m.text_proj)
        m.train()
        return v, t

    def retrieval(self, batch: PairBatch, ks=(1, 5, 10)) -> dict:
        v, t = self.embed_pairs(batch)
        return eval_recall(v, t, [k for k in ks if k <= len(batch.clips)] or [1])

    # ---------------------------------------------------------- checkpoints

    def state_tensors(self) -> dict:
        tensors = {n: p.detach() for n, p in self.model.named_parameters()}
        for n in self.state.params:
            tensors[f"optim.exp_avg.{n}"] = self.state.exp_avg[n]
            tensors[f"optim.exp_avg_sq.{n}"] = self.state.exp_avg_sq[n]
        tensors["trainer.step"] = torch.tensor(self.state.step, dtype=torch.int64)
        tensors["trainer.seed"] = torch.tensor(self.cfg.seed, dtype=torch.int64)
        tensors["meta.stage"] = torch.tensor(self.cfg.stage, dtype=torch.int64)
        tensors["meta.config"] = bytes_tensor(self.cfg.to_json().encode())
        return tensors

    def save(self, path) -> None:
        save_tensors(path, self.state_tensors())

    def resume(self, path) -> None:
        """Restore parameters, optimizer moments and step from a full checkpoint."""
        found = load_tensors(path)
        expected = self.state_tensors()
        expected.pop("meta.config")
        match_tensors(expected, found)
        if int(found["trainer.seed"]) != self.cfg.seed:
            raise CheckpointError(f"{path}: seed {int(found['trainer.seed'])} differs from config seed {self.cfg.seed}")
        with torch.no_grad():
            for n, p in self.model.named_parameters():
                p.copy_(found[n])
            for n in self.state.params:
                self.state.exp_avg[n].copy_(found[f"optim.exp_avg.{n}"])
                self.state.exp_avg_sq[n].copy_(found[f"optim.exp_avg_sq.{n}"])
        self.state.step = int(found["trainer.step"])
        self.state.check()

    def load_visual(self, path) -> dict:
        """Initialize student and teacher from a checkpoint; report what stays fresh."""
        found = load_tensors(path)
        own = dict(self.model.named_parameters())
        visual = {n: p for n, p in own.items() if n.startswith(VISUAL_PREFIXES)}
        match_tensors(visual, found)
        with torch.no_grad():
            for n, p in visual.items():
                p.copy_(found[n])
        fresh = sorted(set(own) - set(visual))
        if fresh:
            log.info("freshly initialized: %s", ", ".join(fresh))
        return {"loaded": sorted(visual), "fresh": fresh}


def config_from_checkpoint(path) -> RunConfig:
    found = load_tensors(path)
    if "meta.config" not in found:
        raise CheckpointError(f"{path}: no embedded config")
    return from_dict(json.loads(tensor_bytes(found["meta.config"]).decode()))


def stage1_step(trainer: Trainer, clips) -> tuple:
    """Sample-mask-align-update on a list of clips; returns (state, record)."""
    if trainer.cfg.stage != 1:
        raise ConfigError("stage1_step needs a stage-1 trainer")
    rec = trainer.train_step(PairBatch(list(clips), [], "video"))
    return trainer.state, rec


def stage2_step(trainer: Trainer, batch: PairBatch) -> tuple:
    if trainer.cfg.stage != 2:
        raise ConfigError("stage2_step needs a stage-2 trainer")
    rec = trainer.train_step(batch)
    return trainer.state, rec


def retrieval_batch(trainer: Trainer, count: int, start: int = 0) -> PairBatch:
    """Deterministic (center-sampled) evaluation pairs from the run's corpus."""
    return trainer.corpus.video_batch(range(start, start + count), None, deterministic=True)


def quiet_warnings():
    warnings.filterwarnings("ignore", message=".*skipping (VTM|MLM).*")
