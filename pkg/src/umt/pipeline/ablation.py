"""Desk-scale ablation sweeps: one short training run per value of one axis."""
from __future__ import annotations

import dataclasses
import logging

import numpy as np

from ..errors import ConfigError
from .config import RunConfig, apply_overrides
from .train import Trainer, retrieval_batch

log = logging.getLogger(__name__)

OBJECTIVE_ROWS = (
    ("vtc", "uta"),
    ("vtm", "uta"),
    ("vtc", "vtm", "uta"),
    ("vtm", "mlm", "uta"),
    ("vtc", "vtm", "mlm", "uta"),
    ("vtc", "vtm", "mlm"),
)

AXES = {
    "mask_type": ("mask.type", ("semantic", "random", "tube")),
    "mask_ratio": ("mask.video", (0.5, 0.6, 0.8, 0.9)),
    "aligned_layers": ("student.k_align", (1, 3, 6, 9, 12)),
    "objectives": ("loss.enabled", OBJECTIVE_ROWS),
    "attention": ("student.attention", ("joint", "spatial")),
    "sampling": ("data.sampling", ("sparse", "dense")),
}


def _parse_value(axis, raw):
    if not isinstance(raw, str):
        return raw
    if axis == "objectives":
        return tuple(v.strip() for v in raw.replace(",", "+").split("+") if v.strip())
    if axis == "aligned_layers":
        return int(raw)
    if axis == "mask_ratio":
        return float(raw)
    return raw


def _axis_base(axis: str, values, base: RunConfig) -> RunConfig:
    if axis == "aligned_layers":
        depth = max(int(v) for v in values)
        if depth > base.student.depth or depth > base.teacher.depth:
            log.info("raising student/teacher depth to %d for the aligned-layer sweep", depth)
            base = apply_overrides(base, {
                "student.depth": max(depth, base.student.depth),
                "teacher.depth": max(depth, base.teacher.depth)})
    if axis == "objectives" and base.stage == 1:
        base = apply_overrides(base, {
            "stage": 2, "one_stage": True, "optim.batch_size": max(base.optim.batch_size, 4)})
    return base


def ablation_runner(axis: str, values=None, base: RunConfig | None = None, steps: int = 30,
                    eval_pairs: int = 8) -> list[dict]:
    """Train ``steps`` updates per value with a shared seed; return one row per value.

    Rows hold the final and trailing-mean weighted loss, student tokens per
    step, and batch R@1 for multimodal runs. No ordering between rows is implied.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    key, default_values = AXES[axis]
    values = [_parse_value(axis, v) for v in (values or default_values)]
    base = _axis_base(axis, values, base or RunConfig())
    rows = []
    for value in values:
        cfg = apply_overrides(base, {key: value, "optim.total_steps": steps,
                                     "optim.warmup_steps": min(base.optim.warmup_steps, steps)})
        if cfg.stage == 2 and not cfg.init_checkpoint:
            cfg = dataclasses.replace(cfg, one_stage=True)
        cfg.validate()
        trainer = Trainer(cfg)
        records = trainer.fit(steps)
        totals = [r.total for r in records]
        row = {"axis": axis, "value": "+".join(value) if isinstance(value, tuple) else value,
               "final_loss": totals[-1], "mean_loss_last10": float(np.mean(totals[-10:])),
               "tokens": records[-1].tokens}
        if cfg.stage == 2:
            row["r@1"] = trainer.retrieval(retrieval_batch(trainer, eval_pairs), ks=(1,))[1]
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]

    def cell(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    body = [[cell(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
