"""Command line entry point: ``umt stage1|stage2|eval|ablate|account``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch
import yaml

from ..errors import CheckpointError, ConfigError
from .ablation import AXES, ablation_runner, format_table
from .config import PRESETS, apply_overrides, build_config, load_config_file
from .evaluate import token_account
from .train import Trainer, config_from_checkpoint, retrieval_batch

log = logging.getLogger("umt")


def _config(args, stage=None):
    overrides = load_config_file(args.config) if args.config else {}
    if getattr(args, "mask", None):
        overrides["mask.type"] = args.mask
    if getattr(args, "mask_ratio", None) is not None:
        overrides["mask.video"] = args.mask_ratio
    if getattr(args, "init", None):
        overrides["init_checkpoint"] = args.init
    if getattr(args, "one_stage", False):
        overrides["one_stage"] = True
    cfg = build_config(args.preset or "desk-tiny", stage=stage, overrides=overrides, seed=args.seed)
    if getattr(args, "steps", None):
        cfg = apply_overrides(cfg, {"optim.total_steps": args.steps,
                                    "optim.warmup_steps": min(cfg.optim.warmup_steps, args.steps)})
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args, stage):
    cfg = _config(args, stage)
    out = _out_dir(args)
    (out / "config.yaml").write_text(yaml.safe_dump(json.loads(cfg.to_json()), sort_keys=True))
    metrics = out / "metrics.log"
    metrics.unlink(missing_ok=True)
    trainer = Trainer(cfg, metrics_path=metrics, resume=args.resume)
    if trainer.init_report:
        fresh = Counter(n.split(".")[0] for n in trainer.init_report["fresh"])
        log.info("stage-1 init: %d tensors loaded; fresh: %s", len(trainer.init_report["loaded"]),
                 ", ".join(f"{k} ({v})" for k, v in sorted(fresh.items())))
    remaining = cfg.optim.total_steps - trainer.state.step
    for rec in trainer.fit(remaining):
        if rec.step % max(cfg.eval_every, 1) == 0 or rec.step == cfg.optim.total_steps:
            log.info(rec.line())
    trainer.save(out / "checkpoint.umtk")
    print(f"saved {out / 'checkpoint.umtk'} after {trainer.state.step} steps")
    return 0


def cmd_eval(args):
    cfg = config_from_checkpoint(args.checkpoint)
    trainer = Trainer(cfg, resume=args.checkpoint)
    if cfg.stage == 2:
        batch = retrieval_batch(trainer, args.queries, start=args.start)
        result = {f"R@{k}": v for k, v in trainer.retrieval(batch).items()}
    else:
        batch = retrieval_batch(trainer, cfg.optim.batch_size, start=args.start)
        with torch.no_grad():
            losses, _ = trainer.compute_losses(batch)
        result = {"uta": float(losses["uta"])}
    print(json.dumps(result, indent=2))
    return 0


def cmd_ablate(args):
    base = _config(args)
    rows = ablation_runner(args.axis, args.values or None, base, steps=args.steps or 30)
    table = format_table(rows)
    print(table)
    if args.out:
        (_out_dir(args) / f"ablation_{args.axis}.txt").write_text(table + "\n")
    return 0


def cmd_account(args):
    print(json.dumps(token_account(_config(args)), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="umt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML key/value overrides (e.g. mask.video: 0.8)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--out", default="runs/latest")
        sp.add_argument("--mask", choices=("semantic", "random", "tube"))
        sp.add_argument("--mask-ratio", type=float)
        sp.add_argument("--steps", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    s1 = common(sub.add_parser("stage1", help="video-only unmasked token alignment"))
    s1.add_argument("--resume")
    s2 = common(sub.add_parser("stage2", help="multimodal training from a stage-1 checkpoint"))
    s2.add_argument("--init", help="stage-1 checkpoint for the visual tower")
    s2.add_argument("--one-stage", action="store_true", help="train without a stage-1 checkpoint")
    s2.add_argument("--resume")
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint on synthetic pairs"))
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--queries", type=int, default=16)
    ev.add_argument("--start", type=int, default=0)
    ab = common(sub.add_parser("ablate", help="sweep one ablation axis"))
    ab.add_argument("--axis", required=True, choices=sorted(AXES))
    ab.add_argument("--values", nargs="*")
    common(sub.add_parser("account", help="token and attention-element counts"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    np.set_printoptions(precision=4)
    try:
        if args.command == "stage1":
            return cmd_train(args, 1)
        if args.command == "stage2":
            return cmd_train(args, 2)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        return cmd_account(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
