#!/usr/bin/env python3
"""Pretrained-init vs from-scratch fine-tuning under an identical budget.

For each seed, fine-tunes a classifier twice on the same synthetic digit
split -- once initialized from a pretraining checkpoint, once from random
init -- and reports held-out top-1 for both. Usage:

    python3 scripts/compare_transfer.py --init runs/pretrain/ckpt/epoch_0030.srmk
"""

import argparse
import sys

from srmae.checkpoint import load_checkpoint
from srmae.config import DataConfig, TrainConfig
from srmae.model import SrmaeConfig
from srmae.training import finetune


def finetune_config(model_cfg, seed, count, epochs, batch_size):
    """Identical budget for both arms; only the initialization differs."""
    cfg = TrainConfig()
    cfg.mode = "finetune"
    cfg.model = SrmaeConfig(**{f: getattr(model_cfg, f) for f in (
        "patch_size", "image_size", "channels", "enc_dim", "enc_depth", "enc_heads",
        "head_dim", "head_depth", "head_heads", "hpb_width", "hpb_blocks",
        "scale_factor", "mask_ratio")})
    cfg.model.num_classes = 10
    cfg.data = DataConfig(kind="synthetic", count=count,
                          resolution=model_cfg.image_size, seed=seed)
    cfg.epochs = epochs
    cfg.batch_size = batch_size
    cfg.warmup_epochs = min(max(1, epochs // 5), epochs - 1)
    cfg.beta2 = 0.999
    cfg.flip_prob = 0.0  # digits are not mirror-symmetric
    cfg.seed = seed
    return cfg.validate()


def run_comparison(ckpt_path, seeds=(0, 1, 2, 3, 4), count=500, epochs=8,
                   batch_size=64, log=None):
    """Returns a list of (seed, top1_pretrained, top1_scratch) tuples."""
    init = load_checkpoint(ckpt_path)
    results = []
    for seed in seeds:
        cfg = finetune_config(init.model_config, seed, count, epochs, batch_size)
        _, rec_pre = finetune(cfg, init=init)
        _, rec_scr = finetune(finetune_config(init.model_config, seed, count,
                                              epochs, batch_size))
        top1_pre = [r for r in rec_pre if r["phase"] == "finetune_eval"][-1]["top1"]
        top1_scr = [r for r in rec_scr if r["phase"] == "finetune_eval"][-1]["top1"]
        results.append((seed, top1_pre, top1_scr))
        if log:
            log(f"seed {seed}: pretrained {top1_pre:.4f}  scratch {top1_scr:.4f}")
    return results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--init", required=True, help="pretraining checkpoint (.srmk)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--count", type=int, default=500, help="fine-tuning images per seed")
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--batch-size", type=int, default=64)
    args = ap.parse_args(argv)

    results = run_comparison(args.init, seeds=args.seeds, count=args.count,
                             epochs=args.epochs, batch_size=args.batch_size, log=print)
    wins = sum(pre >= scr for _, pre, scr in results)
    print(f"pretrained init >= scratch in {wins}/{len(results)} seeds")
    return 0 if wins * 2 > len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
