"""Command-line entry point.

Commands: pretrain, finetune, eval, gradcheck, inspect, reconstruct.
Exit codes: 0 success, 1 verification failure, 2 config error,
3 artifact mismatch, 4 I/O error.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, params_to_tensors
from .config import canonical_text, load_config, set_key
from .data import ImageBatch, load_dataset, make_lr_view, patchify, unpatchify, write_netpbm
from .errors import (CheckpointError, ConfigurationError, IngestionError, NumericError,
                     ShapeError, SrmaeError, UsageError, VerificationError)
from .gradcheck import TOLERANCES
from .masking import generate_mask, split_visible
from .model import FROZEN_PARAMS, SrmaeModel
from .tensor import gather_tokens
from .tensor import Tensor, no_grad
from .training import build_dataset, evaluate, finetune, normalize, pretrain
from .verify import run_gradcheck, tiny_config

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_IO = 4


def _limit_threads():
    cap = os.environ.get("SRMAE_THREADS")
    if not cap:
        return None
    try:
        import threadpoolctl

        return threadpoolctl.threadpool_limits(int(cap))
    except (ImportError, ValueError):
        return None


def _write_manifest(out_dir, cfg, config_path):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256(Path(config_path).read_bytes()).hexdigest() if config_path else "-"
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    header = (f"# srmae run manifest\n# code_version = {__version__}\n"
              f"# config_digest = {digest}\n# timestamp = {stamp}\n"
              "# layout: manifest.txt metrics.ndjson ckpt/epoch_%04d.srmk recon/\n")
    (out / "manifest.txt").write_text(header + canonical_text(cfg))


def _load_ckpt_for(args):
    if not args.init:
        return None
    return load_checkpoint(args.init)


def cmd_pretrain(args):
    cfg = load_config(args.config, args.set or [])
    cfg.mode = "pretrain"
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        _write_manifest(args.out, cfg, args.config)
    resume = _load_ckpt_for(args)
    pretrain(cfg, out_dir=args.out, resume=resume, log=print if args.verbose else None)
    return EXIT_OK


def cmd_finetune(args):
    cfg = load_config(args.config, args.set or [])
    cfg.mode = "finetune"
    if args.seed is not None:
        cfg.seed = args.seed
    init = _load_ckpt_for(args)
    if args.out:
        _write_manifest(args.out, cfg, args.config)
    _, records = finetune(cfg, init=init, out_dir=args.out, log=print)
    evals = [r for r in records if r.get("phase") == "finetune_eval"]
    if evals:
        last = evals[-1]
        print(f"final top1 {last['top1']:.4f} top5 {last['top5']:.4f}")
    return EXIT_OK


def cmd_eval(args):
    if not args.init:
        raise ConfigurationError("eval requires --init CHECKPOINT")
    ckpt = load_checkpoint(args.init)
    if args.config:
        cfg = load_config(args.config, args.set or [])
    else:
        cfg = ckpt.train_config
        for ov in args.set or []:
            key, _, raw = ov.partition("=")
            set_key(cfg, key.strip(), raw.strip())
        cfg.validate()
    mcfg = ckpt.model_config
    if cfg.model.image_size != mcfg.image_size or cfg.model.patch_size != mcfg.patch_size:
        raise ShapeError(
            f"checkpoint geometry ({mcfg.image_size}, P={mcfg.patch_size}) does not match "
            f"config ({cfg.model.image_size}, P={cfg.model.patch_size})")
    if "classifier.weight" not in ckpt.params:
        raise ShapeError("checkpoint has no classifier head; fine-tune before eval")
    model = SrmaeModel(mcfg, params=params_to_tensors(ckpt.params, FROZEN_PARAMS))
    dataset = build_dataset(cfg.data)
    top1, top5 = evaluate(model, dataset, cfg.eval_resolution, ckpt.norm_mean,
                          ckpt.norm_std, batch_size=cfg.batch_size)
    print(f'{{"phase": "eval", "eval_resolution": {cfg.eval_resolution}, '
          f'"top1": {top1:.6f}, "top5": {top5:.6f}, "count": {len(dataset)}}}')
    return EXIT_OK


def cmd_gradcheck(args):
    dtype = np.float64 if args.dtype == "float64" else np.float32
    tol = TOLERANCES[np.dtype(dtype)]
    cfg = load_config(args.config, args.set or []).model if args.config else tiny_config()
    t0 = time.time()
    results, failures = run_gradcheck(cfg=cfg, dtype=dtype, tolerance=tol)
    for name in sorted(results):
        flag = "FAIL" if name in failures else "ok"
        print(f"{flag:4s} {name:40s} {results[name]:.3e}")
    print(f"checked {len(results)} cases in {time.time() - t0:.1f}s "
          f"(dtype {args.dtype}, tolerance {tol:g})")
    if failures:
        worst = max(failures, key=failures.get)
        print(f"gradient check FAILED: {worst} error {failures[worst]:.3e} > {tol:g}")
        return EXIT_VERIFY
    return EXIT_OK


def cmd_inspect(args):
    ckpt = load_checkpoint(args.init)
    total = sum(int(np.prod(a.shape)) for a in ckpt.params.values())
    print(f"checkpoint epoch {ckpt.epoch}, adam step {ckpt.adam_t}")
    print(f"parameters: {len(ckpt.params)} tensors, {total} elements")
    if ckpt.norm_mean is not None:
        print(f"norm mean {ckpt.norm_mean.tolist()} std {ckpt.norm_std.tolist()}")
    print("--- resolved config ---")
    print(canonical_text(ckpt.train_config), end="")
    return EXIT_OK


def _load_images_dir(path):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"image path does not exist: {path}")
    if path.is_dir():
        if list(path.glob("*.srt")):
            return load_dataset(path, "raw-tensor-dir")
        return load_dataset(path, "netpbm-dir")
    raise IngestionError(f"--images must be a directory, got {path}")


def cmd_reconstruct(args):
    ckpt = load_checkpoint(args.init)
    mcfg = ckpt.model_config
    model = SrmaeModel(mcfg, params=params_to_tensors(ckpt.params, FROZEN_PARAMS))
    dataset = _load_images_dir(args.images)
    if dataset.images.shape[1:] != (mcfg.channels, mcfg.image_size, mcfg.image_size):
        raise ShapeError(
            f"images {dataset.images.shape[1:]} do not match model geometry "
            f"({mcfg.channels}, {mcfg.image_size}, {mcfg.image_size})")
    out = Path(args.out or "recon")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    mean, std = ckpt.norm_mean, ckpt.norm_std

    n = dataset.images.shape[0]
    with no_grad():
        for i in range(n):
            raw = dataset.images[i:i + 1]
            pixels = normalize(raw, mean, std).astype(np.float32)
            batch = ImageBatch(pixels=Tensor(pixels))
            hr_seq = patchify(batch, mcfg.patch_size)
            lr_seq = patchify(make_lr_view(batch, mcfg.scale_factor), mcfg.patch_size)
            mask = generate_mask(mcfg.n_patches, mcfg.mask_ratio, rng, batch=1)
            visible, masked_idx = split_visible(hr_seq.tokens, mask)
            latent = model.encode(model.embed_hr(visible, mask.visible_idx))
            lr_tokens = gather_tokens(lr_seq.tokens, masked_idx)
            pred_tokens = model.head_forward(latent, lr_tokens, mask)
            # middle pane: visible HR patches, LR clues at masked positions
            bin_mask = mask.binary_mask()[:, :, None]
            mixed = hr_seq.tokens.data * bin_mask + lr_seq.tokens.data * (1 - bin_mask)
            panes = []
            for tokens in (hr_seq.tokens.data, mixed, pred_tokens.data):
                seq2 = type(hr_seq)(tokens=Tensor(tokens), grid=hr_seq.grid,
                                    patch_size=hr_seq.patch_size, channels=hr_seq.channels)
                img = unpatchify(seq2).pixels.data[0]
                img = img * std.reshape(-1, 1, 1) + mean.reshape(-1, 1, 1)
                panes.append(np.clip(img, 0.0, 1.0))
            trip = np.concatenate(panes, axis=2)
            if trip.shape[0] == 1:
                trip = np.repeat(trip, 3, axis=0)  # triptychs are always P6
            write_netpbm(out / f"recon_{i:04d}.ppm", trip)
    print(f"wrote {n} triptychs to {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="srmae", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="key=value config file")
        p.add_argument("--set", action="append", metavar="K=V",
                       help="override a config key (repeatable)")
        p.add_argument("--init", help="checkpoint to start from")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("pretrain", help="scale-signal pretraining")
    common(p)
    p.set_defaults(func=cmd_pretrain)
    p = sub.add_parser("finetune", help="classification fine-tuning")
    common(p)
    p.set_defaults(func=cmd_finetune)
    p = sub.add_parser("eval", help="top-1/top-5 accuracy of a checkpoint")
    common(p, config_required=False)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("gradcheck", help="finite-difference gradient sweep")
    common(p, config_required=False)
    p.set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("inspect", help="print checkpoint summary")
    common(p, config_required=False)
    p.set_defaults(func=cmd_inspect)
    p = sub.add_parser("reconstruct", help="write original|masked|prediction triptychs")
    common(p, config_required=False)
    p.add_argument("--images", required=True, help="directory of input images")
    p.set_defaults(func=cmd_reconstruct)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    limiter = _limit_threads()
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShapeError, CheckpointError) as e:
        print(f"artifact mismatch: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (VerificationError, NumericError, UsageError) as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except IngestionError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except SrmaeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERIFY
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
