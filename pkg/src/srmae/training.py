"""Optimization loops: AdamW, cosine schedule, pretrain/finetune/eval.

Every source of randomness in an epoch is derived from
(seed, phase, epoch), so a run resumed from an epoch-boundary checkpoint
reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import Checkpoint, params_to_tensors, save_checkpoint, tensors_to_arrays
from .errors import ConfigurationError, IngestionError, NumericError
from .masking import generate_mask
from .model import FROZEN_PARAMS, SrmaeModel, init_params
from .tensor import Tensor, no_grad

_PHASE_IDS = {"pretrain": 1, "finetune": 2, "eval": 3}


# -- optimizer ------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params, grads, state, lr, wd, betas=(0.9, 0.95), eps=1e-8,
               frozen=FROZEN_PARAMS):
    """Decoupled-weight-decay Adam with bias correction, in place."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for name in sorted(params):
        if name in frozen:
            continue
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p.data)


def cosine_lr(step, total_steps, warmup_steps, base_lr, min_lr=0.0):
    """Linear warmup 0 -> base_lr, then cosine decay base_lr -> min_lr."""
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


# -- metrics --------------------------------------------------------------


class MetricsWriter:
    """Append-only newline-delimited metric records."""

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "a") if path else None

    def emit(self, **fields):
        self.records.append(fields)
        if self._fh:
            self._fh.write(json.dumps(fields, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


# -- data plumbing --------------------------------------------------------


def build_dataset(data_cfg):
    if data_cfg.kind == "synthetic":
        return D.synthetic_digits(data_cfg.count, data_cfg.resolution, seed=data_cfg.seed)
    return D.load_dataset(data_cfg.path, data_cfg.kind)


def split_train_val(dataset, val_fraction, seed):
    """Deterministic held-out split; labels follow their images."""
    n = len(dataset)
    order = np.random.default_rng([seed, 97]).permutation(n)
    n_val = int(round(n * val_fraction))
    return dataset.subset(order[n_val:]), dataset.subset(order[:n_val])


def norm_stats(images):
    """Per-channel mean/std over the training split."""
    mean = images.mean(axis=(0, 2, 3)).astype(np.float64)
    std = images.std(axis=(0, 2, 3)).astype(np.float64)
    std[std < 1e-6] = 1.0
    return mean, std


def normalize(pixels, mean, std):
    c = pixels.shape[1]
    return (pixels - mean.reshape(1, c, 1, 1)) / std.reshape(1, c, 1, 1)


def _epoch_rng(seed, phase, epoch):
    return np.random.default_rng([int(seed), _PHASE_IDS[phase], int(epoch)])


def _augment(batch, cfg, rng):
    if cfg.crop:
        batch = D.random_resized_crop(batch, cfg.model.image_size,
                                      (cfg.crop_scale_min, cfg.crop_scale_max), rng)
    if cfg.flip_prob > 0:
        batch = D.horizontal_flip(batch, cfg.flip_prob, rng)
    return batch


def _grads(model):
    return {name: p.grad for name, p in model.learnable().items() if p.grad is not None}


def _out_paths(out_dir):
    out = Path(out_dir)
    (out / "ckpt").mkdir(parents=True, exist_ok=True)
    return out


def _make_checkpoint(cfg, model, state, epoch, mean, std, rng_state=None):
    return Checkpoint(train_config=cfg, params=tensors_to_arrays(model.params),
                      adam_m={k: v.copy() for k, v in state.m.items()},
                      adam_v={k: v.copy() for k, v in state.v.items()},
                      adam_t=state.t, epoch=epoch, norm_mean=mean, norm_std=std,
                      rng_state=rng_state)


# -- pretraining ----------------------------------------------------------


def pretrain(cfg, out_dir=None, resume=None, log=None):
    """Scale-signal pretraining; returns (final Checkpoint, metric records)."""
    cfg.validate()
    if cfg.model.mask_ratio <= 0:
        raise ConfigurationError("pretraining needs mask_ratio > 0 (loss is masked-only)")
    dataset = build_dataset(cfg.data)
    n = len(dataset)
    mcfg = cfg.model
    init_rng = np.random.default_rng([cfg.seed, 11])

    if resume is not None:
        mean, std = resume.norm_mean, resume.norm_std
        model = SrmaeModel(mcfg, params=params_to_tensors(resume.params, FROZEN_PARAMS))
        state = AdamState(m={k: v.copy() for k, v in resume.adam_m.items()},
                          v={k: v.copy() for k, v in resume.adam_v.items()},
                          t=resume.adam_t)
        start_epoch = resume.epoch
    else:
        mean, std = norm_stats(dataset.images)
        model = SrmaeModel(mcfg, params=init_params(mcfg, init_rng))
        state = AdamState()
        start_epoch = 0

    steps_per_epoch = D.num_batches(n, cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    out = _out_paths(out_dir) if out_dir else None
    metrics = MetricsWriter(out / "metrics.ndjson" if out else None)
    ckpt = None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = _epoch_rng(cfg.seed, "pretrain", epoch)
            step = epoch * steps_per_epoch
            for batch in D.iter_batches(dataset, cfg.batch_size, rng=rng, shuffle=True):
                t0 = time.perf_counter()
                batch = _augment(batch, cfg, rng)
                pixels = normalize(batch.pixels.data, mean, std).astype(np.float32)
                mask = generate_mask(mcfg.n_patches, mcfg.mask_ratio, rng, batch=pixels.shape[0])
                lr = cosine_lr(step, total_steps, warmup_steps, cfg.base_lr, cfg.min_lr)
                try:
                    art = model.forward_pretrain(D.ImageBatch(pixels=Tensor(pixels)), mask,
                                                 rng=rng if mcfg.drop_rate > 0 else None)
                    loss = art.loss.item()
                    model.zero_grad()
                    art.loss.backward()
                    adamw_step(model.params, _grads(model), state, lr, cfg.weight_decay,
                               (cfg.beta1, cfg.beta2), cfg.eps)
                except NumericError:
                    if out:
                        bad = _make_checkpoint(cfg, model, state, epoch, mean, std)
                        save_checkpoint(bad, out / "ckpt" / "abort.srmk")
                    raise
                step += 1
                metrics.emit(phase="pretrain", epoch=epoch, step=step, loss=loss,
                             lr=lr, wall_ms=round((time.perf_counter() - t0) * 1e3, 3))
                if log:
                    log(f"pretrain epoch {epoch} step {step} loss {loss:.5f} lr {lr:.2e}")
            ckpt = _make_checkpoint(cfg, model, state, epoch + 1, mean, std,
                                    rng_state=init_rng.bit_generator.state)
            if out and ((epoch + 1) % cfg.ckpt_every == 0 or epoch + 1 == cfg.epochs):
                save_checkpoint(ckpt, out / "ckpt" / f"epoch_{epoch + 1:04d}.srmk")
    finally:
        metrics.close()
    return ckpt, metrics.records


# -- fine-tuning and evaluation -------------------------------------------


def _strip_head(params):
    """Drop prediction-head parameters for fine-tuning."""
    return {k: v for k, v in params.items() if not (k.startswith("head.") or k == "head_pos")}


def finetune(cfg, init=None, out_dir=None, log=None):
    """Cross-entropy training of encoder + fresh classifier.

    init: optional pretraining Checkpoint; its prediction head is
    discarded and the encoder weights are kept.
    """
    cfg.validate()
    mcfg = cfg.model
    if mcfg.num_classes < 2:
        raise ConfigurationError("fine-tuning requires model.num_classes >= 2")
    dataset = build_dataset(cfg.data)
    if dataset.labels is None:
        raise IngestionError("fine-tuning requires a labeled dataset")
    if dataset.labels.max() >= mcfg.num_classes:
        raise IngestionError(
            f"label {int(dataset.labels.max())} exceeds num_classes {mcfg.num_classes}")
    train_ds, val_ds = split_train_val(dataset, cfg.data.val_fraction, cfg.data.seed)

    init_rng = np.random.default_rng([cfg.seed, 12])
    params = init_params(mcfg, init_rng, with_classifier=True)
    if init is not None:
        if init.model_config.enc_dim != mcfg.enc_dim or init.model_config.patch_size != mcfg.patch_size \
                or init.model_config.image_size != mcfg.image_size:
            raise ConfigurationError(
                f"checkpoint geometry {init.model_config} incompatible with configured model {mcfg}")
        kept = _strip_head(init.params)
        for name, arr in kept.items():
            if name in params:
                params[name] = Tensor(arr.copy(), requires_grad=name not in FROZEN_PARAMS)
        mean, std = init.norm_mean, init.norm_std
        if log:
            log(f"prediction head discarded ({len(init.params) - len(kept)} tensors); "
                f"encoder initialized from checkpoint epoch {init.epoch}")
    else:
        mean, std = norm_stats(train_ds.images)
    model = SrmaeModel(mcfg, params=params)
    state = AdamState()

    n = len(train_ds)
    steps_per_epoch = D.num_batches(n, cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    out = _out_paths(out_dir) if out_dir else None
    metrics = MetricsWriter(out / "metrics.ndjson" if out else None)
    ckpt = None
    try:
        step = 0
        for epoch in range(cfg.epochs):
            rng = _epoch_rng(cfg.seed, "finetune", epoch)
            epoch_loss = 0.0
            nb = 0
            for batch in D.iter_batches(train_ds, cfg.batch_size, rng=rng, shuffle=True):
                t0 = time.perf_counter()
                batch = _augment(batch, cfg, rng)
                pixels = normalize(batch.pixels.data, mean, std).astype(np.float32)
                lr = cosine_lr(step, total_steps, warmup_steps, cfg.base_lr, cfg.min_lr)
                try:
                    loss_t = model.classification_loss(
                        D.ImageBatch(pixels=Tensor(pixels)), batch.labels,
                        rng=rng if mcfg.drop_rate > 0 else None)
                    loss = loss_t.item()
                    model.zero_grad()
                    loss_t.backward()
                    adamw_step(model.params, _grads(model), state, lr, cfg.weight_decay,
                               (cfg.beta1, cfg.beta2), cfg.eps)
                except NumericError:
                    if out:
                        bad = _make_checkpoint(cfg, model, state, epoch, mean, std)
                        save_checkpoint(bad, out / "ckpt" / "abort.srmk")
                    raise
                step += 1
                epoch_loss += loss
                nb += 1
                metrics.emit(phase="finetune", epoch=epoch, step=step, loss=loss,
                             lr=lr, wall_ms=round((time.perf_counter() - t0) * 1e3, 3))
            top1, top5 = evaluate(model, val_ds, cfg.eval_resolution, mean, std,
                                  batch_size=cfg.batch_size)
            metrics.emit(phase="finetune_eval", epoch=epoch, step=step,
                         loss=epoch_loss / max(nb, 1), lr=0.0, top1=top1, top5=top5,
                         wall_ms=0.0)
            if log:
                log(f"finetune epoch {epoch} loss {epoch_loss / max(nb, 1):.5f} "
                    f"top1 {top1:.4f} top5 {top5:.4f}")
            ckpt = _make_checkpoint(cfg, model, state, epoch + 1, mean, std)
            if out and ((epoch + 1) % cfg.ckpt_every == 0 or epoch + 1 == cfg.epochs):
                save_checkpoint(ckpt, out / "ckpt" / f"epoch_{epoch + 1:04d}.srmk")
    finally:
        metrics.close()
    return ckpt, metrics.records


def eval_resize(images, eval_resolution, target_size):
    """VLR protocol: nearest-resize to the probe resolution, then back up."""
    if eval_resolution and eval_resolution != target_size:
        images = _nearest_np(images, eval_resolution, eval_resolution)
    if images.shape[2] != target_size:
        images = _nearest_np(images, target_size, target_size)
    return images


def _nearest_np(x, oh, ow):
    h, w = x.shape[2], x.shape[3]
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    return np.ascontiguousarray(x[:, :, rows][:, :, :, cols])


def evaluate(model, dataset, eval_resolution, mean, std, batch_size=64):
    """Single deterministic pass; returns (top1, top5)."""
    if dataset.labels is None:
        raise IngestionError("evaluation requires labels")
    correct1 = correct5 = total = 0
    k5 = model.cfg.num_classes >= 5
    with no_grad():
        for batch in D.iter_batches(dataset, batch_size):
            pixels = eval_resize(batch.pixels.data, eval_resolution, model.cfg.image_size)
            pixels = normalize(pixels, mean, std).astype(np.float32)
            logits = model.classify(D.ImageBatch(pixels=Tensor(pixels))).data
            labels = batch.labels
            total += labels.shape[0]
            correct1 += int((logits.argmax(axis=1) == labels).sum())
            if k5:
                top5 = np.argpartition(-logits, 4, axis=1)[:, :5]
                correct5 += int((top5 == labels[:, None]).any(axis=1).sum())
    top1 = correct1 / total
    return top1, (correct5 / total if k5 else top1)
