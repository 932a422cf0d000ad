"""Gradient-integrity sweep: every registered op plus the end-to-end
pretraining loss on a tiny geometry, checked against central finite
differences."""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .data import ImageBatch, make_lr_view, patchify
from .errors import VerificationError
from .gradcheck import TOLERANCES, finite_diff_check
from .masking import generate_mask, split_visible
from .model import SrmaeConfig, SrmaeModel, init_params
from .tensor import Tensor


def tiny_config():
    return SrmaeConfig(patch_size=4, image_size=16, channels=1, enc_dim=16, enc_depth=2,
                       enc_heads=2, head_dim=8, head_depth=1, head_heads=2,
                       hpb_width=8, hpb_blocks=1, scale_factor=2, mask_ratio=0.75)


def op_checks(dtype=np.float64, seed=0):
    """Finite-difference error per registered op on random small inputs."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)

    def r(*shape):
        return rng.normal(size=shape).astype(dt)

    def const(*shape):
        return Tensor(r(*shape))

    x25 = r(4, 5)
    gamma, beta = Tensor(r(5)), Tensor(r(5))
    xim = r(2, 3, 6, 6)
    wc, bc = Tensor(r(4, 3, 3, 3)), Tensor(r(4))
    checks = {
        "add": (lambda t, c=const(4, 5): T.tsum(T.mul(T.add(t, c), c)), x25),
        "sub": (lambda t, c=const(4, 5): T.tsum(T.mul(T.sub(c, t), c)), x25),
        "mul": (lambda t, c=const(4, 5): T.tsum(T.mul(T.mul(t, c), c)), x25),
        "scale": (lambda t: T.tsum(T.scale(t, 0.37)), x25),
        "broadcast_add": (lambda t, c=const(4, 5): T.tsum(T.mul(T.add(t, c), c)), r(1, 5)),
        "matmul": (lambda t, w=const(5, 3), c=const(4, 3): T.tsum(T.mul(T.matmul(t, w), c)), x25),
        "softmax": (lambda t, c=const(4, 5): T.tsum(T.mul(T.softmax(t, axis=-1), c)), x25),
        "layernorm": (lambda t, c=const(4, 5): T.tsum(T.mul(T.layernorm(t, gamma, beta), c)), x25),
        "gelu": (lambda t: T.tsum(T.gelu(t)), x25),
        "sin": (lambda t: T.tsum(T.sin(t)), x25),
        "reshape": (lambda t, c=const(20): T.tsum(T.mul(T.reshape(t, (20,)), c)), x25),
        "transpose": (lambda t, c=const(5, 4): T.tsum(T.mul(T.transpose(t, (1, 0)), c)), x25),
        "concatenate": (lambda t, c1=const(4, 5), c=const(4, 10):
                        T.tsum(T.mul(T.concatenate([t, c1], axis=1), c)), x25),
        "index_select": (lambda t, c=const(4, 4):
                         T.tsum(T.mul(T.index_select(t, [1, 1, 0, 3], axis=1), c)), x25),
        "gather_tokens": (lambda t, c=const(2, 3, 5):
                          T.tsum(T.mul(T.gather_tokens(t, [[1, 1, 3], [0, 2, 2]]), c)), r(2, 4, 5)),
        "sum": (lambda t: T.tsum(t), x25),
        "mean": (lambda t, c=const(4): T.tsum(T.mul(T.tmean(t, axis=1), c)), x25),
        "mse": (lambda t, c=const(4, 5): T.mse(t, c), x25),
        "cross_entropy": (lambda t: T.cross_entropy(t, np.array([0, 2, 1, 4])), x25),
        "conv2d": (lambda t, c=const(2, 4, 3, 3):
                   T.tsum(T.mul(T.conv2d(t, wc, bc, stride=2, padding=1), c)), xim),
        "conv2d_weight": (lambda t, c=const(2, 4, 3, 3), xt=Tensor(xim):
                          T.tsum(T.mul(T.conv2d(xt, t, bc, stride=2, padding=1), c)),
                          np.asarray(wc.data)),
        "interpolate_nearest": (lambda t, c=const(2, 3, 9, 5):
                                T.tsum(T.mul(T.interpolate_nearest(t, 9, 5), c)), xim),
        "downsample_area": (lambda t, c=const(2, 3, 3, 3):
                            T.tsum(T.mul(T.downsample_area(t, 2), c)), xim),
    }
    return {name: finite_diff_check(f, x) for name, (f, x) in checks.items()}


def end_to_end_checks(cfg=None, dtype=np.float64, seed=3, max_coords=5):
    """Finite-difference error of the full pretraining loss.

    Checked w.r.t. a representative subset of parameters and w.r.t. the
    LR clue pixels (targets held fixed, as in training).
    """
    cfg = cfg or tiny_config()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, dtype=dtype)
    # zero-initialized tensors would hide upstream gradient bugs
    for name in ("head.out.weight", "head.hpb.conv_out.weight", "head.hpb.hf_gain"):
        params[name].data += rng.normal(0, 0.02, size=params[name].shape)
    model = SrmaeModel(cfg, params=params)
    imgs = rng.random((2, cfg.channels, cfg.image_size, cfg.image_size))
    mask = generate_mask(cfg.n_patches, cfg.mask_ratio, rng, batch=2)
    hr = patchify(ImageBatch(pixels=Tensor(imgs.astype(dtype))), cfg.patch_size)
    target = hr.tokens.data

    results = {}
    probe = [name for name, p in model.params.items() if p.requires_grad]
    for name in probe:
        def f(t, name=name):
            old = model.params[name]
            model.params[name] = t
            try:
                return model.forward_pretrain(
                    ImageBatch(pixels=Tensor(imgs.astype(dtype))), mask).loss
            finally:
                model.params[name] = old
        results["loss/" + name] = finite_diff_check(
            f, model.params[name].data, max_coords=max_coords,
            rng=np.random.default_rng([seed, zlib.crc32(name.encode())]))

    def f_lr(lr_pix):
        lr_seq = patchify(make_lr_view(ImageBatch(pixels=lr_pix), cfg.scale_factor),
                          cfg.patch_size)
        visible, masked_idx = split_visible(Tensor(target), mask)
        latent = model.encode(model.embed_hr(visible, mask.visible_idx))
        lr_tokens = T.gather_tokens(lr_seq.tokens, masked_idx)
        pred = model.head_forward(latent, lr_tokens, mask)
        return model.reconstruction_loss(pred, target, mask)

    results["loss/lr_pixels"] = finite_diff_check(
        f_lr, imgs.astype(dtype), max_coords=4 * max_coords, rng=np.random.default_rng(seed))
    return results


def run_gradcheck(cfg=None, dtype=np.float64, tolerance=None, seed=0):
    """Full sweep; returns (results, failures) with failures over tolerance."""
    tol = tolerance if tolerance is not None else TOLERANCES[np.dtype(dtype)]
    results = dict(op_checks(dtype=dtype, seed=seed))
    results.update(end_to_end_checks(cfg=cfg, dtype=dtype, seed=seed + 3))
    failures = {k: v for k, v in results.items() if v > tol}
    return results, failures


def assert_gradcheck(cfg=None, dtype=np.float64, tolerance=None, seed=0):
    results, failures = run_gradcheck(cfg=cfg, dtype=dtype, tolerance=tolerance, seed=seed)
    if failures:
        worst = max(failures, key=failures.get)
        raise VerificationError(
            f"gradient check failed for {worst}: error {failures[worst]:.3e}")
    return results
