"""The SRMAE network: visible-patch ViT encoder plus a super-resolution
prediction head (HPB feature extractor followed by a lightweight ViT).

Masked patch positions are filled with embeddings of the low-resolution
view rather than a learned mask token; the head regresses raw pixels for
every patch position and the loss is taken over masked positions only.

Parameter naming (dot paths, also the checkpoint contract):
  embed_hr.weight/.bias             pixel-patch projection into enc_dim
  enc_pos                           frozen 2D sin-cos table [1, N, enc_dim]
  encoder.block{i}.norm1.gamma/.beta
  encoder.block{i}.attn.qkv.weight/.bias
  encoder.block{i}.attn.proj.weight/.bias
  encoder.block{i}.norm2.gamma/.beta
  encoder.block{i}.mlp.fc1.weight/.bias
  encoder.block{i}.mlp.fc2.weight/.bias
  encoder.norm.gamma/.beta
  head.enc_proj.weight/.bias        enc_dim -> head_dim
  head.embed_lr.weight/.bias        pixel-patch projection into head_dim
  head_pos                          frozen 2D sin-cos table [1, N, head_dim]
  head.hpb.conv_in.weight/.bias     head_dim -> hpb_width, 3x3
  head.hpb.conv_down.weight/.bias   stride-2 3x3
  head.hpb.body{i}.weight/.bias     3x3
  head.hpb.conv_out.weight/.bias    hpb_width -> head_dim, 3x3 (zero init)
  head.hpb.hf_gain                  scalar gain on the high-frequency path
  head.block{i}.*                   as encoder blocks, at head_dim
  head.norm.gamma/.beta
  head.out.weight/.bias             head_dim -> P*P*C (zero init)
  classifier.weight/.bias           enc_dim -> num_classes (fine-tune only)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ImageBatch, PatchSequence, make_lr_view, patchify
from .errors import ConfigurationError, NumericError, ShapeError
from .masking import MaskSpec, split_visible, splice_full
from .tensor import Tensor

FROZEN_PARAMS = ("enc_pos", "head_pos")


@dataclass
class SrmaeConfig:
    patch_size: int = 4
    image_size: int = 32
    channels: int = 1
    enc_dim: int = 64
    enc_depth: int = 3
    enc_heads: int = 4
    head_dim: int = 32
    head_depth: int = 2
    head_heads: int = 4
    hpb_width: int = 32
    hpb_blocks: int = 1
    scale_factor: int = 2
    mask_ratio: float = 0.75
    norm_pix: bool = False
    num_classes: int = 0
    drop_rate: float = 0.0

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.enc_dim % self.enc_heads:
            raise ConfigurationError(
                f"encoder dim {self.enc_dim} not divisible by {self.enc_heads} heads")
        if self.head_dim % self.head_heads:
            raise ConfigurationError(
                f"head dim {self.head_dim} not divisible by {self.head_heads} heads")
        if self.scale_factor not in (2, 3, 4):
            raise ConfigurationError(f"scale factor must be 2, 3 or 4, got {self.scale_factor}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask ratio must be in [0,1), got {self.mask_ratio}")
        if self.enc_dim % 4 or self.head_dim % 4:
            raise ConfigurationError("embedding dims must be divisible by 4 (2D sin-cos table)")
        return self

    @property
    def grid(self):
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def n_patches(self):
        r, c = self.grid
        return r * c

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels


@dataclass
class ForwardArtifacts:
    latent: Tensor  # [B, n_visible, enc_dim]
    prediction: Tensor  # [B, N, P*P*C]
    loss: Tensor  # scalar
    mask: MaskSpec
    target: np.ndarray = None  # [B, N, P*P*C] loss target tokens


def sincos_table_2d(rows, cols, dim):
    """Fixed 2D sine-cosine positional table, [rows*cols, dim]."""
    if dim % 4:
        raise ConfigurationError(f"sin-cos table needs dim divisible by 4, got {dim}")
    half = dim // 2

    def axis_table(positions):
        omega = 1.0 / (10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half // 2)))
        args = np.outer(positions, omega)
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)

    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    table = np.concatenate([axis_table(rr.ravel()), axis_table(cc.ravel())], axis=1)
    return table.astype(np.float32)


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def init_params(cfg, rng, dtype=np.float32, with_classifier=False):
    """Fresh parameter set; names are fixed by the config alone."""
    cfg.validate()
    p = {}

    def param(name, arr):
        p[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    def frozen(name, arr):
        p[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=False)

    def linear_init(name, fan_out, fan_in, zero=False):
        w = np.zeros((fan_out, fan_in)) if zero else _trunc_normal(rng, (fan_out, fan_in))
        param(name + ".weight", w)
        param(name + ".bias", np.zeros(fan_out))

    def conv_init(name, c_out, c_in, k=3, zero=False):
        w = np.zeros((c_out, c_in, k, k)) if zero else _trunc_normal(rng, (c_out, c_in, k, k))
        param(name + ".weight", w)
        param(name + ".bias", np.zeros(c_out))

    def block_init(prefix, dim):
        param(prefix + ".norm1.gamma", np.ones(dim))
        param(prefix + ".norm1.beta", np.zeros(dim))
        linear_init(prefix + ".attn.qkv", 3 * dim, dim)
        linear_init(prefix + ".attn.proj", dim, dim)
        param(prefix + ".norm2.gamma", np.ones(dim))
        param(prefix + ".norm2.beta", np.zeros(dim))
        linear_init(prefix + ".mlp.fc1", 4 * dim, dim)
        linear_init(prefix + ".mlp.fc2", dim, 4 * dim)

    rows, cols = cfg.grid
    linear_init("embed_hr", cfg.enc_dim, cfg.patch_dim)
    frozen("enc_pos", sincos_table_2d(rows, cols, cfg.enc_dim)[None])
    for i in range(cfg.enc_depth):
        block_init(f"encoder.block{i}", cfg.enc_dim)
    param("encoder.norm.gamma", np.ones(cfg.enc_dim))
    param("encoder.norm.beta", np.zeros(cfg.enc_dim))

    linear_init("head.enc_proj", cfg.head_dim, cfg.enc_dim)
    linear_init("head.embed_lr", cfg.head_dim, cfg.patch_dim)
    frozen("head_pos", sincos_table_2d(rows, cols, cfg.head_dim)[None])
    conv_init("head.hpb.conv_in", cfg.hpb_width, cfg.head_dim)
    conv_init("head.hpb.conv_down", cfg.hpb_width, cfg.hpb_width)
    for i in range(cfg.hpb_blocks):
        conv_init(f"head.hpb.body{i}", cfg.hpb_width, cfg.hpb_width)
    conv_init("head.hpb.conv_out", cfg.head_dim, cfg.hpb_width, zero=True)
    param("head.hpb.hf_gain", np.zeros(1))
    for i in range(cfg.head_depth):
        block_init(f"head.block{i}", cfg.head_dim)
    param("head.norm.gamma", np.ones(cfg.head_dim))
    param("head.norm.beta", np.zeros(cfg.head_dim))
    linear_init("head.out", cfg.patch_dim, cfg.head_dim, zero=True)

    if with_classifier:
        if cfg.num_classes < 2:
            raise ConfigurationError("classifier requires num_classes >= 2")
        linear_init("classifier", cfg.num_classes, cfg.enc_dim)
    return p


def expected_param_count(cfg, with_classifier=False):
    """Closed-form element count of the parameter set (frozen tables included)."""
    n, d, dh, w, pd = cfg.n_patches, cfg.enc_dim, cfg.head_dim, cfg.hpb_width, cfg.patch_dim

    def block(dim):
        norms = 4 * dim
        attn = (3 * dim * dim + 3 * dim) + (dim * dim + dim)
        mlp = (4 * dim * dim + 4 * dim) + (dim * 4 * dim + dim)
        return norms + attn + mlp

    def conv(co, ci):
        return co * ci * 9 + co

    total = (d * pd + d) + n * d
    total += cfg.enc_depth * block(d) + 2 * d
    total += (dh * d + dh) + (dh * pd + dh) + n * dh
    total += conv(w, dh) + conv(w, w) + cfg.hpb_blocks * conv(w, w) + conv(dh, w) + 1
    total += cfg.head_depth * block(dh) + 2 * dh
    total += pd * dh + pd
    if with_classifier:
        total += cfg.num_classes * d + cfg.num_classes
    return total


class SrmaeModel:
    """Config + parameters + forward passes (pretrain and classification)."""

    def __init__(self, cfg, params=None, rng=None, dtype=np.float32, with_classifier=False):
        self.cfg = cfg.validate()
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = init_params(cfg, rng, dtype=dtype, with_classifier=with_classifier)
        self.params = params
        self.last_attention = None  # filled when forward is called with record_attention

    @property
    def dtype(self):
        return self.params["embed_hr.weight"].dtype

    def learnable(self):
        return {k: v for k, v in self.params.items() if k not in FROZEN_PARAMS}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- building blocks --------------------------------------------------

    def _linear(self, prefix, x):
        return T.linear(x, self.params[prefix + ".weight"], self.params[prefix + ".bias"])

    def _attention(self, prefix, x, heads, record=None):
        b, n, d = x.shape
        dh = d // heads
        qkv = self._linear(prefix + ".qkv", x)  # [B, N, 3D]
        qkv = T.reshape(qkv, (b, n, 3, heads, dh))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, heads, N, dh]
        q = T.reshape(T.index_select(qkv, [0], axis=0), (b, heads, n, dh))
        k = T.reshape(T.index_select(qkv, [1], axis=0), (b, heads, n, dh))
        v = T.reshape(T.index_select(qkv, [2], axis=0), (b, heads, n, dh))
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh)), axis=-1)
        if record is not None:
            record.append(att.data.copy())
        y = T.matmul(att, v)  # [B, heads, N, dh]
        y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (b, n, d))
        return self._linear(prefix + ".proj", y)

    def _block(self, prefix, x, heads, record=None, rng=None):
        h = T.layernorm(x, self.params[prefix + ".norm1.gamma"], self.params[prefix + ".norm1.beta"])
        a = self._attention(prefix + ".attn", h, heads, record=record)
        if rng is not None and self.cfg.drop_rate > 0:
            a = T.dropout(a, self.cfg.drop_rate, rng)
        x = T.add(x, a)
        h = T.layernorm(x, self.params[prefix + ".norm2.gamma"], self.params[prefix + ".norm2.beta"])
        m = self._linear(prefix + ".mlp.fc2", T.gelu(self._linear(prefix + ".mlp.fc1", h)))
        if rng is not None and self.cfg.drop_rate > 0:
            m = T.dropout(m, self.cfg.drop_rate, rng)
        return T.add(x, m)

    def _stack(self, prefix, x, depth, heads, record=None, rng=None):
        for i in range(depth):
            try:
                x = self._block(f"{prefix}.block{i}", x, heads, record=record, rng=rng)
            except NumericError as e:
                raise NumericError(f"{prefix}.block{i}: {e}") from e
        return T.layernorm(x, self.params[prefix + ".norm.gamma"], self.params[prefix + ".norm.beta"])

    def _pos_rows(self, table_name, idx):
        """Constant positional rows gathered per sample: [B, k, dim]."""
        table = self.params[table_name].data[0]
        return Tensor(np.ascontiguousarray(table[idx]))

    # -- encoder path ------------------------------------------------------

    def embed_hr(self, visible_tokens, visible_idx):
        if visible_tokens.shape[-1] != self.cfg.patch_dim:
            raise ShapeError(
                f"expected pixel tokens of dim {self.cfg.patch_dim}, got {visible_tokens.shape[-1]}")
        x = self._linear("embed_hr", visible_tokens)
        return T.add(x, self._pos_rows("enc_pos", visible_idx))

    def encode(self, embedded, record_attention=False, rng=None):
        record = [] if record_attention else None
        out = self._stack("encoder", embedded, self.cfg.enc_depth, self.cfg.enc_heads,
                          record=record, rng=rng)
        if record_attention:
            self.last_attention = record
        return out

    # -- prediction head ---------------------------------------------------

    def embed_lr(self, lr_tokens, masked_idx):
        if lr_tokens.shape[-1] != self.cfg.patch_dim:
            raise ShapeError(
                f"expected LR pixel tokens of dim {self.cfg.patch_dim}, got {lr_tokens.shape[-1]}")
        x = self._linear("head.embed_lr", lr_tokens)
        return T.add(x, self._pos_rows("head_pos", masked_idx))

    def _blur3x3(self, x):
        b, c, h, w = x.shape
        flat = T.reshape(x, (b * c, 1, h, w))
        kernel = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0, dtype=x.data.dtype))
        return T.reshape(T.conv2d(flat, kernel, stride=1, padding=1), (b, c, h, w))

    def _hpb(self, x):
        """Simplified high-preserving feature extractor on [B, head_dim, r, c].

        Initialized as the identity: conv_out starts at zero and the
        high-frequency path gain starts at zero.
        """
        p = self.params
        rows, cols = x.shape[2], x.shape[3]
        h = T.gelu(T.conv2d(x, p["head.hpb.conv_in.weight"], p["head.hpb.conv_in.bias"],
                            stride=1, padding=1))
        d = T.gelu(T.conv2d(h, p["head.hpb.conv_down.weight"], p["head.hpb.conv_down.bias"],
                            stride=2, padding=1))
        for i in range(self.cfg.hpb_blocks):
            d = T.gelu(T.conv2d(d, p[f"head.hpb.body{i}.weight"], p[f"head.hpb.body{i}.bias"],
                                stride=1, padding=1))
        u = T.interpolate_nearest(d, rows, cols)
        f = T.conv2d(u, p["head.hpb.conv_out.weight"], p["head.hpb.conv_out.bias"],
                     stride=1, padding=1)
        hf = T.mul(T.sub(x, self._blur3x3(x)), T.reshape(p["head.hpb.hf_gain"], (1, 1, 1, 1)))
        return T.add(T.add(x, f), hf)

    def head_forward(self, latent, lr_tokens, mask, rng=None):
        """Predict pixels for every patch position: [B, N, P*P*C]."""
        rows, cols = self.cfg.grid
        n = self.cfg.n_patches
        if mask.n_patches != n:
            raise ShapeError(f"mask covers {mask.n_patches} patches, model has {n}")
        xe = self._linear("head.enc_proj", latent)
        xe = T.add(xe, self._pos_rows("head_pos", mask.visible_idx))
        lr = self.embed_lr(lr_tokens, mask.masked_idx)
        full = splice_full(xe, lr, mask)  # [B, N, head_dim]
        b = full.shape[0]
        grid = T.reshape(T.transpose(full, (0, 2, 1)), (b, self.cfg.head_dim, rows, cols))
        grid = self._hpb(grid)
        full = T.transpose(T.reshape(grid, (b, self.cfg.head_dim, n)), (0, 2, 1))
        full = self._stack("head", full, self.cfg.head_depth, self.cfg.head_heads, rng=rng)
        return self._linear("head.out", full)

    # -- losses and end-to-end passes --------------------------------------

    def reconstruction_loss(self, prediction, target_tokens, mask):
        """MSE over masked-position tokens only (mean over tokens and pixels)."""
        if mask.n_visible == mask.n_patches:
            raise ConfigurationError("all patches visible (ratio 0): reconstruction loss undefined")
        target = target_tokens.data if isinstance(target_tokens, Tensor) else np.asarray(target_tokens)
        if tuple(prediction.shape) != tuple(target.shape):
            raise ShapeError(f"prediction {prediction.shape} vs target {target.shape}")
        batch = np.arange(target.shape[0])[:, None]
        tgt = target[batch, mask.masked_idx]
        if self.cfg.norm_pix:
            mu = tgt.mean(axis=-1, keepdims=True)
            var = tgt.var(axis=-1, keepdims=True)
            tgt = (tgt - mu) / np.sqrt(var + 1e-6)
        pred_masked = T.gather_tokens(prediction, mask.masked_idx)
        return T.mse(pred_masked, Tensor(tgt.astype(prediction.data.dtype)))

    def forward_pretrain(self, images, mask, rng=None, record_attention=False):
        """Full SRMAE pretraining pass; returns latent, prediction, loss."""
        hr_seq = patchify(images, self.cfg.patch_size)
        lr_view = make_lr_view(images, self.cfg.scale_factor)
        lr_seq = patchify(lr_view, self.cfg.patch_size)

        visible, masked_idx = split_visible(hr_seq.tokens, mask)
        latent = self.encode(self.embed_hr(visible, mask.visible_idx),
                             record_attention=record_attention, rng=rng)
        lr_tokens = T.gather_tokens(lr_seq.tokens, masked_idx)
        prediction = self.head_forward(latent, lr_tokens, mask, rng=rng)
        target = hr_seq.tokens.data
        loss = self.reconstruction_loss(prediction, target, mask)
        return ForwardArtifacts(latent=latent, prediction=prediction, loss=loss,
                                mask=mask, target=target)

    def classify(self, images, rng=None, record_attention=False):
        """Full-sequence encoder + mean pool + linear head -> logits [B, K]."""
        if "classifier.weight" not in self.params:
            raise ConfigurationError("model has no classification head (num_classes unset)")
        seq = patchify(images, self.cfg.patch_size)
        n = self.cfg.n_patches
        if seq.n_patches != n:
            raise ShapeError(f"image yields {seq.n_patches} patches, model expects {n}")
        all_idx = np.broadcast_to(np.arange(n), (seq.tokens.shape[0], n))
        x = self.embed_hr(seq.tokens, all_idx)
        x = self.encode(x, record_attention=record_attention, rng=rng)
        pooled = T.tmean(x, axis=1)
        return self._linear("classifier", pooled)

    def classification_loss(self, images, labels, rng=None):
        return T.cross_entropy(self.classify(images, rng=rng), labels)
