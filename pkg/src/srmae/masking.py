"""Random patch masking with permutation bookkeeping.

A mask is stored as a per-sample permutation of patch indices; the first
``n_visible`` entries are the visible set, the rest are masked. This makes
split/splice exact inverse gathers and keeps gradient routing trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError
from .tensor import Tensor, concatenate, gather_tokens


def visible_count(n, ratio):
    """round-half-up of n*(1-ratio); at least 1, at most n."""
    nv = int(math.floor(n * (1.0 - ratio) + 0.5))
    return max(1, min(n, nv))


@dataclass
class MaskSpec:
    perm: np.ndarray  # [B, N] int64, each row a permutation of 0..N-1
    n_visible: int
    ratio: float

    @property
    def batch(self):
        return self.perm.shape[0]

    @property
    def n_patches(self):
        return self.perm.shape[1]

    @property
    def visible_idx(self):
        return self.perm[:, : self.n_visible]

    @property
    def masked_idx(self):
        return self.perm[:, self.n_visible:]

    def binary_mask(self):
        """[B, N] with 1 at visible positions, 0 at masked ones."""
        m = np.zeros(self.perm.shape, dtype=np.float32)
        np.put_along_axis(m, self.visible_idx, 1.0, axis=1)
        return m

    def inverse_perm(self):
        return np.argsort(self.perm, axis=1)


def generate_mask(n, ratio, rng, batch=1):
    """Uniform random MaskSpec for `batch` samples of `n` patches."""
    if n < 2:
        raise ConfigurationError(f"need at least 2 patches to mask, got {n}")
    if not 0.0 <= ratio < 1.0:
        raise ConfigurationError(f"mask ratio must lie in [0, 1), got {ratio}")
    perm = np.stack([rng.permutation(n) for _ in range(batch)]).astype(np.int64)
    return MaskSpec(perm=perm, n_visible=visible_count(n, ratio), ratio=float(ratio))


def split_visible(tokens, m):
    """Gather the visible tokens; also return the masked position indices.

    tokens: Tensor [B, N, D]. Returns (visible Tensor [B, n_visible, D],
    masked_positions ndarray [B, N - n_visible]).
    """
    if tokens.shape[:2] != m.perm.shape:
        raise ShapeError(f"token grid {tokens.shape[:2]} does not match mask {m.perm.shape}")
    return gather_tokens(tokens, m.visible_idx), m.masked_idx


def splice_full(visible_tokens, lr_tokens, m):
    """Re-assemble the full-length sequence in original patch order.

    Position j receives the visible token when j is in the visible set,
    otherwise the LR token assigned to j. Gradients flow back only into
    the stream each position came from.
    """
    if visible_tokens.shape[1] != m.n_visible:
        raise ShapeError(
            f"expected {m.n_visible} visible tokens, got {visible_tokens.shape[1]}")
    if lr_tokens.shape[1] != m.n_patches - m.n_visible:
        raise ShapeError(
            f"expected {m.n_patches - m.n_visible} LR tokens, got {lr_tokens.shape[1]}")
    if visible_tokens.shape[-1] != lr_tokens.shape[-1]:
        raise ShapeError(
            f"token dims differ between streams: {visible_tokens.shape[-1]} vs {lr_tokens.shape[-1]}")
    stacked = concatenate([visible_tokens, lr_tokens], axis=1)  # perm order
    return gather_tokens(stacked, m.inverse_perm())
