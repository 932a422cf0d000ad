"""Central finite-difference verification of autodiff gradients."""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .tensor import Tensor

# Default tolerances by dtype, used by the gradcheck command and tests.
TOLERANCES = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-5}


def finite_diff_check(f, x, h=None, max_coords=None, rng=None):
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor; ``x`` is a numpy array of the
    point to check. Relative error per coordinate is
    |ad - fd| / max(1, |fd|, |ad|). When ``max_coords`` is given, a random
    subset of coordinates is probed instead of all of them.
    """
    x = np.asarray(x)
    # float32 needs a coarse step: function values carry ~1e-7 relative
    # roundoff, so tiny h drowns the difference quotient in noise.
    if h is None:
        h = 1e-6 if x.dtype == np.float64 else 1e-2
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise UsageError(f"finite_diff_check needs a scalar-valued f, got shape {out.shape}")
    out.backward()
    ad = xt.grad.reshape(-1)

    flat = x.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    for i in coords:
        xp = flat.copy()
        xp[i] += h
        fp = f(Tensor(xp.reshape(x.shape))).item()
        xm = flat.copy()
        xm[i] -= h
        fm = f(Tensor(xm.reshape(x.shape))).item()
        fd = (fp - fm) / (2.0 * h)
        err = abs(ad[i] - fd) / max(1.0, abs(fd), abs(ad[i]))
        worst = max(worst, err)
    return worst
