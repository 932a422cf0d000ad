"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays as storage, a tape of
parent links with per-node backward closures, and exactly the operations
the rest of the package needs. Gradients accumulate into ``.grad`` on
every tensor created with ``requires_grad=True``.

GELU uses the tanh approximation (0.5*x*(1+tanh(sqrt(2/pi)*(x+0.044715*x^3)))),
not exact erf.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError, UsageError

# Finite-check on every op output. Cheap at desk scale; can be switched
# off for throughput experiments.
CHECK_FINITE = True

_FLOAT_DTYPES = (np.float32, np.float64)

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (eval-mode forward)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _check_finite(arr, op):
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by '{op}'")


class Tensor:
    """N-d array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    # -- construction helper for op results ------------------------------

    @classmethod
    def _result(cls, data, parents, backward, op):
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._consumed = False
        out._op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ---------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise UsageError(f"item() on tensor of shape {self.shape}")

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op})"

    # -- autodiff ---------------------------------------------------------

    def backward(self):
        """Reverse-mode accumulation from a scalar loss.

        The graph below this tensor is consumed: a second backward
        through any of its interior nodes raises UsageError.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            if node._consumed:
                raise UsageError("backward through an already-consumed graph; re-run the forward pass")
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._consumed = True

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic -----------------------------------------------


def add(a, b):
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return Tensor._result(out_data, (a, b), backward, "add")


def sub(a, b):
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return Tensor._result(out_data, (a, b), backward, "sub")


def mul(a, b):
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(out_data, (a, b), backward, "mul")


def scale(a, s):
    """Multiply by a python scalar (kept out of the graph)."""
    s = a.data.dtype.type(s)
    out_data = a.data * s

    def backward(g):
        a.accumulate_grad(g * s)

    return Tensor._result(out_data, (a,), backward, "scale")


def sin(a):
    out_data = np.sin(a.data)

    def backward(g):
        a.accumulate_grad(g * np.cos(a.data))

    return Tensor._result(out_data, (a,), backward, "sin")


def gelu(a):
    x = a.data
    c = float(np.sqrt(2.0 / np.pi))
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = (0.5 * x * (1.0 + t)).astype(x.dtype)

    def backward(g):
        # d/dx [0.5*x*(1+tanh(u))] = 0.5*(1+t) + 0.5*x*(1-t^2)*u'
        du = c * (1.0 + 3 * 0.044715 * x ** 2)
        grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du
        a.accumulate_grad((g * grad).astype(x.dtype))

    return Tensor._result(out_data, (a,), backward, "gelu")


def dropout(a, p, rng):
    """Train-mode inverted dropout; call only during training."""
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout rate must be in [0,1), got {p}")
    if p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype)
    inv = a.data.dtype.type(1.0 / (1.0 - p))
    out_data = a.data * keep * inv

    def backward(g):
        a.accumulate_grad(g * keep * inv)

    return Tensor._result(out_data, (a,), backward, "dropout")


# -- shape ops ------------------------------------------------------------


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from e

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    return Tensor._result(out_data, (a,), backward, "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate_grad(np.transpose(g, inv))

    return Tensor._result(out_data, (a,), backward, "transpose")


def concatenate(tensors, axis):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(piece)

    return Tensor._result(out_data, tuple(tensors), backward, "concatenate")


def index_select(a, indices, axis):
    """Gather slices of `a` along `axis` at integer `indices` (1-d)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"index_select expects 1-d indices, got shape {idx.shape}")
    out_data = np.take(a.data, idx, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        expanded = (slice(None),) * axis + (idx,)
        np.add.at(ga, expanded, g)
        a.accumulate_grad(ga)

    return Tensor._result(out_data, (a,), backward, "index_select")


def gather_tokens(a, indices):
    """Per-sample gather along axis 1: out[b, k] = a[b, indices[b, k]]."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_tokens: indices {idx.shape} incompatible with {a.shape}")
    batch = np.arange(a.shape[0])[:, None]
    out_data = a.data[batch, idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (batch, idx), g)
        a.accumulate_grad(ga)

    return Tensor._result(out_data, (a,), backward, "gather_tokens")


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            ga = np.broadcast_to(g, a.shape)
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            ga = np.broadcast_to(gk, a.shape)
        a.accumulate_grad(np.ascontiguousarray(ga))

    return Tensor._result(np.asarray(out_data), (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[i] for i in axis]))
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mse(a, b):
    """Mean squared error over all elements (scalar)."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = sub(a, b)
    return tmean(mul(d, d))


# -- linear algebra -------------------------------------------------------


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return Tensor._result(out_data, (a, b), backward, "matmul")


def linear(x, w, b=None):
    """x @ w.T + b with w of shape [out, in]."""
    out = matmul(x, transpose(w, tuple(range(w.ndim - 2)) + (w.ndim - 1, w.ndim - 2)))
    if b is not None:
        out = add(out, b)
    return out


# -- normalization and attention pieces -----------------------------------


def softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        s = (g * out_data).sum(axis=axis, keepdims=True)
        x.accumulate_grad(out_data * (g - s))

    return Tensor._result(out_data, (x,), backward, "softmax")


def layernorm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine params must have shape ({d},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = (xhat * gamma.data + beta.data).astype(x.data.dtype)

    def backward(g):
        if gamma.requires_grad:
            axes = tuple(range(g.ndim - 1))
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            axes = tuple(range(g.ndim - 1))
            beta.accumulate_grad(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data
            s1 = gx.sum(axis=-1, keepdims=True)
            s2 = (gx * xhat).sum(axis=-1, keepdims=True)
            x.accumulate_grad((inv / d) * (d * gx - s1 - xhat * s2))

    return Tensor._result(out_data, (x, gamma, beta), backward, "layernorm")


def cross_entropy(logits, labels):
    """Mean cross-entropy of logits [B, K] against integer labels [B]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    out_data = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits.accumulate_grad(g * p / n)

    return Tensor._result(out_data, (logits,), backward, "cross_entropy")


# -- image ops ------------------------------------------------------------


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-d cross-correlation: x [B,C,H,W], w [O,C,kh,kw], optional b [O]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d tensors, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    s, p = int(stride), int(padding)
    out_h = (H + 2 * p - kh) // s + 1
    out_w = (W + 2 * p - kw) // s + 1
    if out_h < 1 or out_w < 1:
        from .errors import ConfigurationError

        raise ConfigurationError(
            f"conv2d output extent nonpositive: input {H}x{W}, kernel {kh}x{kw}, stride {s}, padding {p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # [B, C, out_h, out_w, kh, kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, out_h * out_w)
    w2 = w.data.reshape(O, C * kh * kw)
    out_data = (w2 @ cols).reshape(B, O, out_h, out_w)
    if b is not None:
        out_data = out_data + b.data.reshape(1, O, 1, 1)

    def backward(g):
        g2 = g.reshape(B, O, out_h * out_w)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g2.sum(axis=(0, 2)))
        if w.requires_grad:
            gw = np.einsum("bol,bkl->ok", g2, cols)
            w.accumulate_grad(gw.reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)  # [B, C*kh*kw, L]
            d6 = dcols.reshape(B, C, kh, kw, out_h, out_w)
            dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += d6[:, :, i, j]
            gx = dxp[:, :, p:p + H, p:p + W] if p else dxp
            x.accumulate_grad(gx)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out_data, parents, backward, "conv2d")


def interpolate_nearest(x, out_h, out_w):
    """Nearest-neighbor resize of x [B,C,h,w]; source index floor(dst*src/dst)."""
    if x.ndim != 4:
        raise ShapeError(f"interpolate_nearest expects [B,C,H,W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output extents must be >=1, got {out_h}x{out_w}")
    B, C, H, W = x.shape
    rows = (np.arange(out_h, dtype=np.int64) * H) // out_h
    cols = (np.arange(out_w, dtype=np.int64) * W) // out_w
    out_data = np.ascontiguousarray(x.data[:, :, rows][:, :, :, cols])

    def backward(g):
        lin = (rows[:, None] * W + cols[None, :]).ravel()
        gx = np.zeros((B, C, H * W), dtype=x.data.dtype)
        np.add.at(gx, (Ellipsis, lin), g.reshape(B, C, -1))
        x.accumulate_grad(gx.reshape(B, C, H, W))

    return Tensor._result(out_data, (x,), backward, "interpolate_nearest")


def downsample_area(x, factor):
    """Block-mean downsampling by an integer factor in {2,3,4}.

    Trailing rows/columns that do not fill a complete block are dropped.
    """
    from .errors import ConfigurationError

    if factor not in (2, 3, 4):
        raise ConfigurationError(f"downsampling factor must be 2, 3 or 4, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"downsample_area expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    s = int(factor)
    oh, ow = H // s, W // s
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"image {H}x{W} too small for factor {s}")
    crop = x.data[:, :, :oh * s, :ow * s]
    out_data = crop.reshape(B, C, oh, s, ow, s).mean(axis=(3, 5)).astype(x.data.dtype)

    def backward(g):
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, s, axis=2), s, axis=3) / (s * s)
        gx[:, :, :oh * s, :ow * s] = spread
        x.accumulate_grad(gx)

    return Tensor._result(out_data, (x,), backward, "downsample_area")
