"""Dataset ingestion, augmentation, patchification, and the LR-view pipeline.

Supported on-disk formats (no third-party decoders needed):
  * raw-tensor-dir: one ``.srt`` file per image — magic "SRT1", then
    little-endian u32 C, H, W followed by C*H*W float32 values.
  * netpbm-dir: binary PGM (P5) / PPM (P6), maxval 255.
  * idx-pair: a directory holding one idx3 image file and one idx1 label
    file (big-endian dimensions, u8 payload).

An optional ``labels.txt`` (one integer per line, sorted-filename order)
attaches labels to the directory formats.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, IngestionError, ShapeError
from .tensor import Tensor

FORMATS = ("raw-tensor-dir", "netpbm-dir", "idx-pair")


@dataclass
class ImageBatch:
    pixels: Tensor  # [B, C, H, W]
    labels: np.ndarray | None = None  # [B] int64

    @property
    def batch(self):
        return self.pixels.shape[0]


@dataclass
class PatchSequence:
    tokens: Tensor  # [B, N, D]
    grid: tuple  # (rows, cols), rows*cols == N
    patch_size: int
    channels: int

    @property
    def n_patches(self):
        return self.tokens.shape[1]

    @property
    def patch_dim(self):
        return self.tokens.shape[2]


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray | None = None

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx):
        lab = self.labels[idx] if self.labels is not None else None
        return Dataset(self.images[idx], lab)


# -- patchification -------------------------------------------------------


def patchify(img, patch_size):
    """Split [B,C,H,W] pixels into row-major tokens of dim C*P*P."""
    p = int(patch_size)
    b, c, h, w = img.pixels.shape
    if h % p or w % p:
        raise ConfigurationError(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    x = T.reshape(img.pixels, (b, c, rows, p, cols, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    tokens = T.reshape(x, (b, rows * cols, c * p * p))
    return PatchSequence(tokens=tokens, grid=(rows, cols), patch_size=p, channels=c)


def unpatchify(seq):
    """Exact inverse of patchify."""
    rows, cols = seq.grid
    b, n, d = seq.tokens.shape
    p, c = seq.patch_size, seq.channels
    if n != rows * cols:
        raise ShapeError(f"grid {seq.grid} inconsistent with {n} tokens")
    if d != c * p * p:
        raise ShapeError(f"token dim {d} != C*P*P = {c * p * p}")
    x = T.reshape(seq.tokens, (b, rows, cols, c, p, p))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    return ImageBatch(pixels=T.reshape(x, (b, c, rows * p, cols * p)))


# -- SRMAE downsampling pipeline ------------------------------------------


def make_lr_view(img, factor):
    """Low-resolution view at the original extent.

    Block-average downsample by `factor`, then nearest-neighbor resize
    back to (H, W) so the LR and HR patch grids align.
    """
    _, _, h, w = img.pixels.shape
    small = T.downsample_area(img.pixels, factor)
    return ImageBatch(pixels=T.interpolate_nearest(small, h, w), labels=img.labels)


# -- augmentation ---------------------------------------------------------


def horizontal_flip(img, p, rng):
    """Mirror each image across the vertical axis with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"flip probability must be in [0,1], got {p}")
    pix = img.pixels.data.copy()
    flip = rng.random(pix.shape[0]) < p
    pix[flip] = pix[flip, :, :, ::-1]
    return ImageBatch(pixels=Tensor(pix), labels=img.labels)


def random_resized_crop(img, out_size, scale_range, rng):
    """Crop with area fraction uniform in scale_range, nearest-resize to out_size.

    The crop keeps the source aspect ratio; a crop that would exceed the
    image is clamped to the full image.
    """
    lo, hi = scale_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ConfigurationError(f"scale range must satisfy 0 < lo <= hi <= 1, got {scale_range}")
    b, c, h, w = img.pixels.shape
    oh, ow = (out_size, out_size) if isinstance(out_size, int) else out_size
    out = np.empty((b, c, oh, ow), dtype=img.pixels.data.dtype)
    rows_out = np.arange(oh, dtype=np.int64)
    cols_out = np.arange(ow, dtype=np.int64)
    for i in range(b):
        frac = lo + (hi - lo) * rng.random()
        ch = min(h, max(1, int(round(h * np.sqrt(frac)))))
        cw = min(w, max(1, int(round(w * np.sqrt(frac)))))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        crop = img.pixels.data[i, :, top:top + ch, left:left + cw]
        ri = (rows_out * ch) // oh
        ci = (cols_out * cw) // ow
        out[i] = crop[:, ri][:, :, ci]
    return ImageBatch(pixels=Tensor(out), labels=img.labels)


# -- batch iteration ------------------------------------------------------


def iter_batches(dataset, batch_size, rng=None, shuffle=False, drop_last=False):
    """Yield ImageBatch views over the dataset in (optionally shuffled) order."""
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n)
    if shuffle:
        if rng is None:
            raise ConfigurationError("shuffle requires an rng")
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and idx.size < batch_size:
            return
        labels = dataset.labels[idx] if dataset.labels is not None else None
        yield ImageBatch(pixels=Tensor(dataset.images[idx]), labels=labels)


def num_batches(n, batch_size, drop_last=False):
    return n // batch_size if drop_last else -(-n // batch_size)


# -- synthetic digit corpus -----------------------------------------------

_GLYPHS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],  # 0
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],  # 1
    ["01110", "10001", "00001", "00110", "01000", "10000", "11111"],  # 2
    ["01110", "10001", "00001", "00110", "00001", "10001", "01110"],  # 3
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],  # 4
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],  # 5
    ["01110", "10000", "10000", "11110", "10001", "10001", "01110"],  # 6
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],  # 7
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],  # 8
    ["01110", "10001", "10001", "01111", "00001", "00001", "01110"],  # 9
]

_GLYPH_ARRAYS = [np.array([[int(ch) for ch in row] for row in g], dtype=np.float32)
                 for g in _GLYPHS]


def synthetic_digits(count, resolution=32, seed=0):
    """Seeded procedural digit corpus: 10 classes, affine jitter, noise."""
    rng = np.random.default_rng(seed)
    images = np.empty((count, 1, resolution, resolution), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        cls = int(rng.integers(10))
        labels[i] = cls
        glyph = _GLYPH_ARRAYS[cls]
        scale = 0.55 + 0.35 * rng.random()
        gh = max(7, int(round(resolution * scale)))
        gw = max(5, int(round(gh * 5.0 / 7.0)))
        gh, gw = min(gh, resolution), min(gw, resolution)
        ri = (np.arange(gh) * glyph.shape[0]) // gh
        ci = (np.arange(gw) * glyph.shape[1]) // gw
        stamp = glyph[ri][:, ci]
        top = int(rng.integers(0, resolution - gh + 1))
        left = int(rng.integers(0, resolution - gw + 1))
        bg = 0.15 * rng.random()
        fg = 0.55 + 0.45 * rng.random()
        canvas = np.full((resolution, resolution), bg, dtype=np.float32)
        canvas += rng.normal(0.0, 0.03, size=canvas.shape).astype(np.float32)
        region = canvas[top:top + gh, left:left + gw]
        canvas[top:top + gh, left:left + gw] = np.where(stamp > 0, fg, region)
        images[i, 0] = np.clip(canvas, 0.0, 1.0)
    return Dataset(images=images, labels=labels)


# -- netpbm ---------------------------------------------------------------


def _read_pnm_token(f):
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise IngestionError("unexpected end of netpbm header")
        if ch in b" \t\r\n":
            if tok:
                return tok
            continue
        if ch == b"#":
            while f.read(1) not in (b"\n", b""):
                pass
            continue
        tok += ch


def read_netpbm(path):
    """Read a binary P5/P6 file into float32 [C,H,W] in [0,1]."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            magic = f.read(2)
            if magic not in (b"P5", b"P6"):
                raise IngestionError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
            w = int(_read_pnm_token(f))
            h = int(_read_pnm_token(f))
            maxval = int(_read_pnm_token(f))
            if maxval != 255:
                raise IngestionError(f"{path}: only maxval 255 supported, got {maxval}")
            c = 1 if magic == b"P5" else 3
            payload = f.read(w * h * c)
            if len(payload) != w * h * c:
                raise IngestionError(f"{path}: truncated pixel payload")
    except OSError as e:
        raise IngestionError(f"{path}: {e}") from e
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c)
    return (arr.transpose(2, 0, 1).astype(np.float32)) / 255.0


def write_netpbm(path, pixels):
    """Write [C,H,W] float [0,1] as P5 (C=1) or P6 (C=3)."""
    c, h, w = pixels.shape
    if c == 1:
        magic = b"P5"
        body = pixels[0]
    elif c == 3:
        magic = b"P6"
        body = pixels.transpose(1, 2, 0)
    else:
        raise IngestionError(f"cannot write {c}-channel image as netpbm")
    data = np.clip(np.round(body * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n255\n".encode())
        f.write(data.tobytes())


# -- raw tensor files -----------------------------------------------------

_SRT_MAGIC = b"SRT1"


def read_raw_tensor(path):
    path = Path(path)
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _SRT_MAGIC:
                raise IngestionError(f"{path}: bad magic {magic!r}")
            c, h, w = struct.unpack("<III", f.read(12))
            payload = f.read(c * h * w * 4)
            if len(payload) != c * h * w * 4:
                raise IngestionError(f"{path}: truncated payload")
    except OSError as e:
        raise IngestionError(f"{path}: {e}") from e
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)


def write_raw_tensor(path, pixels):
    c, h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(_SRT_MAGIC)
        f.write(struct.pack("<III", c, h, w))
        f.write(pixels.astype("<f4").tobytes())


# -- idx pair -------------------------------------------------------------


def _read_idx(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise IngestionError(f"{path}: too short for an idx file")
    magic = struct.unpack(">I", raw[:4])[0]
    ndim = magic & 0xFF
    if magic >> 8 != 0x08 or ndim not in (1, 3):
        raise IngestionError(f"{path}: unsupported idx magic {magic:#010x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise IngestionError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def _load_labels_txt(root, count):
    path = Path(root) / "labels.txt"
    if not path.exists():
        return None
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) != count:
        raise IngestionError(f"{path}: {len(lines)} labels for {count} images")
    try:
        return np.array([int(v) for v in lines], dtype=np.int64)
    except ValueError as e:
        raise IngestionError(f"{path}: {e}") from e


def load_dataset(root, fmt):
    """Load an entire corpus into memory as a Dataset."""
    root = Path(root)
    if not root.exists():
        raise IngestionError(f"dataset root does not exist: {root}")
    if fmt == "raw-tensor-dir":
        files = sorted(root.glob("*.srt"))
        if not files:
            raise IngestionError(f"no .srt files under {root}")
        images = np.stack([read_raw_tensor(p) for p in files])
        return Dataset(images=images, labels=_load_labels_txt(root, len(files)))
    if fmt == "netpbm-dir":
        files = sorted(list(root.glob("*.pgm")) + list(root.glob("*.ppm")))
        if not files:
            raise IngestionError(f"no .pgm/.ppm files under {root}")
        images = np.stack([read_netpbm(p) for p in files])
        return Dataset(images=images, labels=_load_labels_txt(root, len(files)))
    if fmt == "idx-pair":
        img_arr = lab_arr = None
        for p in sorted(root.iterdir()):
            if p.is_dir() or p.name == "labels.txt":
                continue
            arr = _read_idx(p)
            if arr.ndim == 3:
                img_arr = arr
            else:
                lab_arr = arr
        if img_arr is None:
            raise IngestionError(f"no idx3 image file under {root}")
        images = (img_arr[:, None].astype(np.float32)) / 255.0
        labels = lab_arr.astype(np.int64) if lab_arr is not None else None
        if labels is not None and labels.shape[0] != images.shape[0]:
            raise IngestionError(
                f"{root}: {labels.shape[0]} labels for {images.shape[0]} images")
        return Dataset(images=images, labels=labels)
    raise ConfigurationError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
