"""Binary checkpoint persistence.

File layout: magic "SRMK", u32 version, then a series of sections. Each
section is: u32 name length, name bytes, u64 payload length, payload,
u32 crc32 of the payload. All integers little-endian. Tensor blocks
inside a section are: u32 name length, name, u8 dtype code (0 = float32,
1 = float64), u32 ndim, u32 extents, then the row-major payload.

Sections are written in a fixed order and tensors in sorted-name order,
so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig, canonical_text, parse_config_text
from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"SRMK"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    train_config: TrainConfig
    params: dict  # name -> np.ndarray
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    norm_mean: np.ndarray = None  # [C]
    norm_std: np.ndarray = None  # [C]
    rng_state: dict | None = None

    @property
    def model_config(self):
        return self.train_config.model


def _write_tensors(buf, tensors):
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())


def _read_tensors(buf):
    (count,) = struct.unpack("<I", _take(buf, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _take(buf, 4))
        name = _take(buf, nlen).decode()
        code, ndim = struct.unpack("<BI", _take(buf, 5))
        shape = struct.unpack(f"<{ndim}I", _take(buf, 4 * ndim))
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        n = int(np.prod(shape)) if shape else 1
        raw = _take(buf, n * dtype.itemsize)
        out[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return out


def _take(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _write_section(f, name, payload):
    nb = name.encode()
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<Q", len(payload)))
    f.write(payload)
    f.write(struct.pack("<I", zlib.crc32(payload)))


def _read_sections(f):
    sections = {}
    while True:
        head = f.read(4)
        if not head:
            return sections
        if len(head) != 4:
            raise CheckpointError("truncated section header")
        (nlen,) = struct.unpack("<I", head)
        name = _take(f, nlen).decode()
        (plen,) = struct.unpack("<Q", _take(f, 8))
        payload = _take(f, plen)
        (crc,) = struct.unpack("<I", _take(f, 4))
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"section {name!r}: checksum mismatch (corrupt payload)")
        sections[name] = payload


def save_checkpoint(ckpt, path):
    """Write a checkpoint; byte-identical for identical state."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        _write_section(f, "config", canonical_text(ckpt.train_config).encode())

        meta = {"epoch": ckpt.epoch, "adam_t": ckpt.adam_t}
        _write_section(f, "meta", json.dumps(meta, sort_keys=True).encode())

        buf = io.BytesIO()
        mean = np.zeros(0) if ckpt.norm_mean is None else np.asarray(ckpt.norm_mean, dtype="<f8")
        std = np.zeros(0) if ckpt.norm_std is None else np.asarray(ckpt.norm_std, dtype="<f8")
        buf.write(struct.pack("<I", mean.size))
        buf.write(mean.astype("<f8").tobytes())
        buf.write(std.astype("<f8").tobytes())
        _write_section(f, "norm", buf.getvalue())

        for name, tensors in (("params", ckpt.params), ("adam_m", ckpt.adam_m),
                              ("adam_v", ckpt.adam_v)):
            buf = io.BytesIO()
            _write_tensors(buf, tensors)
            _write_section(f, name, buf.getvalue())

        rng_payload = json.dumps(ckpt.rng_state, sort_keys=True).encode() if ckpt.rng_state else b""
        _write_section(f, "rng", rng_payload)


def load_checkpoint(path):
    try:
        f = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not an SRMK checkpoint")
        (version,) = struct.unpack("<I", _take(f, 4))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: format version {version} not supported (expected {VERSION}); "
                "re-save with a matching build")
        sections = _read_sections(f)

    for required in ("config", "meta", "params", "adam_m", "adam_v", "norm"):
        if required not in sections:
            raise CheckpointError(f"{path}: missing section {required!r}")

    train_config = parse_config_text(sections["config"].decode()).validate()
    meta = json.loads(sections["meta"].decode())
    params = _read_tensors(io.BytesIO(sections["params"]))
    adam_m = _read_tensors(io.BytesIO(sections["adam_m"]))
    adam_v = _read_tensors(io.BytesIO(sections["adam_v"]))

    buf = io.BytesIO(sections["norm"])
    (c,) = struct.unpack("<I", _take(buf, 4))
    norm_mean = np.frombuffer(_take(buf, 8 * c), dtype="<f8").copy() if c else None
    norm_std = np.frombuffer(_take(buf, 8 * c), dtype="<f8").copy() if c else None

    rng_state = json.loads(sections["rng"].decode()) if sections.get("rng") else None
    return Checkpoint(train_config=train_config, params=params, adam_m=adam_m,
                      adam_v=adam_v, adam_t=meta["adam_t"], epoch=meta["epoch"],
                      norm_mean=norm_mean, norm_std=norm_std, rng_state=rng_state)


def params_to_tensors(params, frozen_names=()):
    return {k: Tensor(v.copy(), requires_grad=k not in frozen_names)
            for k, v in params.items()}


def tensors_to_arrays(tensors):
    return {k: v.data.copy() for k, v in tensors.items()}
