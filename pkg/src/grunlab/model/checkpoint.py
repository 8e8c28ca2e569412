"""Binary tensor archive.

Layout (all integers little-endian)::

    b"GRUNCKPT"  u32 version=1  u32 count
    count x [ u16 name_len | name (utf-8) | u8 dtype (0=f32) | u8 rank |
              rank x u32 dims | row-major f32 payload ]
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import FormatError
from .transformer import Model, ModelConfig, param_shapes

MAGIC = b"GRUNCKPT"
VERSION = 1
DTYPE_F32 = 0
CONFIG_KEY = "meta/model_config"
_CONFIG_FIELDS = ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len", "ff_mult")


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated file: need {n} bytes for {what} at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise FormatError("bad magic at offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 8")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name_at = pos
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"invalid utf-8 name at offset {name_at}") from None
        dtype_at = pos
        dtype, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if dtype != DTYPE_F32:
            raise FormatError(f"unknown dtype code {dtype} at offset {dtype_at}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        payload = take(4 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"trailing bytes at offset {pos}")
    return out


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def save_checkpoint(model: Model, interventions=None, path: str | Path = "model.ckpt") -> None:
    """Write model parameters, config and (optionally) a GrunStack."""
    tensors: dict[str, np.ndarray] = {
        CONFIG_KEY: np.asarray([getattr(model.config, f) for f in _CONFIG_FIELDS], dtype=np.float32)
    }
    tensors.update({name: p.data for name, p in model.named_parameters()})
    if interventions is not None:
        tensors.update(interventions.state_dict())
    write_tensors(path, tensors)


def load_checkpoint(path: str | Path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, stack_or_None)``."""
    from ..intervention import GrunStack
    from ..nn.tensor import Tensor

    tensors = read_tensors(path)
    if CONFIG_KEY not in tensors:
        raise FormatError("checkpoint has no model config tensor")
    cfg = ModelConfig(**{f: int(v) for f, v in zip(_CONFIG_FIELDS, tensors.pop(CONFIG_KEY))})
    names = param_shapes(cfg)
    params = {}
    for name in names:
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        params[name] = Tensor(tensors.pop(name), dtype=np.float32, name=name)
    model = Model(cfg, params)
    stack = GrunStack.from_state_dict(tensors) if any(k.startswith("grun/") for k in tensors) else None
    return model, stack
