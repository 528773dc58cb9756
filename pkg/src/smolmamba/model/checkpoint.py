"""Single-file checkpoint container.

Layout (little-endian)::

    b"SMOLMAMB" | u32 version | u32 config_len | config JSON (sorted keys)
    u32 tensor_count
    per tensor, names sorted: u16 name_len | name | u8 ndim | u32 dims... | f32 data
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from ..errors import CheckpointFormatError, MissingFile
from .network import ModelConfig, VisionSmolMamba

MAGIC = b"SMOLMAMB"
VERSION = 1


def model_state(model: VisionSmolMamba) -> dict[str, np.ndarray]:
    state = {k: t.data for k, t in model.named_parameters().items()}
    state.update(model.named_buffers())
    return state


def load_state(model: VisionSmolMamba, state: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    buffers = model.named_buffers()
    expected = set(params) | set(buffers)
    if set(state) != expected:
        missing = sorted(expected - set(state))
        extra = sorted(set(state) - expected)
        raise CheckpointFormatError(f"tensor names differ: missing={missing[:3]} extra={extra[:3]}")
    for name, value in state.items():
        target = params[name].data if name in params else buffers[name]
        if target.shape != value.shape:
            raise CheckpointFormatError(f"{name}: shape {value.shape} != {target.shape}")
        if name in params:
            params[name].data[...] = value
        else:
            model.set_buffer(name, np.asarray(value, dtype=np.float64).copy())


def encode(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointFormatError("bad magic")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    try:
        config = json.loads(bytes(take(cfg_len)).decode())
    except ValueError as exc:
        raise CheckpointFormatError(f"config block is not JSON: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(shape).copy()
    if pos != len(view):
        raise CheckpointFormatError("trailing bytes after last tensor")
    return config, tensors


def atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, model: VisionSmolMamba) -> None:
    atomic_write(path, encode(model.cfg.to_dict(), model_state(model)))


def load_checkpoint(path: str, dtype: str | None = None) -> VisionSmolMamba:
    if not os.path.isfile(path):
        raise MissingFile(f"no such checkpoint: {path}")
    with open(path, "rb") as fh:
        config, tensors = decode(fh.read())
    if dtype is not None:
        config["dtype"] = dtype
    model = VisionSmolMamba(ModelConfig.from_dict(config))
    load_state(model, tensors)
    return model
