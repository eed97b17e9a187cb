"""Binary checkpoint container.

Layout (all integers little-endian)::

    4 bytes   magic b"MCNT"
    uint32    format version (1)
    uint32    length of the config JSON, then that many UTF-8 bytes
    uint32    number of arrays
    per array:
      uint16  name length, then the UTF-8 name
      uint8   number of dimensions, then one uint32 per dimension
      float32 values in C order

Arrays are the weights and biases of every layer followed by the running
mean/variance of every normalisation layer, in graph order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from mcnet.errors import CheckpointMismatchError, FormatError
from mcnet.model.config import ModelConfig
from mcnet.model.graph import ModelGraph, assemble_model

MAGIC = b"MCNT"
VERSION = 1


def checkpoint_bytes(model: ModelGraph) -> bytes:
    buf = io.BytesIO()
    cfg = model.config.to_json().encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(cfg)))
    buf.write(cfg)
    arrays = model.state_arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: ModelGraph, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(data: bytes):
    """Parse raw bytes into ``(ModelConfig, [(name, float32 array), ...])``."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not an MC-Net checkpoint (bad magic)", 0)
    version, cfg_len = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    cfg = ModelConfig.from_json(r.take(cfg_len, "config").decode("utf-8"))
    (count,) = r.unpack("<I", "array count")
    arrays = []
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{ndim}I", "shape")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size, f"values of {name}"), dtype="<f4").reshape(shape)
        arrays.append((name, arr))
    if r.pos != len(data):
        raise FormatError("trailing bytes after last array", r.pos)
    return cfg, arrays


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> ModelGraph:
    cfg, arrays = read_checkpoint(Path(path).read_bytes())
    if expected_config is not None and expected_config != cfg:
        diff = {k: (v, cfg.to_dict()[k]) for k, v in expected_config.to_dict().items()
                if cfg.to_dict()[k] != v}
        raise CheckpointMismatchError(f"checkpoint config differs from requested config: {diff}")
    model = assemble_model(cfg)
    targets = model.state_arrays()
    if [n for n, _ in targets] != [n for n, _ in arrays]:
        raise CheckpointMismatchError("checkpoint arrays do not match the model layout")
    for (name, dst), (_, src) in zip(targets, arrays):
        if dst.shape != src.shape:
            raise CheckpointMismatchError(f"{name}: checkpoint shape {src.shape} != model {dst.shape}")
        dst[...] = src
    return model
