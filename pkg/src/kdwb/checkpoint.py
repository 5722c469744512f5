"""Binary checkpoint format.

Layout::

    b"KDWB" | u32 version | u32 header_len | header (utf-8 JSON) | float32 LE data

The header holds the model config, the ordered parameter manifest
(name, shape) and the total parameter count. Parameters are stored in
manifest order and downcast to 32-bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, param_count, param_shapes
from .tensor import Tensor

MAGIC = b"KDWB"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def encode_header(model: Model, extra: dict | None = None) -> bytes:
    header = {
        "config": model.config.to_dict(),
        "manifest": [[name, list(t.shape)] for name, t in model.params.items()],
        "param_count": model.num_parameters(),
    }
    if extra:
        header["extra"] = extra
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: Model, path, extra: dict | None = None) -> Path:
    path = Path(path)
    header = encode_header(model, extra)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh.read(), path)


def _read_header(raw: bytes, path) -> dict:
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    end = _PREFIX.size + hlen
    if len(raw) < end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    header["_data_offset"] = end
    return header


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    header = _read_header(raw, path)
    config = ModelConfig.from_dict(header["config"])
    expected = param_shapes(config)
    manifest = [(name, tuple(shape)) for name, shape in header["manifest"]]
    if [n for n, _ in manifest] != list(expected):
        raise CheckpointError(f"{path}: parameter names do not match the header config")
    for name, shape in manifest:
        if expected[name] != shape:
            raise CheckpointError(f"{path}: {name} has shape {shape}, config implies {expected[name]}")
    total = sum(int(np.prod(s)) for _, s in manifest)
    if header.get("param_count") != total or total != param_count(config):
        raise CheckpointError(f"{path}: declared parameter count disagrees with manifest")

    offset = header["_data_offset"]
    if len(raw) - offset != 4 * total:
        raise CheckpointError(
            f"{path}: expected {4 * total} data bytes, found {len(raw) - offset}")
    flat = np.frombuffer(raw, dtype="<f4", count=total, offset=offset).astype(np.float64)
    params, pos = {}, 0
    for name, shape in manifest:
        n = int(np.prod(shape))
        params[name] = Tensor(flat[pos:pos + n].reshape(shape).copy(), requires_grad=True, name=name)
        pos += n
    return Model(config, params)
