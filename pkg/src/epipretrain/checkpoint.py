"""Binary checkpoint container.

Layout::

    b"EPICKPT\\0"  | u32 version | u32 header length | JSON header |
    little-endian float64 payload | 32-byte SHA-256 of everything before it

The header records the model config, the seed and each tensor's name and
shape in payload order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, Params

MAGIC = b"EPICKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Params, path, config: ModelConfig, extra: dict | None = None) -> None:
    names = list(params)
    header = {
        "config": config.to_dict(),
        "seed": config.seed,
        "tensors": [[n, list(params[n].shape)] for n in names],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    body = MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + payload
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Return ``(params, config, extra)``; raises :class:`CheckpointError` on any defect."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint or truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = len(MAGIC) + 8
    header = json.loads(body[start : start + hlen])
    config = ModelConfig(**header["config"])
    if expected is not None and expected != config:
        diff = {k: (v, getattr(config, k)) for k, v in expected.to_dict().items() if getattr(config, k) != v}
        raise CheckpointError(f"{path}: config mismatch (expected, found): {diff}")
    offset = start + hlen
    params: Params = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=offset).astype(np.float64)
        params[name] = arr.reshape(shape)
        offset += 8 * n
    if offset != len(body):
        raise CheckpointError(f"{path}: payload size does not match header")
    return params, config, header.get("extra", {})
