"""Named-tensor checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the raw little-endian payload of every tensor back to back. The header
lists each tensor's name, dtype, shape, byte offset and length, plus a free
``meta`` object (iteration, config hash, RNG state, ...).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointMismatchError

MAGIC = b"SMCKPT01"

_DTYPES = {
    torch.float32: "<f4", torch.float64: "<f8", torch.float16: "<f2",
    torch.int64: "<i8", torch.int32: "<i4", torch.int16: "<i2", torch.int8: "i1",
    torch.uint8: "u1", torch.bool: "?",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


def _to_bytes(t: torch.Tensor) -> tuple[str, bytes]:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _DTYPES:
        raise TypeError(f"unsupported tensor dtype {t.dtype}")
    code = _DTYPES[t.dtype]
    return code, t.numpy().astype(np.dtype(code), copy=False).tobytes()


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> Path:
    """Write atomically: a temporary file in the same directory is renamed into place."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        code, blob = _to_bytes(tensors[name])
        entries.append({"name": name, "dtype": code, "shape": list(tensors[name].shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointMismatchError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n))


def load_checkpoint(path, expected_config_hash: str | None = None) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; refuse when ``meta["config_hash"]`` differs from the expected one."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointMismatchError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    meta = header["meta"]
    if expected_config_hash is not None and meta.get("config_hash") != expected_config_hash:
        raise CheckpointMismatchError(
            f"checkpoint was written for config {meta.get('config_hash')!r}, "
            f"current config is {expected_config_hash!r}")
    base = 16 + n
    tensors = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return tensors, meta


def tensors_hash(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        code, blob = _to_bytes(tensors[name])
        h.update(name.encode())
        h.update(code.encode())
        h.update(str(list(tensors[name].shape)).encode())
        h.update(blob)
    return h.hexdigest()


def capture_rng(np_rng: np.random.Generator | None = None) -> tuple[dict, dict]:
    """``(meta, tensors)`` describing the torch global RNG and an optional numpy generator."""
    meta = {"numpy": np_rng.bit_generator.state if np_rng is not None else None}
    return meta, {"rng/torch": torch.get_rng_state()}


def restore_rng(meta: dict, tensors: dict, np_rng: np.random.Generator | None = None) -> None:
    if "rng/torch" in tensors:
        torch.set_rng_state(tensors["rng/torch"])
    if np_rng is not None and meta.get("numpy") is not None:
        np_rng.bit_generator.state = meta["numpy"]
