"""Binary checkpoints.

Layout: the magic line ``HIPAMA-CKPT-1\\n``, an unsigned 64-bit little-endian
header length, a UTF-8 JSON header (model config, ordered parameter names and
shapes, free-form ``extra``), then every parameter as little-endian float64 in
row-major order, in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import HiPAMA, ModelConfig

MAGIC = b"HIPAMA-CKPT-1\n"


class CheckpointError(ValueError):
    pass


def encode(params: list[tuple[str, np.ndarray]], config: ModelConfig, extra: dict | None = None) -> bytes:
    header = {
        "config": config.to_dict(),
        "params": [{"name": n, "shape": list(a.shape)} for n, a in params],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in params)
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def save_checkpoint(path: str | Path, model: HiPAMA, extra: dict | None = None, params=None) -> None:
    """Write ``model`` (or an explicit ``params`` snapshot of it) to ``path``."""
    if params is None:
        params = [(n, p.data) for n, p in model.named_parameters()]
    Path(path).write_bytes(encode(params, model.config, extra))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
        entries = [(e["name"], tuple(e["shape"])) for e in header["params"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    off += hlen
    arrays = {}
    for name, shape in entries:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {name}")
        arrays[name] = np.frombuffer(raw[off:off + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[HiPAMA, dict]:
    """Rebuild the model stored in ``path``; returns (model, extra)."""
    header, arrays = read_checkpoint(path)
    model = HiPAMA(ModelConfig.from_dict(header["config"]))
    named = dict(model.named_parameters())
    if list(named) != list(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    for name, p in named.items():
        if p.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data[...] = arrays[name]
    return model, header.get("extra", {})
