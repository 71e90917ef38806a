"""Binary checkpoint format.

Layout: the 5-byte magic ``ARDU1`` followed by records until end of file. A
record is ``uint32 name length``, the UTF-8 name, four ``uint32`` extents, then
``prod(extents)`` little-endian float32 values. Arrays with fewer than four
axes are stored with their shape left-padded by ones. Batch-norm running
statistics use the reserved names ``__running__/<module>.mean`` and
``__running__/<module>.var``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import AttResDUNet, ModelConfig, build_model

MAGIC = b"ARDU1"
RUNNING_PREFIX = "__running__/"


class CheckpointError(ValueError):
    pass


def state_arrays(model: AttResDUNet) -> dict[str, np.ndarray]:
    """Every persisted array of ``model`` in a stable order."""
    arrays = {name: p.data for name, p in model.named_parameters()}
    for name, stats in model.named_buffers():
        arrays[f"{RUNNING_PREFIX}{name}.mean"] = stats.mean
        arrays[f"{RUNNING_PREFIX}{name}.var"] = stats.var
    return arrays


def _pad4(shape) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise CheckpointError(f"cannot store {len(shape)}-D array")
    return (1,) * (4 - len(shape)) + tuple(int(s) for s in shape)


def encode(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<4I", *_pad4(arr.shape)))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    arrays: dict[str, np.ndarray] = {}
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise CheckpointError(f"truncated record header at byte {pos}")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + n + 16 > len(blob):
            raise CheckpointError(f"truncated record at byte {pos}")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        shape = struct.unpack_from("<4I", blob, pos)
        pos += 16
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated data for tensor {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    return arrays


def save_checkpoint(model: AttResDUNet, path) -> None:
    Path(path).write_bytes(encode(state_arrays(model)))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def load_state(model: AttResDUNet, arrays: dict[str, np.ndarray]) -> AttResDUNet:
    """Copy ``arrays`` into ``model`` in place; every tensor must match exactly."""
    expected = state_arrays(model)
    missing = [k for k in expected if k not in arrays]
    extra = [k for k in arrays if k not in expected]
    if missing or extra:
        raise CheckpointError(f"tensor set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, target in expected.items():
        src = arrays[name]
        if _pad4(target.shape) != _pad4(src.shape):
            raise CheckpointError(f"shape mismatch for tensor {name!r}: checkpoint {src.shape}, model {target.shape}")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, src in arrays.items():
        if name.startswith(RUNNING_PREFIX):
            module, field = name[len(RUNNING_PREFIX):].rsplit(".", 1)
            setattr(buffers[module], field, src.reshape(-1).astype(np.float32).copy())
        else:
            p = params[name]
            p.data = src.reshape(p.shape).astype(np.float32).copy()
    return model


def load_checkpoint(path, config: ModelConfig) -> AttResDUNet:
    """Build a model for ``config`` and fill it from ``path``."""
    return load_state(build_model(config), read_checkpoint(path))
