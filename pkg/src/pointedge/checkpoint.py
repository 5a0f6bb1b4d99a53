"""Binary parameter checkpoints.

Layout, all integers little-endian::

    magic  b"PEDGCKPT"
    u32    format version
    u32    parameter count
    per parameter:
        u32  name length, then the UTF-8 name
        u32  rank, then rank x u64 dims
        f64  values, row-major
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Params, Tensor

MAGIC = b"PEDGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Params, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Params:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    if len(blob) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = Params()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(np.float64)
            off += 8 * size
            out[name] = Tensor(values.reshape(dims), requires_grad=True)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from None
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def check_compatible(loaded: Params, expected: Params) -> None:
    """Raise CheckpointError listing every missing, unexpected or mis-shaped parameter."""
    problems = []
    for name, t in expected.items():
        if name not in loaded:
            problems.append(f"missing {name} {t.shape}")
        elif loaded[name].shape != t.shape:
            problems.append(f"{name}: checkpoint {loaded[name].shape} vs model {t.shape}")
    for name in loaded:
        if name not in expected:
            problems.append(f"unexpected {name} {loaded[name].shape}")
    if problems:
        raise CheckpointError("incompatible checkpoint:\n  " + "\n  ".join(problems))
