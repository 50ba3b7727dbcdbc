"""Checkpoint files.

Layout (all text lines are ASCII, ``\\n`` terminated)::

    SSCKPT 1
    <count>
    <name> <ndim> <d0> <d1> ...      (one line per tensor, in payload order)
    <payload>                         raw little-endian float32 values

Names may not contain whitespace.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

MAGIC = "SSCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray]) -> None:
    lines = [f"{MAGIC} {VERSION}", str(len(tensors))]
    payload = []
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise CheckpointError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr)
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii") + b"".join(payload))


def load(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    pos = 0

    def line():
        nonlocal pos
        end = raw.index(b"\n", pos)
        text = raw[pos:end].decode("ascii")
        pos = end + 1
        return text

    magic = line().split()
    if len(magic) != 2 or magic[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(magic[1]) != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {magic[1]}")
    count = int(line())
    table = []
    for _ in range(count):
        parts = line().split()
        ndim = int(parts[1])
        table.append((parts[0], tuple(int(d) for d in parts[2:2 + ndim])))
    out = {}
    for name, shape in table:
        n = math.prod(shape)
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
        out[name] = arr.astype(np.float32)
        pos += 4 * n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
