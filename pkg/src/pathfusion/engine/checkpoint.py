"""Parameter checkpoint files.

Layout: a text line ``PFCKPT1 <count>``, then per entry a text line
``<name> <ndim> <dim0> <dim1> ...`` followed by the little-endian float64
payload.  Entries are written in the order given, so equal inputs give
identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import CorruptionError, FormatError

MAGIC = b"PFCKPT1"


def save_checkpoint(path: str | Path, entries: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC + f" {len(entries)}\n".encode()]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        if any(c.isspace() for c in name):
            raise FormatError(f"checkpoint entry name {name!r} contains whitespace")
        dims = " ".join(str(d) for d in arr.shape)
        chunks.append(f"{name} {arr.ndim} {dims}".rstrip().encode() + b"\n")
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint {path} does not exist")
    blob = path.read_bytes()
    pos = 0

    def line() -> list[str]:
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CorruptionError(f"{path}: truncated header")
        text = blob[pos:end].decode("ascii", errors="replace").split()
        pos = end + 1
        return text

    head = line()
    if len(head) != 2 or head[0].encode() != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    out: dict[str, np.ndarray] = {}
    for _ in range(int(head[1])):
        fields = line()
        try:
            name, ndim = fields[0], int(fields[1])
            shape = tuple(int(d) for d in fields[2:2 + ndim])
        except (IndexError, ValueError) as exc:
            raise CorruptionError(f"{path}: malformed entry header {fields!r}") from exc
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise CorruptionError(f"{path}: payload of {name} truncated")
        out[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise CorruptionError(f"{path}: {len(blob) - pos} trailing bytes")
    return out
