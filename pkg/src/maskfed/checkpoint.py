"""Tensor dump format, parameter-group manifests, and checksums.

File layout: the magic string "EFTV1", then for each tensor a header
(u32 name length, UTF-8 name, u8 dtype tag, i64 rank, rank x i64 dims,
all little-endian) followed by the raw row-major buffer.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError

MAGIC = b"EFTV1"

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dump_tensors(named: dict[str, np.ndarray]) -> bytes:
    """Serialize name -> array pairs in insertion order."""
    chunks = [MAGIC]
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise DimensionError(f"cannot dump dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
        chunks.append(struct.pack("<q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(chunks)


def load_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise DimensionError("bad magic: not a tensor dump")
    off = len(MAGIC)
    out = {}
    while off < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (tag,) = struct.unpack_from("<B", blob, off)
        off += 1
        if tag not in _TAG_DTYPES:
            raise DimensionError(f"unknown dtype tag {tag}")
        (rank,) = struct.unpack_from("<q", blob, off)
        off += 8
        shape = struct.unpack_from(f"<{rank}q", blob, off)
        off += 8 * rank
        dt = _TAG_DTYPES[tag]
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(shape)
        off += count * dt.itemsize
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return out


def save_tensors(path, named: dict[str, np.ndarray]):
    Path(path).write_bytes(dump_tensors(named))


def load_tensors_file(path) -> dict[str, np.ndarray]:
    return load_tensors(Path(path).read_bytes())


def write_manifest(path, groups: dict[str, list[str]]):
    """Parameter-group manifest: tensor names under [phi]/[w_global]/[theta]."""
    lines = []
    for section, names in groups.items():
        lines.append(f"[{section}]")
        lines.extend(names)
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def read_manifest(path) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    current = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            groups[current] = []
        else:
            if current is None:
                raise DimensionError("manifest entry before any section header")
            groups[current].append(line)
    return groups


def checksum(named: dict[str, np.ndarray]) -> str:
    """Order-insensitive content hash of a named tensor collection."""
    h = hashlib.sha256()
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
