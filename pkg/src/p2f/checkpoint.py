"""Bit-exact binary checkpoint container.

Layout: magic ``P2F1`` | version u32 | metadata-length u32 + UTF-8 text |
entry-count u32 | per entry: name-length u16 + name, dtype u8 (0 = f32),
ndim u8, dims as u64, payload as little-endian float32. Entries are
written in lexicographic name order so identical states produce
identical files.
"""

from __future__ import annotations

import struct

import numpy as np

from .autograd import FLOAT, ParameterStore

MAGIC = b"P2F1"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


def save_checkpoint(store, path, metadata: str = "") -> None:
    """Write named tensors (ParameterStore or dict name -> array)."""
    if isinstance(store, ParameterStore):
        arrays = {name: t.data for name, t in store.items()}
    else:
        arrays = {name: np.asarray(a, dtype=FLOAT) for name, a in store.items()}
    names = sorted(arrays)
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate tensor names")
    meta = metadata.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            # ascontiguousarray would promote 0-d arrays to shape (1,)
            arr = np.asarray(arrays[name], dtype=FLOAT, order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Read back (arrays, metadata); bitwise inverse of save_checkpoint."""
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        piece = blob[off : off + n]
        off += n
        return piece

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic in {path!s}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    metadata = take(meta_len, "metadata").decode("utf-8")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        if name in arrays:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        dtype, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if dtype != DTYPE_F32:
            raise CheckpointError(f"unknown dtype code {dtype}")
        dims = tuple(
            struct.unpack("<Q", take(8, "dim"))[0] for _ in range(ndim)
        )
        n_elem = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = take(4 * n_elem, f"payload of {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(FLOAT)
    if off != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return arrays, metadata


def load_store(path, frozen: bool = True) -> tuple[ParameterStore, str]:
    arrays, metadata = load_checkpoint(path)
    store = ParameterStore()
    for name in sorted(arrays):
        store.add(name, arrays[name].copy(), frozen=frozen)
    return store, metadata
