"""Flat binary checkpoint container.

Layout (all integers little-endian):

    magic   b"DCVK1"
    u32     entry count
    entry*  u32 name length | name UTF-8 | u32 rank | rank * u32 extents
            | float32 payload (prod(extents) values)

Every entry is a float32 array. Integer run state (RNG seed/counter,
iteration counters) rides along as vectors of 16-bit limbs stored in
float32, least-significant limb first -- each limb is <= 65535 so the
float32 round trip is exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DCVK1"


class CheckpointError(ValueError):
    pass


def encode_u64(value: int) -> np.ndarray:
    """Unsigned 64-bit integer as four 16-bit limbs in a float32 vector."""
    v = int(value) & 0xFFFFFFFFFFFFFFFF
    limbs = [(v >> (16 * i)) & 0xFFFF for i in range(4)]
    return np.asarray(limbs, dtype=np.float32)


def decode_u64(arr: np.ndarray) -> int:
    a = np.asarray(arr).reshape(-1)
    if a.size != 4:
        raise CheckpointError(f"u64 limb vector must have 4 entries, got {a.size}")
    limbs = [int(round(float(x))) for x in a]
    if any(l < 0 or l > 0xFFFF for l in limbs):
        raise CheckpointError(f"limb out of range in {limbs}")
    return sum(l << (16 * i) for i, l in enumerate(limbs))


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        # asarray (not ascontiguousarray) so rank-0 entries keep their rank;
        # tobytes(order="C") linearizes non-contiguous inputs itself
        a = np.asarray(arr, dtype=np.float32)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
        parts.append(a.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = 1
        for s in shape:
            n *= s
        payload = take(4 * n)
        entries[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return entries
