"""Binary sequence cache ("LSR1").

Layout, all little-endian: magic "LSR1", u32 vocab size, u32 behavior-type
count, u64 user count, then per user: u64 user-id hash, u32 length,
length x (u32 item, u8 type, i64 timestamp). Bit-exact across platforms;
the windowing and training modules read this instead of raw text.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .hashing import string_seed
from .ingest import UserSequence

MAGIC = b"LSR1"

_EVENT_DTYPE = np.dtype([("item", "<u4"), ("type", "u1"), ("ts", "<i8")])
assert _EVENT_DTYPE.itemsize == 13


class CacheFormatError(ValueError):
    pass


def write_cache(path: str | Path, sequences: list[UserSequence], vocab_size: int,
                n_types: int) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", vocab_size, n_types, len(sequences)))
        for seq in sequences:
            rec = np.empty(len(seq), dtype=_EVENT_DTYPE)
            rec["item"] = seq.items
            rec["type"] = seq.types
            rec["ts"] = seq.timestamps
            fh.write(struct.pack("<QI", string_seed(seq.user_id), len(seq)))
            fh.write(rec.tobytes())


def read_cache(path: str | Path) -> tuple[list[UserSequence], int, int]:
    """Returns (sequences, vocab_size, n_types). User ids come back as the
    16-hex-digit form of the stored hash."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CacheFormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    vocab_size, n_types, n_users = struct.unpack_from("<IIQ", data, 4)
    off = 4 + 16
    out = []
    for _ in range(n_users):
        if off + 12 > len(data):
            raise CacheFormatError(f"{path}: truncated user header")
        uhash, length = struct.unpack_from("<QI", data, off)
        off += 12
        nbytes = length * _EVENT_DTYPE.itemsize
        if off + nbytes > len(data):
            raise CacheFormatError(f"{path}: truncated event block")
        rec = np.frombuffer(data, dtype=_EVENT_DTYPE, count=length, offset=off)
        off += nbytes
        out.append(
            UserSequence(
                user_id=f"{uhash:016x}",
                items=rec["item"].astype(np.int32),
                types=rec["type"].copy(),
                timestamps=rec["ts"].astype(np.int64),
            )
        )
    if off != len(data):
        raise CacheFormatError(f"{path}: {len(data) - off} trailing bytes")
    return out, vocab_size, n_types
