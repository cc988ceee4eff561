"""Binary checkpoint container.

Layout (all little-endian)::

    b"SWDP"  u32 version  u32 record_count
    record*: u32 name_len  name(utf-8)  u8 dtype_tag  u32 rank  u64 extents[rank]  payload
    u32 crc32 of every preceding byte

Parameters, optimizer moments and counters are ordinary tensor records;
the RNG state and config snapshot are UTF-8 JSON stored as ``u8`` records.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"SWDP"
VERSION = 1

_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(RuntimeError):
    """Corrupted, truncated or incompatible checkpoint."""


def _normalize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        return a.astype("<f4" if a.dtype.itemsize == 4 else "<f8", copy=False)
    if a.dtype.kind in "iu" and a.dtype != np.uint8:
        return a.astype("<i8", copy=False)
    if a.dtype == np.uint8:
        return a
    raise CheckpointError(f"unsupported dtype {a.dtype}")


def encode(records: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = _normalize(arr)
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes, origin: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{origin}: not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if actual != crc:
        raise CheckpointError(f"{origin}: CRC mismatch (stored {crc:08x}, computed {actual:08x}); file is corrupted")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{origin}: unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BI", body, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            dtype = _DTYPES[tag]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(body):
                raise CheckpointError(f"{origin}: record {name!r} overruns the file")
            out[name] = np.frombuffer(body, dtype, int(np.prod(shape, dtype=np.int64)), pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{origin}: malformed record table ({exc})") from exc
    if pos != len(body):
        raise CheckpointError(f"{origin}: {len(body) - pos} trailing bytes after the record table")
    return out


def json_record(obj: Any) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), np.uint8).copy()


def read_json_record(arr: np.ndarray) -> Any:
    return json.loads(bytes(arr).decode("utf-8"))


def save(path: os.PathLike, records: Mapping[str, np.ndarray]) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(records))
    os.replace(tmp, path)


def load(path: os.PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return decode(blob, str(path))
