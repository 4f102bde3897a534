"""Binary tensor container used for checkpoints and r_f dumps.

Layout (little-endian)::

    b"EFDR"  u32 version
    u32 meta_len  meta_len bytes of UTF-8 JSON
    u32 count
    count x [u16 name_len, name, u8 ndim, ndim x u32 dims, float32 data]
    32-byte SHA-256 of everything above
"""
import hashlib
import json
import struct

import numpy as np

MAGIC = b"EFDR"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class ChecksumFailure(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode()
        out += struct.pack("<HB", len(key), arr.ndim) + key
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def loads(blob: bytes) -> tuple[dict, dict]:
    if len(blob) < 8:
        raise TruncatedCheckpoint("file too short")
    if blob[:4] != MAGIC:
        raise VersionMismatch(f"bad magic {blob[:4]!r}")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")
    if len(blob) < 8 + 32:
        raise TruncatedCheckpoint("file too short")
    body, digest = blob[:-32], blob[-32:]
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedCheckpoint("unexpected end of checkpoint")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    try:
        meta_len = struct.unpack("<I", take(4))[0]
        meta = json.loads(take(meta_len))
        count = struct.unpack("<I", take(4))[0]
        tensors = {}
        for _ in range(count):
            name_len, ndim = struct.unpack("<HB", take(3))
            name = take(name_len).decode()
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            n = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ChecksumFailure(f"unreadable checkpoint: {exc}") from None
    if pos != len(body):
        raise ChecksumFailure("trailing bytes before checksum")
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumFailure("checksum mismatch")
    return tensors, meta


def save_tensors(path, tensors: dict, meta: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors, meta))


def load_tensors(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
