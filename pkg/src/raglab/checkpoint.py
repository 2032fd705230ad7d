""""BSRK" checkpoint container.

Layout, all integers little-endian:

    magic "BSRK" (4 bytes)
    format version  u32
    meta length     u32, then that many bytes of UTF-8 JSON (sorted keys)
    tensor count    u32
    per tensor: name length u16, name UTF-8, dtype code u8 (0 = f32),
                ndim u8, dims u32 each, payload offset u64
    payload: concatenated little-endian f32 tensor data
    crc32 of everything above, u32

The CRC is verified before any parsing, so a corrupted byte anywhere in the
file raises ChecksumError. save(load(path)) reproduces the file bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib

import numpy as np

MAGIC = b"BSRK"
FORMAT_VERSION = 1
_DTYPE_F32 = 0


class ChecksumError(ValueError):
    """File contents do not match the stored CRC32."""


class FormatError(ValueError):
    """File is not a readable checkpoint of a supported version."""


def _encode(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = bytearray()
    head += MAGIC
    head += struct.pack("<I", FORMAT_VERSION)
    head += struct.pack("<I", len(meta_bytes))
    head += meta_bytes
    head += struct.pack("<I", len(arrays))
    payload = bytearray()
    for name, arr in arrays.items():
        # ascontiguousarray would promote 0-d to 1-d; keep shapes exact
        data = np.asarray(arr, dtype="<f4")
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        name_b = name.encode("utf-8")
        head += struct.pack("<H", len(name_b))
        head += name_b
        head += struct.pack("<BB", _DTYPE_F32, data.ndim)
        for dim in data.shape:
            head += struct.pack("<I", dim)
        head += struct.pack("<Q", len(payload))
        payload += data.tobytes()
    body = bytes(head) + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write atomically (tmp file + rename). Arrays are cast to f32."""
    blob = _encode(arrays, meta)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays as f32, meta). CRC is checked before parsing."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError("file too short to be a checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"checksum mismatch in {path}")
    if body[:4] != MAGIC:
        raise FormatError(f"bad magic {body[:4]!r}")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    (meta_len,) = struct.unpack_from("<I", body, 8)
    pos = 12
    meta = json.loads(body[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_tensors,) = struct.unpack_from("<I", body, pos)
    pos += 4
    entries = []
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + name_len].decode("utf-8")
        pos += name_len
        dtype_code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        if dtype_code != _DTYPE_F32:
            raise FormatError(f"unknown dtype code {dtype_code}")
        shape = struct.unpack_from(f"<{ndim}I", body, pos) if ndim else ()
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        entries.append((name, shape, offset))
    payload = body[pos:]
    arrays: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.reshape(shape).copy()
    return arrays, meta


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def payload_sha256(path: str) -> str:
    """Digest over tensor names, shapes, and f32 payload bytes, ignoring meta.

    Two checkpoints holding identical parameters hash identically even if
    their metadata (e.g. recorded adapter role) differs.
    """
    arrays, _ = load_checkpoint(path)
    h = hashlib.sha256()
    for name, arr in arrays.items():
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
