"""Exact cosine top-k vector store.

Rows are unit-norm f32 embeddings, so cosine is a plain dot product and
search is an exact matrix-vector product — no approximation anywhere.
Serialized as "BSRI": magic, version u32, d u32, n u32, ids block
(length-prefixed UTF-8), f32 row-major payload, trailing CRC32 (all
little-endian). The CRC is verified before parsing. The index is immutable
after build; concurrent queries are safe.
"""

from __future__ import annotations

import os
import struct
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .checkpoint import ChecksumError, FormatError

MAGIC = b"BSRI"
FORMAT_VERSION = 1
_NORM_TOL = 1e-6
_QUERY_NORM_TOL = 1e-3


class VectorIndex:
    """Ordered doc ids plus their unit-norm embedding matrix (n, d) as f32."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        ids = list(ids)
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2:
            raise ValueError("matrix must be 2-D")
        if len(ids) != matrix.shape[0]:
            raise ValueError("row count must equal id count")
        if len(ids) == 0:
            raise ValueError("index must hold at least one doc")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate doc ids")
        norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
        if not np.all(np.abs(norms - 1.0) <= _NORM_TOL):
            worst = float(np.abs(norms - 1.0).max())
            raise ValueError(f"rows must be unit-norm within {_NORM_TOL}, worst deviation {worst}")
        self.ids = ids
        self.matrix = matrix
        self._row_of = {doc_id: i for i, doc_id in enumerate(ids)}

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._row_of

    def scores(self, query: np.ndarray) -> np.ndarray:
        """Cosine of the query against every row, in row order (float64)."""
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.d,):
            raise ValueError(f"query must have shape ({self.d},), got {q.shape}")
        if abs(np.linalg.norm(q) - 1.0) > _QUERY_NORM_TOL:
            raise ValueError("query embedding must be unit-norm")
        return self.matrix.astype(np.float64) @ q

    def score_of(self, query: np.ndarray, doc_id: str) -> float:
        if doc_id not in self._row_of:
            raise KeyError(f"doc id {doc_id!r} not in index")
        return float(self.scores(query)[self._row_of[doc_id]])


def build(docs: Iterable[tuple[str, object]], embed: Callable[[object], np.ndarray]) -> VectorIndex:
    """Embed every (doc_id, payload) in input order. Duplicate ids are an error."""
    ids: list[str] = []
    rows: list[np.ndarray] = []
    for doc_id, payload in docs:
        vec = np.asarray(embed(payload), dtype=np.float64)
        if vec.ndim != 1:
            raise ValueError("embed must return a 1-D vector")
        ids.append(str(doc_id))
        rows.append(vec)
    if not ids:
        raise ValueError("index must hold at least one doc")
    return VectorIndex(ids, np.stack(rows).astype(np.float32))


def top_k(index: VectorIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """k best (doc_id, score), descending score, ties by ascending doc id.

    Exact: equivalent to a full sort of all scores. k larger than the corpus
    returns the whole corpus sorted.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    s = index.scores(query)
    order = sorted(range(len(index)), key=lambda i: (-s[i], index.ids[i]))
    return [(index.ids[i], float(s[i])) for i in order[:k]]


def save(index: VectorIndex, path: str) -> None:
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<I", index.d)
    body += struct.pack("<I", len(index))
    for doc_id in index.ids:
        raw = doc_id.encode("utf-8")
        body += struct.pack("<H", len(raw))
        body += raw
    body += np.ascontiguousarray(index.matrix, dtype="<f4").tobytes()
    blob = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path: str) -> VectorIndex:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise FormatError("file too short to be an index")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"checksum mismatch in {path}")
    if body[:4] != MAGIC:
        raise FormatError(f"bad magic {body[:4]!r}")
    version, d, n = struct.unpack_from("<III", body, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = 16
    ids = []
    for _ in range(n):
        (length,) = struct.unpack_from("<H", body, pos)
        pos += 2
        ids.append(body[pos : pos + length].decode("utf-8"))
        pos += length
    matrix = np.frombuffer(body, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    return VectorIndex(ids, matrix.copy())
