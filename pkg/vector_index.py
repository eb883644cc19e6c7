"""
Exact flat vector index with on-disk persistence.

File layout (little-endian):

    header   magic b'CRAGIDX\\0' | version u16 | dim u32 | count u32 | meta_len u64 | crc32 u32
    vectors  count * dim float32
    metadata meta_len bytes of UTF-8 JSON

The CRC-32 covers the vector block followed by the metadata block.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from embeddings import EmbeddingVector

logger = logging.getLogger(__name__)

MAGIC = b'CRAGIDX\0'
FORMAT_VERSION = 1
HEADER = struct.Struct('<8sHIIQI')
UNIT_NORM_TOLERANCE = 1e-4


class IndexLoadError(Exception):
    pass


class IndexFormatError(IndexLoadError):
    pass


class IndexVersionError(IndexLoadError):
    pass


class IndexTruncatedError(IndexLoadError):
    pass


class IndexChecksumError(IndexLoadError):
    pass


@dataclass
class SearchHit:
    chunk_id: str
    score: float
    rank: int
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def text(self) -> str:
        return self.metadata.get('text', '')

    @property
    def origin(self) -> str:
        return self.metadata.get('origin', '')


class VectorIndex:
    """Insertion-ordered store of (chunk_id, unit vector, metadata) with exact top-k search"""

    def __init__(self, dim: int, info: Optional[Dict[str, Any]] = None):
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        self.dim = dim
        self.info: Dict[str, Any] = dict(info or {})
        self._ids: List[str] = []
        self._positions: Dict[str, int] = {}
        self._metadata: List[Dict[str, Any]] = []
        self._rows: List[np.ndarray] = []
        self._matrix: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> List[str]:
        return list(self._ids)

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None or self._matrix.shape[0] != len(self._rows):
            if self._rows:
                self._matrix = np.vstack(self._rows).astype(np.float32, copy=False)
            else:
                self._matrix = np.zeros((0, self.dim), dtype=np.float32)
        return self._matrix

    def _check_vector(self, v: EmbeddingVector) -> np.ndarray:
        vector = np.asarray(v, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise ValueError(f"expected a vector of dim {self.dim}, got shape {vector.shape}")
        return vector

    def add(self, chunk_id: str, v: EmbeddingVector, metadata: Optional[Dict[str, Any]] = None) -> 'VectorIndex':
        if chunk_id in self._positions:
            raise ValueError(f"duplicate chunk_id {chunk_id!r}")
        vector = self._check_vector(v)
        if not np.all(np.isfinite(vector)):
            raise ValueError(f"vector for {chunk_id!r} has non-finite entries")
        norm = float(np.linalg.norm(vector.astype(np.float64)))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise ValueError(f"vector for {chunk_id!r} is not unit-normalized (norm={norm:.6f})")
        self._positions[chunk_id] = len(self._ids)
        self._ids.append(chunk_id)
        self._rows.append(vector.copy())
        self._metadata.append(dict(metadata or {}))
        return self

    def get(self, chunk_id: str) -> tuple:
        """(vector, metadata) for a stored chunk"""
        position = self._positions[chunk_id]
        return self._rows[position], self._metadata[position]

    def search_top_k(self, query: EmbeddingVector, k: int) -> List[SearchHit]:
        """Exact cosine top-k; ties keep insertion order"""
        if k < 1:
            raise ValueError(f"k must be at least 1, got {k}")
        q = self._check_vector(query).astype(np.float64)
        if not self._ids:
            return []
        scores = self.matrix.astype(np.float64) @ q
        order = np.argsort(-scores, kind='stable')[:k]
        return [
            SearchHit(
                chunk_id=self._ids[position],
                score=float(scores[position]),
                rank=rank,
                metadata=dict(self._metadata[position]),
            )
            for rank, position in enumerate(order)
        ]

    def entries(self):
        for position, chunk_id in enumerate(self._ids):
            yield chunk_id, self._rows[position], self._metadata[position]


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Write the index atomically (temp file + rename)"""
    path = Path(path)
    vectors = index.matrix.astype('<f4', copy=False).tobytes()
    meta = json.dumps({
        'info': index.info,
        'entries': [{'chunk_id': cid, 'metadata': md} for cid, _, md in index.entries()],
    }, ensure_ascii=False).encode('utf-8')
    crc = zlib.crc32(meta, zlib.crc32(vectors)) & 0xFFFFFFFF
    header = HEADER.pack(MAGIC, FORMAT_VERSION, index.dim, len(index), len(meta), crc)

    tmp_path = path.with_name(path.name + '.tmp')
    with open(tmp_path, 'wb') as f:
        f.write(header)
        f.write(vectors)
        f.write(meta)
    os.replace(tmp_path, path)
    logger.info(f"💾 Saved index with {len(index)} entries to {path}")


def load_index(path: str | Path) -> VectorIndex:
    """Read an index written by save_index; no partial index is ever returned"""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise IndexTruncatedError(f"{path}: file shorter than the header ({len(data)} bytes)")
    magic, version, dim, count, meta_len, crc = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise IndexFormatError(f"{path}: not an index file")
    if version != FORMAT_VERSION:
        raise IndexVersionError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")

    vector_bytes = count * dim * 4
    expected = HEADER.size + vector_bytes + meta_len
    if len(data) < expected:
        raise IndexTruncatedError(f"{path}: expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise IndexFormatError(f"{path}: {len(data) - expected} unexpected trailing bytes")

    vector_block = data[HEADER.size:HEADER.size + vector_bytes]
    meta_block = data[HEADER.size + vector_bytes:expected]
    if zlib.crc32(meta_block, zlib.crc32(vector_block)) & 0xFFFFFFFF != crc:
        raise IndexChecksumError(f"{path}: checksum mismatch")

    try:
        meta = json.loads(meta_block.decode('utf-8'))
        entries = meta['entries']
    except (ValueError, KeyError, TypeError) as e:
        raise IndexFormatError(f"{path}: unreadable metadata block: {e}") from e
    if len(entries) != count:
        raise IndexFormatError(f"{path}: header says {count} entries, metadata has {len(entries)}")

    matrix = np.frombuffer(vector_block, dtype='<f4').reshape(count, dim).astype(np.float32)
    index = VectorIndex(dim, info=meta.get('info'))
    for row, entry in zip(matrix, entries):
        # rows were validated on the way in; bypass add() so floats are kept bit for bit
        chunk_id = entry['chunk_id']
        if chunk_id in index._positions:
            raise IndexFormatError(f"{path}: duplicate chunk_id {chunk_id!r}")
        index._positions[chunk_id] = len(index._ids)
        index._ids.append(chunk_id)
        index._rows.append(row.copy())
        index._metadata.append(entry.get('metadata', {}))
    logger.info(f"📂 Loaded index with {count} entries (dim {dim}) from {path}")
    return index
