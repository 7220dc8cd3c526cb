"""Embedding store and exact top-k retrieval.

Similarity is the dot product over unit-norm vectors (cosine). Search is
exact brute force; pools here are at most a few thousand rows. Ties are
broken by ascending insertion index so rankings form a total order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import EmbeddingVector, ValidationError

STORE_MAGIC = b"IDMRSTO1"
STORE_VERSION = 1


class StoreFormatError(ValueError):
    """Raised for bad magic, version, or truncated store files."""


@dataclass
class EmbeddingStore:
    """Row-major float32 matrix of unit-norm rows with a parallel id table."""

    matrix: np.ndarray
    ids: list

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1]) if self.matrix.size else int(self.matrix.shape[1])

    @property
    def count(self) -> int:
        return int(self.matrix.shape[0])


def _as_row(emb) -> np.ndarray:
    if isinstance(emb, EmbeddingVector):
        return np.asarray(emb.values, dtype=np.float64)
    return np.asarray(emb, dtype=np.float64)


def build_index(embeddings, ids) -> EmbeddingStore:
    """Build a store preserving input order; ids must be unique."""
    ids = [str(i) for i in ids]
    if len(embeddings) != len(ids):
        raise ValidationError("embeddings and ids must have equal length")
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate id in store")
    rows = [_as_row(e) for e in embeddings]
    dims = {r.shape[0] for r in rows}
    if len(dims) > 1:
        raise ValidationError(f"mixed embedding dims {sorted(dims)}")
    dim = dims.pop() if dims else 0
    matrix = np.zeros((len(rows), dim), dtype=np.float32)
    for k, r in enumerate(rows):
        matrix[k] = r.astype(np.float32)
        norm = float(np.linalg.norm(matrix[k]))
        if abs(norm - 1.0) > 1e-4:
            raise ValidationError(f"row {k} is not unit-norm ({norm})")
    return EmbeddingStore(matrix, ids)


def search_topk(store: EmbeddingStore, query, k: int):
    """Exact top-k by dot product; ties broken by ascending insertion index."""
    if store.count == 0:
        raise ValidationError("search on empty store")
    if k < 1:
        raise ValidationError("k must be >= 1")
    q = _as_row(query).astype(np.float32)
    if q.shape[0] != store.dim:
        raise ValidationError("query dim mismatch")
    scores = store.matrix @ q
    order = np.argsort(-scores, kind="stable")[:min(k, store.count)]
    return [(store.ids[i], float(scores[i])) for i in order]


def retrieve(store: EmbeddingStore, query) -> str:
    """Argmax retrieval: the id of the best-scoring candidate."""
    return search_topk(store, query, 1)[0][0]


def save_store(store: EmbeddingStore, path) -> None:
    """magic, u32 version, u32 dim, u64 count, float32 rows, id table."""
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<IIQ", STORE_VERSION, store.dim, store.count))
        fh.write(np.ascontiguousarray(store.matrix, dtype="<f4").tobytes())
        for ident in store.ids:
            raw = ident.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def load_store(path) -> EmbeddingStore:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != STORE_MAGIC:
        raise StoreFormatError("bad store magic")
    if len(data) < 8 + 16:
        raise StoreFormatError("truncated store header")
    version, dim, count = struct.unpack_from("<IIQ", data, 8)
    if version != STORE_VERSION:
        raise StoreFormatError(f"unsupported store version {version}")
    offset = 8 + 16
    nbytes = count * dim * 4
    if offset + nbytes > len(data):
        raise StoreFormatError("truncated embedding rows")
    matrix = np.frombuffer(data[offset:offset + nbytes], dtype="<f4")
    matrix = matrix.reshape(count, dim).copy()
    offset += nbytes
    ids = []
    for _ in range(count):
        if offset + 4 > len(data):
            raise StoreFormatError("truncated id table")
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + length > len(data):
            raise StoreFormatError("truncated id entry")
        ids.append(data[offset:offset + length].decode("utf-8"))
        offset += length
    if offset != len(data):
        raise StoreFormatError("trailing bytes in store file")
    return EmbeddingStore(matrix, ids)
