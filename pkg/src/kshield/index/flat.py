"""Exact nearest-neighbour search and the shared NeighborSet type."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

INDEX_MAGIC = b"KSIDX001"
FLAT, IVFPQ = 0, 1
HEADER = struct.Struct("<8sBIQ")


@dataclass(frozen=True)
class NeighborSet:
    """Neighbours ordered by (squared L2 distance, id)."""

    ids: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids.tolist(), self.distances.tolist()))

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.uint64), np.zeros(0, np.float64))


def select_k(ids: np.ndarray, dist: np.ndarray, k: int) -> NeighborSet:
    """The ``k`` smallest distances, ties broken by ascending id."""
    if len(ids) == 0:
        return NeighborSet.empty()
    k = min(k, len(ids))
    if k < len(ids):
        kth = np.partition(dist, k - 1)[k - 1]
        keep = np.flatnonzero(dist <= kth)
        ids, dist = ids[keep], dist[keep]
    order = np.lexsort((ids, dist))[:k]
    return NeighborSet(ids[order].astype(np.uint64), dist[order])


def _check_ids(ids):
    ids = np.array(ids, dtype=np.uint64).reshape(-1)
    if len(np.unique(ids)) != len(ids):
        raise ValueError("duplicate ids in index build")
    return ids


class FlatIndex:
    kind = FLAT

    def __init__(self, vectors, ids, dim=None):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim == 1 and vectors.size == 0:
            vectors = vectors.reshape(0, dim or 0)
        if vectors.ndim != 2:
            raise ValueError(f"vectors must be N×d, got shape {vectors.shape}")
        ids = _check_ids(ids)
        if len(ids) != len(vectors):
            raise ValueError(f"{len(vectors)} vectors but {len(ids)} ids")
        self.vectors = np.array(vectors, order="C")
        self.vectors.setflags(write=False)
        self.ids = ids
        self.ids.setflags(write=False)
        self.dim = vectors.shape[1] if dim is None else dim
        if vectors.shape[1] != self.dim:
            raise ValueError(f"vectors have dim {vectors.shape[1]}, expected {self.dim}")

    def __len__(self):
        return len(self.ids)

    def _check_query(self, query):
        q = np.asarray(query, dtype=np.float32)
        if q.shape[-1] != self.dim:
            raise ValueError(f"query dim {q.shape[-1]} does not match index dim {self.dim}")
        return q

    def search(self, query, k: int) -> NeighborSet:
        if k < 1:
            raise ValueError("K must be >= 1")
        q = self._check_query(query)
        if q.ndim != 1:
            raise ValueError("search takes a single query vector; use search_batch")
        diff = self.vectors.astype(np.float64) - q.astype(np.float64)
        return select_k(self.ids, np.einsum("ij,ij->i", diff, diff), k)

    def search_batch(self, queries, k: int) -> list:
        q = self._check_query(queries)
        return [self.search(row, k) for row in q.reshape(-1, self.dim)]

    def vector(self, id_) -> np.ndarray:
        pos = np.flatnonzero(self.ids == np.uint64(id_))
        if not pos.size:
            raise KeyError(id_)
        return self.vectors[pos[0]]

    def to_bytes(self) -> bytes:
        return b"".join([HEADER.pack(INDEX_MAGIC, FLAT, self.dim, len(self)),
                         self.ids.astype("<u8").tobytes(), self.vectors.astype("<f4").tobytes()])

    @classmethod
    def _from_body(cls, blob, dim, count):
        need = HEADER.size + count * (8 + 4 * dim)
        if len(blob) != need:
            raise ValueError(f"flat index file has {len(blob)} bytes, expected {need}")
        ids = np.frombuffer(blob, dtype="<u8", count=count, offset=HEADER.size).astype(np.uint64)
        vecs = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=HEADER.size + 8 * count)
        return cls(vecs.reshape(count, dim), ids, dim=dim)


def flat_build(vectors, ids, dim=None) -> FlatIndex:
    return FlatIndex(vectors, ids, dim)


def flat_search(index: FlatIndex, query, k: int) -> NeighborSet:
    return index.search(query, k)
