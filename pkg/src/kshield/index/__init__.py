"""Flat and IVF-PQ nearest-neighbour indices plus the prediction store."""
from .flat import FLAT, HEADER, INDEX_MAGIC, IVFPQ, FlatIndex, NeighborSet, flat_build, flat_search, select_k
from .ivfpq import IVFPQIndex, ivfpq_search, ivfpq_train, kmeans
from .store import NotFound, PredictionStore, hard_label


def index_from_bytes(blob: bytes):
    if len(blob) < HEADER.size:
        raise ValueError("index file truncated in header")
    magic, kind, dim, count = HEADER.unpack_from(blob)
    if magic != INDEX_MAGIC:
        raise ValueError("not an index file (bad magic or version)")
    if kind == FLAT:
        return FlatIndex._from_body(blob, dim, count)
    if kind == IVFPQ:
        return IVFPQIndex._from_body(blob, dim, count)
    raise ValueError(f"unknown index type byte {kind}")


def index_save(index, path):
    with open(path, "wb") as fh:
        fh.write(index.to_bytes())


def index_load(path):
    with open(path, "rb") as fh:
        return index_from_bytes(fh.read())


def search(index, query, k, nprobe=None):
    """Dispatch to the index's own search; ``nprobe`` defaults to all lists."""
    if isinstance(index, IVFPQIndex):
        return index.search(query, k, index.nlist if nprobe is None else nprobe)
    return index.search(query, k)


__all__ = [
    "FlatIndex", "IVFPQIndex", "NeighborSet", "NotFound", "PredictionStore",
    "flat_build", "flat_search", "hard_label", "index_from_bytes", "index_load", "index_save",
    "ivfpq_search", "ivfpq_train", "kmeans", "search", "select_k",
]
