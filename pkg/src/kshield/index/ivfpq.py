"""Inverted-file index with product-quantized residuals (IVF-PQ)."""
from __future__ import annotations

import struct

import numpy as np

from .flat import HEADER, INDEX_MAGIC, IVFPQ, NeighborSet, _check_ids, select_k

KMEANS_ITERS = 25


def _assign(x, centers):
    """Nearest centre per row; ||x||^2 is dropped since it does not change the argmin."""
    d = x @ centers.T.astype(x.dtype)
    d *= -2
    d += np.einsum("ij,ij->i", centers, centers).astype(x.dtype)
    return np.argmin(d, axis=1)


def farthest_first(x, k, rng):
    """Seeded first centre, then repeatedly the point farthest from all chosen."""
    n = len(x)
    first = int(rng.integers(n))
    chosen = [first]
    d = x - x[first]
    best = np.einsum("ij,ij->i", d, d)
    for _ in range(1, k):
        nxt = int(np.argmax(best))
        chosen.append(nxt)
        d = x - x[nxt]
        np.minimum(best, np.einsum("ij,ij->i", d, d), out=best)
    return x[chosen].astype(np.float64)


def kmeans(x, k, seed=0, iters=KMEANS_ITERS):
    """Lloyd's algorithm for a fixed iteration count; returns (centres, assignment).

    Assignment runs in float32, centre updates in float64. An emptied cluster
    is reseeded with the point farthest from its centre.
    """
    x64 = np.asarray(x, dtype=np.float64)
    x32 = x64.astype(np.float32)
    if len(x64) < k:
        raise ValueError(f"k-means needs at least {k} samples, got {len(x64)}")
    rng = np.random.default_rng(seed)
    centers = farthest_first(x32, k, rng)
    for _ in range(iters):
        assign = _assign(x32, centers)
        counts = np.bincount(assign, minlength=k)
        sums = np.stack([np.bincount(assign, weights=x64[:, j], minlength=k)
                         for j in range(x64.shape[1])], axis=1)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            diff = x64 - centers[assign]
            resid = np.einsum("ij,ij->i", diff, diff)
            for c in np.flatnonzero(~nonempty):
                far = int(np.argmax(resid))
                centers[c] = x64[far]
                resid[far] = -1.0
    return centers, _assign(x32, centers)


class IVFPQIndex:
    kind = IVFPQ

    def __init__(self, centroids, codebooks):
        self.centroids = np.asarray(centroids, dtype=np.float32)
        self.codebooks = np.asarray(codebooks, dtype=np.float32)
        self.nlist, self.dim = self.centroids.shape
        self.m, ksub, self.dsub = self.codebooks.shape
        self.bits = int(round(np.log2(ksub)))
        if 2 ** self.bits != ksub or not 1 <= self.bits <= 8:
            raise ValueError(f"codebook size {ksub} is not 2^bits with bits in 1..8")
        if self.m * self.dsub != self.dim:
            raise ValueError(f"dim {self.dim} is not m ({self.m}) × subdim ({self.dsub})")
        self.list_ids = [np.zeros(0, np.uint64) for _ in range(self.nlist)]
        self.list_codes = [np.zeros((0, self.m), np.uint8) for _ in range(self.nlist)]

    def __len__(self):
        return sum(len(ids) for ids in self.list_ids)

    def _coarse(self, x):
        return _assign(x.astype(np.float64), self.centroids.astype(np.float64))

    def encode(self, residuals):
        r = residuals.reshape(len(residuals), self.m, self.dsub).astype(np.float64)
        codes = np.empty((len(residuals), self.m), np.uint8)
        for j in range(self.m):
            codes[:, j] = _assign(np.ascontiguousarray(r[:, j]), self.codebooks[j].astype(np.float64))
        return codes

    def decode(self, codes):
        parts = [self.codebooks[j][codes[:, j]] for j in range(self.m)]
        return np.concatenate(parts, axis=1)

    def add(self, vectors, ids):
        vectors = np.asarray(vectors, dtype=np.float32).reshape(-1, self.dim)
        ids = _check_ids(ids)
        if len(ids) != len(vectors):
            raise ValueError(f"{len(vectors)} vectors but {len(ids)} ids")
        existing = np.concatenate(self.list_ids + [ids])
        if len(np.unique(existing)) != len(existing):
            raise ValueError("duplicate ids in index build")
        if not len(ids):
            return self
        lists = self._coarse(vectors)
        codes = self.encode(vectors.astype(np.float64) - self.centroids[lists])
        for l in np.unique(lists):
            sel = lists == l
            self.list_ids[l] = np.concatenate([self.list_ids[l], ids[sel]])
            self.list_codes[l] = np.concatenate([self.list_codes[l], codes[sel]])
        return self

    def search(self, query, k: int, nprobe: int = 1) -> NeighborSet:
        if k < 1:
            raise ValueError("K must be >= 1")
        if not 1 <= nprobe <= self.nlist:
            raise ValueError(f"nprobe must lie in 1..{self.nlist}, got {nprobe}")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query dim {q.shape[-1]} does not match index dim {self.dim}")
        cd = ((self.centroids.astype(np.float64) - q) ** 2).sum(axis=1)
        probes = np.lexsort((np.arange(self.nlist), cd))[:nprobe]
        books = self.codebooks.astype(np.float64)
        ids, dists = [], []
        for l in probes:
            if not len(self.list_ids[l]):
                continue
            r = (q - self.centroids[l]).reshape(self.m, 1, self.dsub)
            table = ((books - r) ** 2).sum(axis=2)  # (m, 2^bits)
            codes = self.list_codes[l]
            dists.append(table[np.arange(self.m), codes].sum(axis=1))
            ids.append(self.list_ids[l])
        if not ids:
            return NeighborSet.empty()
        return select_k(np.concatenate(ids), np.concatenate(dists), k)

    def search_batch(self, queries, k: int, nprobe: int = 1) -> list:
        return [self.search(q, k, nprobe) for q in np.asarray(queries).reshape(-1, self.dim)]

    def to_bytes(self) -> bytes:
        parts = [HEADER.pack(INDEX_MAGIC, IVFPQ, self.dim, len(self)),
                 struct.pack("<IBB", self.nlist, self.m, self.bits),
                 self.centroids.astype("<f4").tobytes(), self.codebooks.astype("<f4").tobytes()]
        for ids, codes in zip(self.list_ids, self.list_codes):
            parts.append(struct.pack("<I", len(ids)))
            parts.append(ids.astype("<u8").tobytes())
            parts.append(codes.astype(np.uint8).tobytes())
        return b"".join(parts)

    @classmethod
    def _from_body(cls, blob, dim, count):
        pos = HEADER.size
        try:
            nlist, m, bits = struct.unpack_from("<IBB", blob, pos)
        except struct.error:
            raise ValueError("IVF-PQ index truncated in header") from None
        pos += 6
        if m == 0 or dim % m or not 1 <= bits <= 8:
            raise ValueError(f"invalid IVF-PQ parameters m={m} bits={bits} dim={dim}")
        ksub, dsub = 2 ** bits, dim // m
        ncent, nbook = nlist * dim, m * ksub * dsub
        if len(blob) < pos + 4 * (ncent + nbook):
            raise ValueError("IVF-PQ index truncated in centroids/codebooks")
        centroids = np.frombuffer(blob, "<f4", ncent, pos).reshape(nlist, dim)
        pos += 4 * ncent
        books = np.frombuffer(blob, "<f4", nbook, pos).reshape(m, ksub, dsub)
        pos += 4 * nbook
        index = cls(centroids, books)
        total = 0
        for l in range(nlist):
            if len(blob) < pos + 4:
                raise ValueError(f"IVF-PQ index truncated at list {l}")
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if len(blob) < pos + n * (8 + m):
                raise ValueError(f"IVF-PQ index truncated inside list {l}")
            index.list_ids[l] = np.frombuffer(blob, "<u8", n, pos).astype(np.uint64)
            pos += 8 * n
            index.list_codes[l] = np.frombuffer(blob, np.uint8, n * m, pos).reshape(n, m).copy()
            pos += n * m
            total += n
        if pos != len(blob) or total != count:
            raise ValueError("IVF-PQ index has trailing bytes or inconsistent count")
        return index


def ivfpq_train(samples, nlist: int, m: int, bits: int, seed: int = 0) -> IVFPQIndex:
    """Coarse k-means, then per-subspace k-means codebooks on the residuals."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("training samples must be N×d")
    n, dim = x.shape
    if m < 1 or dim % m:
        raise ValueError(f"dim {dim} is not divisible by m={m}")
    if not 1 <= bits <= 8:
        raise ValueError("bits must lie in 1..8")
    if n < max(nlist, 2 ** bits):
        raise ValueError(f"need at least {max(nlist, 2 ** bits)} training samples, got {n}")
    centroids, assign = kmeans(x, nlist, seed=[seed, 0])
    resid = x - centroids[assign]
    dsub = dim // m
    books = np.empty((m, 2 ** bits, dsub))
    for j in range(m):
        books[j], _ = kmeans(resid[:, j * dsub:(j + 1) * dsub], 2 ** bits, seed=[seed, 1 + j])
    return IVFPQIndex(centroids, books)


def ivfpq_search(index: IVFPQIndex, query, k: int, nprobe: int) -> NeighborSet:
    return index.search(query, k, nprobe)
