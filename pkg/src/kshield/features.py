"""Descriptors: pre-ReLU tap -> spatial average pooling -> flatten -> PCA.

The pooling and projection are also exposed as graph ops so the feature-space
attack can differentiate a descriptor with respect to the input image.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .diffnet import Checkpoint, DTYPE, Network, Tensor, avg_pool2d, linear

PCA_MAGIC = b"KSPCA001"


@dataclass(frozen=True)
class PoolSpec:
    layer: int
    target: tuple  # (h_t, w_t)

    def kernel(self, source_hw):
        h, w = source_hw
        ht, wt = self.target
        if ht < 1 or wt < 1 or h % ht or w % wt:
            raise ValueError(f"pool target {ht}x{wt} does not divide source extent {h}x{w}")
        return h // ht, w // wt


def default_pool_spec(config, layer: int, max_cells: int = 8) -> PoolSpec:
    """The deepest tap pools globally; shallower taps keep a grid of at most ``max_cells`` per side.

    Each side keeps its largest divisor not above ``max_cells``.
    """
    _, h, w = config.tap_shape(layer)
    if layer == config.blocks:
        return PoolSpec(layer, (1, 1))

    def side(n):
        return max(d for d in range(1, min(n, max_cells) + 1) if n % d == 0)

    return PoolSpec(layer, (side(h), side(w)))


def spatial_pool(fmap: np.ndarray, spec: PoolSpec) -> np.ndarray:
    """Mean over each cell of a ``C'×H'×W'`` map (or a batch of them)."""
    single = fmap.ndim == 3
    batch = fmap[None] if single else fmap
    kh, kw = spec.kernel(batch.shape[2:])
    out = avg_pool2d(Tensor(batch), (kh, kw)).data
    return out[0] if single else out


@dataclass
class PCAModel:
    mean: np.ndarray          # (d_in,)
    components: np.ndarray    # (d_out, d_in), orthonormal rows
    variances: np.ndarray     # (d_out,), non-increasing

    def __post_init__(self):
        self.mean = np.ascontiguousarray(self.mean, dtype=DTYPE)
        self.components = np.ascontiguousarray(self.components, dtype=DTYPE)
        self.variances = np.ascontiguousarray(self.variances, dtype=DTYPE)
        if self.components.ndim != 2 or self.components.shape[1] != self.mean.shape[0]:
            raise ValueError(f"PCA component shape {self.components.shape} does not match mean {self.mean.shape}")
        if self.components.shape[0] > self.components.shape[1]:
            raise ValueError("PCA output dimension exceeds input dimension")
        if self.variances.shape != (self.components.shape[0],):
            raise ValueError("PCA needs one variance per component")

    @property
    def d_in(self) -> int:
        return self.components.shape[1]

    @property
    def d_out(self) -> int:
        return self.components.shape[0]

    def to_bytes(self) -> bytes:
        return b"".join([
            PCA_MAGIC, struct.pack("<II", self.d_in, self.d_out),
            self.mean.astype("<f4").tobytes(),
            self.components.astype("<f4").tobytes(),
            self.variances.astype("<f4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PCAModel":
        if blob[:8] != PCA_MAGIC:
            raise ValueError("not a PCA file (bad magic)")
        if len(blob) < 16:
            raise ValueError("PCA file truncated in header")
        d_in, d_out = struct.unpack_from("<II", blob, 8)
        need = 16 + 4 * (d_in + d_out * d_in + d_out)
        if len(blob) != need:
            raise ValueError(f"PCA file has {len(blob)} bytes, expected {need}")
        vals = np.frombuffer(blob, dtype="<f4", offset=16)
        mean = vals[:d_in]
        comps = vals[d_in:d_in + d_out * d_in].reshape(d_out, d_in)
        return cls(mean, comps, vals[d_in + d_out * d_in:])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PCAModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def pca_fit(samples, d_out: int) -> PCAModel:
    """Exact PCA via eigendecomposition of the (population) covariance.

    Components are sorted by descending variance and sign-fixed so that the
    first coefficient with magnitude above 1e-12 is positive.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"PCA samples must be a 2-d array, got shape {x.shape}")
    n, d_in = x.shape
    if d_out < 1:
        raise ValueError("PCA output dimension must be >= 1")
    if d_out > d_in:
        raise ValueError(f"PCA output dimension {d_out} exceeds input dimension {d_in}")
    if n < d_out:
        raise ValueError(f"PCA needs at least {d_out} samples, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:d_out]
    comps = evecs[:, order].T
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1
    return PCAModel(mean, comps, np.clip(evals[order], 0.0, None))


def pca_transform(model: PCAModel, v) -> np.ndarray:
    """``components · (v - mean)`` for one vector or a batch of rows."""
    v = np.asarray(v, dtype=DTYPE)
    if v.shape[-1] != model.d_in:
        raise ValueError(f"vector length {v.shape[-1]} does not match PCA input dimension {model.d_in}")
    # einsum keeps per-row arithmetic independent of batch size (bit-stable descriptors)
    return np.einsum("...i,ji->...j", v - model.mean, model.components).astype(DTYPE)


class FeaturePipeline:
    """Bundles a checkpoint, pooling spec and PCA model into ``g(x)``."""

    def __init__(self, checkpoint: Checkpoint, pool: PoolSpec, pca: PCAModel | None = None):
        checkpoint.config.check_block(pool.layer)
        c, h, w = checkpoint.config.tap_shape(pool.layer)
        pool.kernel((h, w))
        self.checkpoint = checkpoint
        self.network = Network(checkpoint)
        self.pool = pool
        self.pooled_dim = c * pool.target[0] * pool.target[1]
        if pca is not None and pca.d_in != self.pooled_dim:
            raise ValueError(f"PCA input dimension {pca.d_in} does not match pooled dimension {self.pooled_dim}")
        self.pca = pca

    @property
    def dim(self) -> int:
        return self.pca.d_out

    def pooled(self, images, batch_size=256) -> np.ndarray:
        images = np.asarray(images, dtype=DTYPE)
        out = []
        for i in range(0, len(images), batch_size):
            try:
                fmap = self.network.tap(images[i:i + batch_size], self.pool.layer).data
            except ValueError as exc:
                raise ValueError(f"feature tap: {exc}") from exc
            try:
                pooled = spatial_pool(fmap, self.pool)
            except ValueError as exc:
                raise ValueError(f"spatial pooling: {exc}") from exc
            out.append(pooled.reshape(len(pooled), -1))
        return np.concatenate(out) if out else np.zeros((0, self.pooled_dim), DTYPE)

    def fit(self, images, d_out: int, max_samples: int = 0) -> "FeaturePipeline":
        """Return a pipeline with PCA fitted on (the first ``max_samples`` of) ``images``."""
        if max_samples:
            images = images[:max_samples]
        try:
            pca = pca_fit(self.pooled(images), d_out)
        except ValueError as exc:
            raise ValueError(f"PCA fit: {exc}") from exc
        return FeaturePipeline(self.checkpoint, self.pool, pca)

    def descriptors(self, images, batch_size=256) -> np.ndarray:
        if self.pca is None:
            raise ValueError("pipeline has no fitted PCA")
        single = np.ndim(images) == 3
        if single:
            images = np.asarray(images)[None]
        out = pca_transform(self.pca, self.pooled(images, batch_size))
        return out[0] if single else out

    def graph(self, x: Tensor) -> Tensor:
        """Differentiable descriptors for an ``N×H×W×C`` tensor."""
        fmap = self.network.tap(x, self.pool.layer)
        kh, kw = self.pool.kernel(fmap.shape[2:])
        flat = avg_pool2d(fmap, (kh, kw)).reshape(fmap.shape[0], -1)
        comps = self.pca.components
        bias = -(comps.astype(np.float64) @ self.pca.mean.astype(np.float64)).astype(DTYPE)
        return linear(flat, Tensor(comps), Tensor(bias))


def extract_descriptor(checkpoint: Checkpoint, pca: PCAModel, pool: PoolSpec, image) -> np.ndarray:
    return FeaturePipeline(checkpoint, pool, pca).descriptors(image)
