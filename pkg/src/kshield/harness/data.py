"""Datasets: CIFAR-10 binary batches, the KSDATA01 container, and synthetic textures."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DATA_MAGIC = b"KSDATA01"
CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE


@dataclass
class Dataset:
    """``images`` is ``N×H×W×C`` float32 in [0, 1]; ``labels`` is int64."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N×H×W×C, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        if self.split != "distractor" and len(self.labels) and self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must be < {self.num_classes} for split {self.split!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, index, split=None) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.num_classes, split or self.split)

    def concat(self, other: "Dataset", split=None) -> "Dataset":
        return Dataset(np.concatenate([self.images, other.images]),
                       np.concatenate([self.labels, other.labels]),
                       max(self.num_classes, other.num_classes), split or self.split)


def _empty(h, w, c, num_classes, split):
    return Dataset(np.zeros((0, h, w, c), np.float32), np.zeros(0, np.int64), num_classes, split)


def load_cifar10(path, split="train") -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % CIFAR_RECORD:
        whole = len(blob) // CIFAR_RECORD
        raise ValueError(f"malformed CIFAR-10 file {path}: record {whole} truncated at byte offset "
                         f"{whole * CIFAR_RECORD} ({len(blob)} bytes is not a multiple of {CIFAR_RECORD})")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"CIFAR-10 label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    pixels = raw[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return Dataset(pixels.astype(np.float32) / 255.0, labels, 10, split)


def save_container(dataset: Dataset, path):
    n, h, w, c = dataset.images.shape if len(dataset) else (0, *dataset.images.shape[1:])
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<QIIIB", n, dataset.num_classes, h, w, c))
        for label, img in zip(dataset.labels, dataset.images):
            fh.write(struct.pack("<I", int(label)))
            fh.write(img.astype("<f4").tobytes())


def load_container(path, split="train") -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    header = struct.calcsize("<QIIIB")
    if blob[:8] != DATA_MAGIC:
        raise ValueError(f"{path} is not a dataset container (bad magic)")
    if len(blob) < 8 + header:
        raise ValueError(f"{path}: header truncated at byte offset {len(blob)}")
    n, classes, h, w, c = struct.unpack_from("<QIIIB", blob, 8)
    record = 4 + 4 * h * w * c
    body = len(blob) - 8 - header
    if body != n * record:
        whole = min(n, body // record) if record else 0
        raise ValueError(f"{path}: malformed record {whole} at byte offset {8 + header + whole * record} "
                         f"(expected {n} records of {record} bytes)")
    if n == 0:
        return _empty(h, w, c, classes, split)
    rec = np.frombuffer(blob, dtype=np.uint8, offset=8 + header).reshape(n, record)
    labels = rec[:, :4].copy().view("<u4").reshape(n).astype(np.int64)
    images = rec[:, 4:].copy().view("<f4").reshape(n, h, w, c).astype(np.float32)
    if split != "distractor" and labels.size and labels.max() >= classes:
        split = "distractor"
    return Dataset(images, labels, classes, split)


def load_dataset(path, format="kshield-container", split="train") -> Dataset:
    if format == "cifar10-binary":
        return load_cifar10(path, split)
    if format == "kshield-container":
        return load_container(path, split)
    raise ValueError(f"unknown dataset format {format!r}")


def _grating(rng, n, h, w, theta, freq, contrast, noise, tint):
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
    amp = rng.uniform(*contrast, size=(n, 1, 1))
    base = rng.uniform(0.35, 0.65, size=(n, 1, 1, 1))
    wave = np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))[None] + phase) * amp
    img = base + wave[..., None] * tint[None, None, None, :]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _rings(rng, n, h, w, freq, contrast, noise, tint):
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    cy = rng.uniform(0.2, 0.8, size=(n, 1, 1))
    cx = rng.uniform(0.2, 0.8, size=(n, 1, 1))
    r = np.sqrt((yy[None] - cy) ** 2 + (xx[None] - cx) ** 2)
    amp = rng.uniform(*contrast, size=(n, 1, 1))
    base = rng.uniform(0.35, 0.65, size=(n, 1, 1, 1))
    img = base + (np.cos(2 * np.pi * freq * r) * amp)[..., None] * tint[None, None, None, :]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(classes=10, per_class=100, height=16, width=16, seed=0, channels=3,
                       split="train", noise=0.05, contrast=(0.04, 0.1)) -> Dataset:
    """Oriented colour gratings, one orientation/frequency/tint per class.

    Class ``c`` uses orientation ``pi * c / classes`` so neighbouring classes
    differ by a small angle; random phase, contrast, brightness and pixel
    noise make every image distinct. Deterministic given ``seed``.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class == 0:
        return _empty(height, width, channels, classes, split)
    rng = np.random.default_rng([seed, 0])
    style = np.random.default_rng([12345, classes, channels])
    tints = style.uniform(0.4, 1.0, size=(classes, channels)) * style.choice([-1.0, 1.0], size=(classes, channels))
    freqs = 2.0 + (np.arange(classes) % 3)
    images, labels = [], []
    for c in range(classes):
        theta = np.pi * c / classes
        images.append(_grating(rng, per_class, height, width, theta, freqs[c], contrast, noise, tints[c]))
        labels.append(np.full(per_class, c))
    images = np.concatenate(images).astype(np.float32)
    labels = np.concatenate(labels)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], classes, split)


def generate_distractors(count, num_classes, height=16, width=16, seed=0, channels=3, families=5,
                         noise=0.05, contrast=(0.04, 0.1)) -> Dataset:
    """Concentric-ring textures labelled ``num_classes + family`` (out of task)."""
    rng = np.random.default_rng([seed, 7])
    style = np.random.default_rng([54321, families, channels])
    tints = style.uniform(0.4, 1.0, size=(families, channels)) * style.choice([-1.0, 1.0], size=(families, channels))
    if count == 0:
        return _empty(height, width, channels, num_classes, "distractor")
    fam = rng.integers(0, families, size=count)
    images = np.empty((count, height, width, channels), np.float32)
    for f in range(families):
        sel = np.flatnonzero(fam == f)
        if sel.size:
            images[sel] = _rings(rng, sel.size, height, width, 1.5 + f, contrast, noise, tints[f])
    return Dataset(images, num_classes + fam, num_classes, "distractor")
