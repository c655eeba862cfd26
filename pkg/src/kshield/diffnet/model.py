"""Small CNN classifier with per-block pre-ReLU feature taps.

Each block is ``conv3x3 -> (tap) -> relu -> avgpool2``; the stack ends with a
global average pool and one linear head. Images enter as ``N×H×W×C`` floats
in [0, 1], the layout the datasets and attacks use.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import DTYPE, Tensor, transpose

log = logging.getLogger(__name__)

CKPT_MAGIC = b"KSCKPT01"


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 10
    height: int = 16
    width: int = 16
    in_channels: int = 3
    channels: tuple = (16, 32, 64, 128)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2:
            raise ValueError("a model needs at least 2 blocks")
        if self.num_classes < 2:
            raise ValueError("a model needs at least 2 classes")
        if min(self.channels) < 1 or min(self.height, self.width, self.in_channels) < 1:
            raise ValueError(f"invalid model extents: {self}")
        h, w = self.height, self.width
        for b in range(self.blocks - 1):
            if h < 2 or w < 2:
                raise ValueError(f"input {self.height}x{self.width} too small for {self.blocks} blocks")
            h, w = h // 2, w // 2

    @property
    def blocks(self) -> int:
        return len(self.channels)

    def tap_shape(self, block: int) -> tuple:
        """(C', H', W') of the pre-ReLU activation of ``block`` (1-based)."""
        self.check_block(block)
        h, w = self.height, self.width
        for _ in range(block - 1):
            h, w = h // 2, w // 2
        return (self.channels[block - 1], h, w)

    def check_block(self, block: int):
        if not 1 <= block <= self.blocks:
            raise ValueError(f"layer id {block} outside 1..{self.blocks}")

    def param_shapes(self) -> dict:
        shapes = {}
        cin = self.in_channels
        for i, cout in enumerate(self.channels, start=1):
            shapes[f"block{i}.weight"] = (cout, cin, 3, 3)
            shapes[f"block{i}.bias"] = (cout,)
            cin = cout
        shapes["head.weight"] = (self.num_classes, cin)
        shapes["head.bias"] = (self.num_classes,)
        return shapes


@dataclass
class Checkpoint:
    """Immutable-by-convention bundle of architecture and trained weights."""

    config: ModelConfig
    params: dict
    seed: int = 0
    epochs: int = 0
    train_accuracy: float | None = field(default=None, compare=False)

    def __post_init__(self):
        expected = self.config.param_shapes()
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"checkpoint parameters mismatch: missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            arr = np.ascontiguousarray(self.params[name], dtype=DTYPE)
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            self.params[name] = arr

    def network(self) -> "Network":
        return Network(self)

    def to_bytes(self) -> bytes:
        cfg = self.config
        head = [cfg.blocks, *cfg.channels, cfg.num_classes, cfg.height, cfg.width, cfg.in_channels,
                self.seed, self.epochs]
        parts = [CKPT_MAGIC, struct.pack(f"<{len(head)}I", *head)]
        for name, shape in cfg.param_shapes().items():
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
            parts.append(self.params[name].astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        try:
            pos = 8
            (nblocks,) = struct.unpack_from("<I", blob, pos)
            if not 2 <= nblocks <= 64:
                raise ValueError(f"implausible block count {nblocks}")
            vals = struct.unpack_from(f"<{nblocks + 6}I", blob, pos + 4)
            pos += 4 * (nblocks + 7)
            channels = vals[:nblocks]
            classes, h, w, cin, seed, epochs = vals[nblocks:]
            config = ModelConfig(num_classes=classes, height=h, width=w, in_channels=cin, channels=channels)
            params = {}
            while pos < len(blob):
                (nlen,) = struct.unpack_from("<H", blob, pos)
                pos += 2
                name = blob[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<B", blob, pos)
                shape = struct.unpack_from(f"<{rank}I", blob, pos + 1)
                pos += 1 + 4 * rank
                count = int(np.prod(shape))
                if pos + 4 * count > len(blob):
                    raise ValueError(f"parameter {name} truncated")
                if name in params:
                    raise ValueError(f"parameter {name} appears twice")
                params[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
                pos += 4 * count
        except struct.error as exc:
            raise ValueError(f"truncated checkpoint: {exc}") from None
        return cls(config, params, seed=seed, epochs=epochs)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def init_params(config: ModelConfig, seed: int) -> dict:
    """Fan-in scaled uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return params


class Network:
    """Forward passes over a checkpoint's parameters.

    Parameters are wrapped as graph leaves only when ``train=True`` so attacks
    (which need the input gradient alone) skip weight-gradient work.
    """

    def __init__(self, checkpoint: Checkpoint):
        self.checkpoint = checkpoint
        self.config = checkpoint.config

    def _leaves(self, params, train):
        if train:
            return params
        return {k: Tensor(v) for k, v in self.checkpoint.params.items()}

    def _stem(self, images):
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=DTYPE))
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        cfg = self.config
        if x.shape[1:] != (cfg.height, cfg.width, cfg.in_channels):
            raise ValueError(f"image shape {x.shape[1:]} does not match model input "
                             f"{(cfg.height, cfg.width, cfg.in_channels)}")
        return transpose(x - 0.5, (0, 3, 1, 2))

    def forward(self, images, params=None, upto=None):
        """Logits for an ``N×H×W×C`` batch, or the pre-ReLU tap of block ``upto``."""
        p = self._leaves(params, params is not None)
        x = self._stem(images)
        for b in range(1, self.config.blocks + 1):
            x = ops.conv2d(x, p[f"block{b}.weight"], p[f"block{b}.bias"], stride=1, pad=1)
            if upto == b:
                return x
            x = ops.relu(x)
            if b < self.config.blocks:
                x = ops.avg_pool2d(x, 2)
        x = ops.global_avg_pool(x)
        return ops.linear(x, p["head.weight"], p["head.bias"])

    __call__ = forward

    def tap(self, images, block: int):
        self.config.check_block(block)
        return self.forward(images, upto=block)

    def logits(self, images, batch_size=256) -> np.ndarray:
        images = np.asarray(images, dtype=DTYPE)
        out = [self.forward(images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes), DTYPE)

    def predict_proba(self, images, batch_size=256) -> np.ndarray:
        return ops.softmax(self.logits(images, batch_size)).astype(DTYPE)

    def predict(self, images, batch_size=256) -> np.ndarray:
        return np.argmax(self.logits(images, batch_size), axis=1)


def feature_tap(checkpoint: Checkpoint, images, layer: int) -> np.ndarray:
    """Pre-ReLU activation map(s) of ``layer``; ``C'×H'×W'`` for a single image."""
    single = np.ndim(images) == 3
    out = Network(checkpoint).tap(images, layer).data
    return out[0] if single else out


def accuracy(checkpoint: Checkpoint, images, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(Network(checkpoint).predict(images) == np.asarray(labels)))


def train(images, labels, config: ModelConfig, epochs=20, lr=0.02, momentum=0.9,
          batch_size=32, seed=0) -> Checkpoint:
    """Minibatch SGD with momentum on the mean cross-entropy.

    Deterministic for a fixed seed when BLAS runs single-threaded.
    """
    images = np.asarray(images, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise ValueError(f"labels must lie in [0, {config.num_classes})")

    params = init_params(config, seed)
    rng = np.random.default_rng([seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    net = Network(Checkpoint(config, dict(params), seed=seed))
    lr = np.float32(lr)
    momentum = np.float32(momentum)

    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            logits = net.forward(images[idx], params=leaves)
            loss, probs = ops.cross_entropy(logits, labels[idx], reduction="mean")
            loss.backward()
            for k, leaf in leaves.items():
                velocity[k] = momentum * velocity[k] + leaf.grad
                params[k] = params[k] - lr * velocity[k]
            total += loss.data.item() * len(idx)
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
        log.info("epoch %d: loss %.4f, running acc %.3f", epoch + 1, total / len(order), correct / len(order))

    ckpt = Checkpoint(config, params, seed=seed, epochs=epochs)
    ckpt.train_accuracy = accuracy(ckpt, images, labels)
    log.info("final train accuracy %.4f", ckpt.train_accuracy)
    return ckpt
