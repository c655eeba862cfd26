"""Differentiable layer ops registered on the autodiff graph (NCHW layout)."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an ``N×C×H×W`` input with ``O×C×kh×kw`` filters."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {wc}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {o} filters")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def avg_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Windowed mean over the last two axes; ``kernel`` may be an int or (kh, kw)."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else (kh, kw))
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ValueError(f"avg_pool2d kernel and stride must be positive, got {kernel}, {stride}")
    n, c, h, w = x.shape
    if h < kh or w < kw:
        raise ValueError(f"avg_pool2d kernel {kh}x{kw} exceeds spatial extent {h}x{w}")
    oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
    scale = np.asarray(1.0 / (kh * kw), dtype=x.dtype)

    if (sh, sw) == (kh, kw) and h % kh == 0 and w % kw == 0:
        out = x.data.reshape(n, c, oh, kh, ow, kw).mean(axis=(3, 5), dtype=x.dtype)

        def backward(g):
            gx = np.broadcast_to((g * scale)[:, :, :, None, :, None], (n, c, oh, kh, ow, kw))
            return (gx.reshape(n, c, h, w).astype(x.dtype),)
    else:
        win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        out = win.mean(axis=(4, 5), dtype=x.dtype)

        def backward(g):
            gx = np.zeros(x.shape, dtype=x.dtype)
            gs = g * scale
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gs
            return (gx,)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """``N×C×H×W`` -> ``N×C``."""
    n, c, h, w = x.shape
    scale = np.asarray(1.0 / (h * w), dtype=x.dtype)
    out = x.data.mean(axis=(2, 3), dtype=x.dtype)
    return Tensor.from_op(
        out, (x,),
        lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(x.dtype),),
        "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    squeeze = x.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    out = xd @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g[None, :] if squeeze else g
        gx = g2 @ weight.data
        gw = g2.T @ xd if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx[0] if squeeze else gx), gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out[0] if squeeze else out, parents, backward, "linear")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, labels, reduction: str = "sum"):
    """Multi-class logistic loss ``-log softmax(logits)[label]``.

    ``logits`` is ``C`` or ``N×C``; returns the reduced loss tensor and the
    softmax byproduct as a plain array. ``reduction`` is "sum", "mean" or
    "none".
    """
    squeeze = logits.ndim == 1
    z = logits.data[None, :] if squeeze else logits.data
    n, classes = z.shape
    if classes < 2:
        raise ValueError("cross_entropy needs at least 2 classes")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ValueError(f"label out of range for {classes} classes: {labels}")

    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    probs = np.exp(logp)
    rows = np.arange(n)
    per = -logp[rows, labels]

    if reduction == "none":
        out, weight = per, None
    elif reduction == "sum":
        out, weight = per.sum(), 1.0
    elif reduction == "mean":
        out, weight = per.mean(), 1.0 / n
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        d = probs.copy()
        # p_y - 1 as minus the other classes' mass; exact even when p_y rounds to 1
        d[rows, labels] = 0
        d[rows, labels] = -d.sum(axis=1)
        d *= (g[:, None] if weight is None else g * weight)
        return (d[0] if squeeze else d).astype(logits.dtype),

    loss = Tensor.from_op(np.asarray(out, dtype=logits.dtype), (logits,), backward, "cross_entropy")
    return loss, (probs[0] if squeeze else probs)
