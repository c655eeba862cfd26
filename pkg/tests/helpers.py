import numpy as np

from kshield.diffnet import Tensor


def central_diff(f, x, h=1e-3, with_kinks=False):
    """Central finite-difference gradient of scalar ``f`` at ``x``.

    ``x`` is promoted to float64 so the oracle's own rounding (about 1e-7 / h
    in float32) stays far below the tolerance being tested. With
    ``with_kinks`` also returns ``|f(x+h) - 2 f(x) + f(x-h)| / 2h`` per
    coordinate, which bounds the central-difference error on piecewise-linear
    stretches and flags steps that cross a ReLU kink.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros(x.shape, dtype=np.float64)
    curve = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    c = curve.reshape(-1)
    mid = np.asarray(f(x), dtype=np.float64).item()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = np.asarray(f(x), dtype=np.float64).item()
        flat[i] = orig - h
        down = np.asarray(f(x), dtype=np.float64).item()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
        c[i] = abs(up - 2 * mid + down) / (2 * h)
    return (grad, curve) if with_kinks else grad


def kink_safe_error(analytic, f, x, h=1e-3):
    """(relative error over smooth coordinates, fraction of coordinates kept)."""
    num, curve = central_diff(f, x, h, with_kinks=True)
    smooth = curve <= 1e-4 * max(np.abs(num).max(), 1e-12)
    a = np.asarray(analytic, dtype=np.float64)[smooth]
    return rel_error(a, num[smooth]), float(smooth.mean())


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def autodiff_grad(build, x):
    """Gradient of ``build(Tensor) -> scalar Tensor`` at ``x``."""
    xt = Tensor(np.array(x, dtype=np.float32), requires_grad=True)
    build(xt).backward()
    return xt.grad


def projected(build, x, seed=0):
    """Scalarize a tensor-valued op by a fixed random projection."""
    out = build(Tensor(np.array(x, dtype=np.float32)))
    r = np.random.default_rng(seed).standard_normal(out.shape).astype(np.float32)
    return lambda t: (build(t) * Tensor(r)).sum(), lambda arr: float(
        (build(Tensor(arr)).data.astype(np.float64) * r).sum())


def brute_force_knn(vectors, ids, query, k):
    """Python-loop oracle: ``[(id, squared distance)]`` sorted by distance, then id."""
    query = [float(v) for v in query]
    pairs = []
    for v, i in zip(np.asarray(vectors, dtype=np.float64).tolist(), ids):
        pairs.append((sum((a - b) ** 2 for a, b in zip(v, query)), int(i)))
    pairs.sort()
    return [(i, d) for d, i in pairs[:k]]


class LinearModel:
    """Logits ``x.flatten() @ W.T + b``; a stand-in classifier for attack tests."""

    def __init__(self, weight, bias=None):
        from kshield.diffnet import linear

        self._linear = linear
        self.weight = Tensor(np.asarray(weight, dtype=np.float32))
        self.bias = Tensor(np.zeros(self.weight.shape[0], np.float32) if bias is None
                           else np.asarray(bias, dtype=np.float32))

    def __call__(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self._linear(x.reshape(x.shape[0], -1), self.weight, self.bias)


def clustered_vectors(rng, n, dim=32, top=100, sub=50, s_top=1.0, s_sub=0.25, s_pt=0.1):
    """Two-level Gaussian clusters: ``top`` coarse centres, ``sub`` tight groups in each."""
    tops = rng.normal(0, s_top, size=(top, dim))
    subs = tops[np.repeat(np.arange(top), sub)] + rng.normal(0, s_sub, size=(top * sub, dim))
    pick = rng.integers(0, top * sub, n)
    return (subs[pick] + rng.normal(0, s_pt, size=(n, dim))).astype(np.float32)


VERDICTS = []


def verdict(number, ok, detail):
    """Record and print one acceptance line; fails the calling test when ``ok`` is false."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line
