"""Gradient attacks: FGSM, I-FGSM, PGD, CW-L2 and the defense-aware PGD-PR / PGD-FS.

Every attack takes a ``model``: any callable mapping an ``N×H×W×C`` input
:class:`~kshield.diffnet.Tensor` to an ``N×C`` logits tensor (a
:class:`~kshield.diffnet.Network` qualifies). Inputs are batches of images in
[0, 1]; each image is attacked independently.

Randomness: restart ``r`` of image ``i`` draws its start noise from
``np.random.default_rng([seed, r, i])`` where ``i`` is the image position
plus ``index_offset``, so results do not depend on how a set is batched.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffnet import DTYPE, Tensor, cross_entropy, relu, square, take_rows

ATTACKS = ("fgsm", "ifgsm", "pgd", "cw", "pgd-pr", "pgd-fs")


@dataclass(frozen=True)
class AttackBudget:
    eps_rel: float = 0.06
    iters: int = 10
    step: float | None = None   # per-pixel sign-step size; None picks 2*radius/(iters*sqrt(d))
    restarts: int = 1
    seed: int = 0
    random_start: bool = True

    def __post_init__(self):
        if self.eps_rel < 0:
            raise ValueError("eps_rel must be >= 0")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be > 0")


@dataclass(frozen=True)
class CWConfig:
    kappa: float = 0.0
    lam: float = 1.0
    steps: int = 100
    lr: float = 0.01

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda_f must be >= 0")
        if self.steps < 1 or self.lr <= 0:
            raise ValueError("CW needs steps >= 1 and lr > 0")


@dataclass
class AttackDatabase:
    """Images the attacker can retrieve, indexed by the attacker's feature map."""

    pipeline: object            # FeaturePipeline: descriptors() and graph()
    index: object
    images: np.ndarray          # row ``r`` holds the image with id ``ids[r]``
    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self._row = {int(i): r for r, i in enumerate(self.ids.tolist())}

    def __len__(self):
        return len(self.index)

    def neighbor_images(self, clean, k):
        """K nearest database images for each clean image: ``N×K'×H×W×C`` (K' ≤ K)."""
        from .index import search

        if len(self.index) == 0:
            raise ValueError("attack database is empty")
        queries = self.pipeline.descriptors(clean)
        sets = [search(self.index, q, k) for q in queries]
        kk = min(len(s) for s in sets)
        rows = np.array([[self._row[int(i)] for i in s.ids[:kk]] for s in sets], dtype=np.int64)
        nbrs = self.images[rows]
        if nbrs.shape[2:] != clean.shape[1:]:
            raise ValueError(f"neighbour images have shape {nbrs.shape[2:]}, inputs {clean.shape[1:]}")
        return nbrs


@dataclass(frozen=True)
class DefenseAwareConfig:
    database: AttackDatabase
    gamma: float = 0.05
    k: int = 50
    cache_neighbor_grad: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.k < 1:
            raise ValueError("K_attack must be >= 1")


@dataclass
class AdversarialResult:
    images: np.ndarray
    delta: np.ndarray           # achieved normalized L2 distance per image
    success: np.ndarray         # model misclassifies the adversarial image
    iterations: int
    trace: list = field(default_factory=list, repr=False)


def _batch(x):
    x = np.asarray(x, dtype=DTYPE)
    return (x[None], True) if x.ndim == 3 else (x, False)


def _norms(x):
    return np.sqrt(np.sum(np.square(x, dtype=np.float64), axis=tuple(range(1, x.ndim))))


def normalized_l2(x, x_adv):
    """``||x - x_adv|| / ||x||``; per image for a batch."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_adv.shape}")
    if x.ndim == 4:
        base = _norms(x)
        if np.any(base == 0):
            raise ValueError("normalized L2 undefined for an all-zero image")
        return _norms(x - x_adv) / base
    base = np.linalg.norm(x.ravel())
    if base == 0:
        raise ValueError("normalized L2 undefined for an all-zero image")
    return float(np.linalg.norm((x - x_adv).ravel()) / base)


CHUNK = 256


def _chunked(fn, x, *per_image):
    """Apply ``fn`` to row chunks (images are independent) and concatenate every output."""
    if len(x) <= CHUNK:
        return fn(x, *per_image)
    parts = [fn(x[i:i + CHUNK], *(a[i:i + CHUNK] for a in per_image)) for i in range(0, len(x), CHUNK)]
    return tuple(np.concatenate(p) for p in zip(*parts))


def _loss_and_grad(model, x, y):
    xt = Tensor(x, requires_grad=True)
    losses, _ = cross_entropy(model(xt), y, reduction="none")
    losses.sum().backward()
    return losses.data.astype(np.float64), xt.grad


def loss_and_grad(model, x, y):
    """Per-image cross-entropy losses and their input gradient."""
    return _chunked(lambda a, b: _loss_and_grad(model, a, b), x, y)


def _predict(model, x, batch_size=256):
    out = [np.argmax(model(Tensor(x[i:i + batch_size])).data, axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def _result(model, x, adv, y, iters, trace=None):
    return AdversarialResult(adv, normalized_l2(x, adv), _predict(model, adv) != y, iters, trace or [])


def _finish(res, single):
    if single:
        res.images, res.delta, res.success = res.images[0], float(res.delta[0]), bool(res.success[0])
    return res


def _sign_step(x, grad, step):
    return np.clip(x + np.asarray(step, dtype=DTYPE) * np.sign(grad), 0.0, 1.0).astype(DTYPE)


def attack_fgsm(model, x, y, eps_step: float) -> AdversarialResult:
    """One signed-gradient step of size ``eps_step`` followed by clipping to [0, 1]."""
    x, single = _batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    _, grad = loss_and_grad(model, x, y)
    return _finish(_result(model, x, _sign_step(x, grad, eps_step), y, 1), single)


def attack_ifgsm(model, x, y, eps_step: float, iters: int) -> AdversarialResult:
    if iters < 1:
        raise ValueError("I-FGSM needs iters >= 1")
    x, single = _batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    adv = x
    for _ in range(iters):
        _, grad = loss_and_grad(model, adv, y)
        adv = _sign_step(adv, grad, eps_step)
    return _finish(_result(model, x, adv, y, iters), single)


def project_l2(x, adv, radius):
    """Project ``adv - x`` onto per-image L2 balls of ``radius`` and clip to [0, 1]."""
    delta = adv.astype(np.float64) - x
    norm = _norms(delta)
    scale = np.where(norm > radius, radius / np.maximum(norm, 1e-300), 1.0)
    delta *= scale.reshape(-1, *([1] * (x.ndim - 1)))
    return np.clip(x + delta, 0.0, 1.0).astype(DTYPE)


def _ball_noise(shape, radius, rng):
    d = int(np.prod(shape))
    direction = rng.standard_normal(d)
    direction /= max(np.linalg.norm(direction), 1e-300)
    return (direction * radius * rng.random() ** (1.0 / d)).reshape(shape)


def _pgd_loop(objective, x, budget: AttackBudget, index_offset=0):
    """Shared projected sign-ascent loop; ``objective(adv) -> (values, grad)``."""
    radius = budget.eps_rel * _norms(x)
    d = x[0].size
    if budget.step is None:
        alpha = 2.0 * radius / (budget.iters * np.sqrt(d))
    else:
        alpha = np.full(len(x), budget.step)
    alpha = alpha.astype(DTYPE).reshape(-1, *([1] * (x.ndim - 1)))

    best, best_val = x.copy(), np.full(len(x), -np.inf)
    for r in range(budget.restarts):
        adv = x
        if budget.random_start:
            noise = np.stack([
                _ball_noise(x.shape[1:], radius[i], np.random.default_rng([budget.seed, r, index_offset + i]))
                for i in range(len(x))])
            adv = np.clip(x + noise, 0.0, 1.0).astype(DTYPE)
        for _ in range(budget.iters):
            _, grad = objective(adv)
            adv = project_l2(x, adv + alpha * np.sign(grad), radius)
        val, _ = objective(adv)
        better = val > best_val
        best[better] = adv[better]
        best_val = np.where(better, val, best_val)
    return best


def attack_pgd(model, x, y, budget: AttackBudget, index_offset: int = 0) -> AdversarialResult:
    """L2-ball PGD with sign steps and random restarts; keeps the highest-loss restart."""
    x, single = _batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    adv = _pgd_loop(lambda a: loss_and_grad(model, a, y), x, budget, index_offset)
    return _finish(_result(model, x, adv, y, budget.iters * budget.restarts), single)


def neighbor_loss_grad(model, neighbors, y):
    """``sum_k grad_{x'_k} L(h(x'_k), y)`` for fixed neighbour images ``N×K×H×W×C``."""
    n, k = neighbors.shape[:2]
    flat = neighbors.reshape(n * k, *neighbors.shape[2:])
    _, grad = loss_and_grad(model, flat, np.repeat(y, k))
    return grad.reshape(neighbors.shape).sum(axis=1, dtype=np.float64).astype(DTYPE)


def attack_pgd_pr(model, x, y, cfg: DefenseAwareConfig, budget: AttackBudget,
                  index_offset: int = 0) -> AdversarialResult:
    """PGD whose step adds ``gamma`` times the summed loss gradients at the clean image's neighbours.

    The neighbour set is retrieved once from the clean image and kept fixed.
    """
    x, single = _batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    nbrs = cfg.database.neighbor_images(x, cfg.k)
    gamma = DTYPE(cfg.gamma)
    cached = neighbor_loss_grad(model, nbrs, y) if cfg.cache_neighbor_grad else None

    def objective(a):
        val, grad = loss_and_grad(model, a, y)
        extra = cached if cached is not None else neighbor_loss_grad(model, nbrs, y)
        return val, grad + gamma * extra

    adv = _pgd_loop(objective, x, budget, index_offset)
    return _finish(_result(model, x, adv, y, budget.iters * budget.restarts), single)


def feature_distance_and_grad(feature_fn, x, targets):
    """``sum_k ||g(x) - t_k||^2`` per image and its gradient w.r.t. ``x``."""
    return _chunked(lambda a, t: _feature_distance_and_grad(feature_fn, a, t), x, targets)


def _feature_distance_and_grad(feature_fn, x, targets):
    xt = Tensor(x, requires_grad=True)
    g = feature_fn(xt)
    n, dim = g.shape
    diff = g.reshape(n, 1, dim) - Tensor(targets)
    per = square(diff).sum(axis=(1, 2))
    per.sum().backward()
    return per.data.astype(np.float64), xt.grad


def attack_pgd_fs(feature_fn, x, cfg: DefenseAwareConfig, budget: AttackBudget, model=None,
                  y=None, index_offset: int = 0) -> AdversarialResult:
    """Push the descriptor away from the clean image's fixed neighbour descriptors.

    ``model``/``y`` are only used to fill the success flags of the result.
    """
    x, single = _batch(x)
    nbrs = cfg.database.neighbor_images(x, cfg.k)
    n, k = nbrs.shape[:2]
    targets = cfg.database.pipeline.descriptors(nbrs.reshape(n * k, *nbrs.shape[2:])).reshape(n, k, -1)
    adv = _pgd_loop(lambda a: feature_distance_and_grad(feature_fn, a, targets), x, budget, index_offset)
    if model is None or y is None:
        res = AdversarialResult(adv, normalized_l2(x, adv), np.zeros(len(x), bool), budget.iters * budget.restarts)
    else:
        res = _result(model, x, adv, np.atleast_1d(np.asarray(y, dtype=np.int64)), budget.iters * budget.restarts)
    return _finish(res, single)


def cw_objective(model, x0, adv, target, cfg: CWConfig):
    """``||x0 - x'||^2 + lam * max(-kappa, Z_target - max_{k != target} Z_k)`` per image.

    Returns (objective, gradient w.r.t. ``adv``, logit margin).
    """
    return _chunked(lambda a, b, t: _cw_objective(model, b, a, t, cfg), adv, x0, target)


def _cw_objective(model, x0, adv, target, cfg):
    xt = Tensor(adv, requires_grad=True)
    logits = model(xt)
    z = logits.data.copy()
    rows = np.arange(len(z))
    z[rows, target] = -np.inf
    runner = np.argmax(z, axis=1)
    margin = take_rows(logits, target) - take_rows(logits, runner)
    hinge = relu(margin + cfg.kappa) - cfg.kappa
    dist = square(xt - Tensor(x0)).sum(axis=(1, 2, 3))
    per = dist + hinge * cfg.lam
    per.sum().backward()
    return per.data.astype(np.float64), xt.grad, margin.data


def attack_cw_l2(model, x, y, cfg: CWConfig, max_delta: float | None = None) -> AdversarialResult:
    """Gradient descent on the CW-L2 objective with pixel clipping every step.

    The attacked class is the model's clean prediction. Returns, per image,
    the lowest-distance iterate that flips that prediction, else the last
    iterate. ``max_delta`` optionally projects the result onto a Δ ball.
    """
    x, single = _batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    target = _predict(model, x)
    adv = x.copy()
    best = x.copy()
    best_dist = np.full(len(x), np.inf)
    trace = []
    lr = DTYPE(cfg.lr)
    for _ in range(cfg.steps):
        val, grad, margin = cw_objective(model, x, adv, target, cfg)
        trace.append(val)
        fooled = margin < 0
        dist = _norms(adv.astype(np.float64) - x)
        take = fooled & (dist < best_dist)
        best[take] = adv[take]
        best_dist[take] = dist[take]
        adv = np.clip(adv - lr * grad, 0.0, 1.0).astype(DTYPE)
    val, _, margin = cw_objective(model, x, adv, target, cfg)
    trace.append(val)
    dist = _norms(adv.astype(np.float64) - x)
    take = (margin < 0) & (dist < best_dist)
    best[take] = adv[take]
    best_dist[take] = dist[take]
    out = np.where(np.isfinite(best_dist).reshape(-1, 1, 1, 1), best, adv).astype(DTYPE)
    if max_delta is not None:
        out = project_l2(x, out, max_delta * _norms(x))
    return _finish(_result(model, x, out, y, cfg.steps, trace), single)
