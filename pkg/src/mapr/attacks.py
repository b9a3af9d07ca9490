"""Gradient-based attacks on the classification pipeline.

Every attack works on raw coordinates. When the model consumes intrinsic
features they are recomputed from the current adversarial coordinates at
each step, and the input gradient flows through them with the k-NN graph
held fixed for that step.

All functions take a batch ``points`` of shape (B, N, 3) with labels (B,),
or a single cloud (N, 3) with a scalar label, and return the same rank.
The input arrays are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import knn
from .model import ModelParams, forward_points

ATTACK_KINDS = ("sma_drop", "pgd_l2", "pgd_linf", "fgsm", "bim", "add_k", "tpgd", "sipgd")
BOUND_SLACK = 1e-9


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Parameters for one attack column of the evaluation grid."""

    kind: str
    epsilon: float = 0.05
    steps: int = 20
    step_size: float = 0.01
    k_points: int = 100
    surrogate_count: int = 2
    si_weight: float = 1.0
    si_k: int = 10
    momentum: float = 0.9
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackConfigError(f"unknown attack {self.kind!r}")
        if self.kind in ("fgsm", "bim", "pgd_l2", "pgd_linf", "tpgd", "sipgd") and self.epsilon <= 0:
            raise AttackConfigError(f"{self.kind}: epsilon must be > 0")
        if self.steps < 1:
            raise AttackConfigError("steps must be >= 1")
        if self.kind in ("sma_drop", "add_k") and self.k_points < 1:
            raise AttackConfigError("k_points must be >= 1")


def default_attack_suite(seed: int = 0, k_points: int = 100) -> list[AttackConfig]:
    """The eight evaluation attacks with their default budgets."""
    return [
        AttackConfig("sma_drop", k_points=k_points, seed=seed),
        AttackConfig("pgd_l2", epsilon=1.25, steps=20, step_size=0.125, seed=seed),
        AttackConfig("pgd_linf", epsilon=0.05, steps=20, step_size=0.01, seed=seed),
        AttackConfig("fgsm", epsilon=0.05, steps=1, seed=seed),
        AttackConfig("bim", epsilon=0.05, steps=10, step_size=0.01, seed=seed),
        AttackConfig("add_k", k_points=k_points, steps=20, step_size=0.01, seed=seed),
        AttackConfig("tpgd", epsilon=0.05, steps=20, step_size=0.01, momentum=0.9, seed=seed),
        AttackConfig("sipgd", epsilon=0.05, steps=20, step_size=0.01, si_weight=1.0, seed=seed),
    ]


@dataclass
class AdversarialResult:
    """Output of an attack.

    ``success`` marks clouds whose predicted class differs from the
    prediction on the unmodified input.
    ``perturbation_norm`` is the per-cloud distance from the input in the
    attack's own norm (l2 or l-infinity). Drop attacks report 0 and add
    attacks report the l-infinity move of the added points from their
    starting positions. When ``bound`` is set the constructor asserts that
    every norm is within it.
    """

    adv_cloud: np.ndarray
    success: np.ndarray
    perturbation_norm: np.ndarray
    iterations_used: int
    bound: float | None = None

    def __post_init__(self):
        if self.bound is not None:
            worst = float(np.max(self.perturbation_norm)) if np.size(self.perturbation_norm) else 0.0
            if worst > self.bound + BOUND_SLACK:
                raise AssertionError(f"perturbation {worst} exceeds bound {self.bound}")

    @property
    def adv_points(self) -> np.ndarray:
        return self.adv_cloud


def _batched(points, labels):
    x = np.asarray(points, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != x.shape[0]:
        raise AttackConfigError(f"{x.shape[0]} clouds but {y.shape[0]} labels")
    return x, y, single


def _finish(adv, success, norms, iters, single, bound=None) -> AdversarialResult:
    if single:
        return AdversarialResult(adv[0], bool(success[0]), float(norms[0]), iters, bound)
    return AdversarialResult(adv, success, norms, iters, bound)


def ce_sum(logits: T.Tensor, labels) -> T.Tensor:
    """Summed cross-entropy, so each cloud's gradient is its own loss gradient."""
    return -T.tsum(T.pick(T.log_softmax(logits, axis=-1), labels))


def loss_gradient(params: ModelParams, x: np.ndarray, y: np.ndarray, extra=None):
    """Gradient of summed CE (plus ``extra(points_tensor)``) w.r.t. points.

    Returns ``(grad, logits)``.
    """
    xt = T.Tensor(x, requires_grad=True)
    logits = forward_points(params, xt)
    loss = ce_sum(logits, y)
    if extra is not None:
        loss = loss + extra(xt)
    loss.backward()
    grad = xt.grad if xt.grad is not None else np.zeros_like(x)
    return grad, logits.data


def predict_labels(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward_points(params, x).data, axis=-1)


def _changed(params: ModelParams, x: np.ndarray, adv: np.ndarray) -> np.ndarray:
    """Success flag: the prediction on ``adv`` differs from the one on ``x``."""
    return predict_labels(params, adv) != predict_labels(params, x)


def _linf(delta):
    return np.max(np.abs(delta.reshape(delta.shape[0], -1)), axis=1)


def _l2(delta):
    return np.sqrt(np.sum(delta.reshape(delta.shape[0], -1) ** 2, axis=1))


def fgsm(params: ModelParams, points, labels, epsilon: float) -> AdversarialResult:
    """One signed-gradient step of size ``epsilon``."""
    x, y, single = _batched(points, labels)
    g, _ = loss_gradient(params, x, y)
    adv = x + epsilon * np.sign(g)
    success = _changed(params, x, adv)
    return _finish(adv, success, _linf(adv - x), 1, single, bound=epsilon)


def _sign_pgd(params, x, y, epsilon, steps, step_size, start, extra=None):
    lo, hi = x - epsilon, x + epsilon
    adv = start
    for _ in range(steps):
        g, _ = loss_gradient(params, adv, y, extra)
        adv = np.clip(adv + step_size * np.sign(g), lo, hi)
    return adv


def bim(params: ModelParams, points, labels, epsilon: float, steps: int = 10,
        step_size: float = 0.01) -> AdversarialResult:
    """Iterated signed-gradient steps, clipped to the l-infinity ball."""
    x, y, single = _batched(points, labels)
    adv = _sign_pgd(params, x, y, epsilon, steps, step_size, x)
    success = _changed(params, x, adv)
    return _finish(adv, success, _linf(adv - x), steps, single, bound=epsilon)


def _project_l2(x0, adv, epsilon):
    delta = adv - x0
    n = _l2(delta)
    scale = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
    return x0 + delta * scale[:, None, None]


def _random_start(x, norm, epsilon, rng):
    if norm == "linf":
        return x + rng.uniform(-epsilon, epsilon, size=x.shape)
    d = x[0].size
    direction = rng.normal(size=x.shape)
    direction /= _l2(direction)[:, None, None]
    radius = epsilon * rng.uniform(size=x.shape[0]) ** (1.0 / d)
    return x + direction * radius[:, None, None]


def pgd(params: ModelParams, points, labels, norm: str = "linf", epsilon: float = 0.05,
        steps: int = 20, step_size: float = 0.01, random_start: bool = False,
        rng: np.random.Generator | None = None) -> AdversarialResult:
    """Projected gradient ascent on cross-entropy in an l2 or l-infinity ball.

    l2 steps follow the per-cloud normalized gradient; l-infinity steps
    follow its sign. ``steps=0`` returns the input.
    """
    if norm not in ("l2", "linf"):
        raise AttackConfigError(f"norm must be 'l2' or 'linf', got {norm!r}")
    x, y, single = _batched(points, labels)
    adv = x.copy()
    if random_start and steps > 0:
        adv = _random_start(x, norm, epsilon, rng or np.random.default_rng(0))
        if norm == "linf":
            adv = np.clip(adv, x - epsilon, x + epsilon)
    if norm == "linf":
        adv = _sign_pgd(params, x, y, epsilon, steps, step_size, adv)
        measure = _linf
    else:
        for _ in range(steps):
            g, _ = loss_gradient(params, adv, y)
            gn = _l2(g)
            direction = g / np.where(gn > 0, gn, 1.0)[:, None, None]
            adv = _project_l2(x, adv + step_size * direction, epsilon)
        measure = _l2
    success = _changed(params, x, adv)
    return _finish(adv, success, measure(adv - x), steps, single, bound=epsilon)


def saliency(params: ModelParams, points, labels) -> np.ndarray:
    """Per-point score ``-<grad_i, x_i - centroid>`` (B x N)."""
    x, y, _ = _batched(points, labels)
    g, _ = loss_gradient(params, x, y)
    centered = x - x.mean(axis=1, keepdims=True)
    return -np.sum(g * centered, axis=-1)


def sma_drop(params: ModelParams, points, labels, k_points: int = 100) -> AdversarialResult:
    """Remove the ``k_points`` highest-saliency points (ties: lower index first)."""
    x, y, single = _batched(points, labels)
    n = x.shape[1]
    if k_points == 0:
        return _finish(x.copy(), np.zeros(len(x), dtype=bool), np.zeros(len(x)), 0, single)
    if n <= k_points:
        raise AttackConfigError(f"cannot drop {k_points} points from a cloud of {n}")
    s = saliency(params, x, y)
    drop = np.argsort(-s, axis=1, kind="stable")[:, :k_points]
    keep = np.ones(x.shape[:2], dtype=bool)
    np.put_along_axis(keep, drop, False, axis=1)
    adv = x[keep].reshape(x.shape[0], n - k_points, 3)
    success = _changed(params, x, adv)
    return _finish(adv, success, np.zeros(len(x)), 1, single)


def add_k(params: ModelParams, points, labels, k_points: int = 100, steps: int = 20,
          step_size: float = 0.01, init_sigma: float = 0.01, init_clip: float = 0.05,
          rng: np.random.Generator | None = None) -> AdversarialResult:
    """Append ``k_points`` points and move only them by signed gradient ascent.

    Added points start on randomly chosen input points, offset by Gaussian
    noise clipped to ``init_clip`` per coordinate.
    """
    x, y, single = _batched(points, labels)
    rng = rng or np.random.default_rng(0)
    b, n, _ = x.shape
    src = np.stack([rng.choice(n, size=k_points, replace=k_points > n) for _ in range(b)])
    noise = np.clip(rng.normal(0.0, init_sigma, size=(b, k_points, 3)), -init_clip, init_clip)
    start = np.take_along_axis(x, src[..., None], axis=1) + noise
    added = start.copy()
    for _ in range(steps):
        g, _ = loss_gradient(params, np.concatenate([x, added], axis=1), y)
        added = added + step_size * np.sign(g[:, n:])
    adv = np.concatenate([x, added], axis=1)
    success = _changed(params, x, adv)
    return _finish(adv, success, _linf(added - start), steps, single)


def surrogate_gradient(surrogates: list[ModelParams], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise mean of the surrogates' input gradients."""
    total = None
    for s in surrogates:
        g, _ = loss_gradient(s, x, y)
        total = g if total is None else total + g
    return total / len(surrogates)


def tpgd(surrogates: list[ModelParams], target: ModelParams, points, labels, epsilon: float = 0.05,
         steps: int = 20, step_size: float = 0.01, momentum: float = 0.9,
         allow_whitebox: bool = False) -> AdversarialResult:
    """Momentum l-infinity PGD on the surrogate ensemble, scored on ``target``.

    ``allow_whitebox`` permits a single surrogate that may be the target
    itself (debugging only).
    """
    if not allow_whitebox:
        if len(surrogates) < 2:
            raise AttackConfigError("transfer attack needs at least 2 surrogate models")
        if any(s is target for s in surrogates):
            raise AttackConfigError("target model appears among the surrogates")
    elif len(surrogates) < 1:
        raise AttackConfigError("need at least one surrogate")
    x, y, single = _batched(points, labels)
    lo, hi = x - epsilon, x + epsilon
    adv = x.copy()
    velocity = np.zeros_like(x)
    for _ in range(steps):
        g = surrogate_gradient(surrogates, adv, y)
        scale = np.mean(np.abs(g.reshape(len(g), -1)), axis=1)
        velocity = momentum * velocity + g / np.where(scale > 0, scale, 1.0)[:, None, None]
        adv = np.clip(adv + step_size * np.sign(velocity), lo, hi)
    success = _changed(target, x, adv)
    return _finish(adv, success, _linf(adv - x), steps, single, bound=epsilon)


def shape_penalty_tensor(xt: T.Tensor, clean: np.ndarray, nbr: np.ndarray) -> T.Tensor:
    """``sum_i sum_{j in N(i)} (|x'_i - x'_j| - |x_i - x_j|)^2`` over the batch."""
    b, n, _ = clean.shape
    flat = T.reshape(xt, (b * n, 3))
    offset = (np.arange(b) * n)[:, None, None]
    rows = (np.arange(n)[None, :, None] + offset + 0 * nbr).ravel()
    cols = (nbr + offset).ravel()
    diff = T.take(flat, rows) - T.take(flat, cols)
    d_adv = T.norm(diff, axis=-1)
    cf = clean.reshape(b * n, 3)
    d_clean = np.linalg.norm(cf[rows] - cf[cols], axis=-1)
    return T.tsum(T.square(d_adv - d_clean))


def neighbor_sets(x: np.ndarray, k: int) -> np.ndarray:
    return np.stack([knn(c, k)[0] for c in x])


def sipgd(params: ModelParams, points, labels, epsilon: float = 0.05, steps: int = 20,
          step_size: float = 0.01, si_weight: float = 1.0, si_k: int = 10) -> AdversarialResult:
    """l-infinity PGD on ``CE - si_weight * shape_penalty`` with neighbor sets
    frozen from the clean cloud."""
    x, y, single = _batched(points, labels)
    nbr = neighbor_sets(x, si_k)

    def extra(xt):
        return -si_weight * shape_penalty_tensor(xt, x, nbr)

    adv = _sign_pgd(params, x, y, epsilon, steps, step_size, x, extra=extra)
    success = _changed(params, x, adv)
    return _finish(adv, success, _linf(adv - x), steps, single, bound=epsilon)


def neighbor_distortion(clean: np.ndarray, adv: np.ndarray, k: int = 10) -> float:
    """Mean absolute change of clean k-NN pair distances."""
    clean = clean if clean.ndim == 3 else clean[None]
    adv = adv if adv.ndim == 3 else adv[None]
    total, count = 0.0, 0
    for c, a in zip(clean, adv):
        idx, d = knn(c, k)
        rows = np.repeat(np.arange(len(c)), k)
        da = np.linalg.norm(a[rows] - a[idx.ravel()], axis=-1)
        total += float(np.sum(np.abs(da - d.ravel())))
        count += da.size
    return total / count


def run_attack(cfg: AttackConfig, params: ModelParams, points, labels,
               surrogates: list[ModelParams] | None = None) -> AdversarialResult:
    """Dispatch one configured attack."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "fgsm":
        return fgsm(params, points, labels, cfg.epsilon)
    if cfg.kind == "bim":
        return bim(params, points, labels, cfg.epsilon, cfg.steps, cfg.step_size)
    if cfg.kind in ("pgd_l2", "pgd_linf"):
        return pgd(params, points, labels, cfg.kind[4:], cfg.epsilon, cfg.steps, cfg.step_size,
                   cfg.random_start, rng)
    if cfg.kind == "sma_drop":
        return sma_drop(params, points, labels, cfg.k_points)
    if cfg.kind == "add_k":
        return add_k(params, points, labels, cfg.k_points, cfg.steps, cfg.step_size, rng=rng)
    if cfg.kind == "tpgd":
        if surrogates is None:
            raise AttackConfigError("tpgd needs surrogate models")
        return tpgd(surrogates, params, points, labels, cfg.epsilon, cfg.steps, cfg.step_size, cfg.momentum)
    return sipgd(params, points, labels, cfg.epsilon, cfg.steps, cfg.step_size, cfg.si_weight, cfg.si_k)
