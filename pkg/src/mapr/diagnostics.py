"""Jacobian anisotropy and empirical intrinsic-Lipschitz ratios of a model."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .geometry import intrinsic_map
from .model import ModelParams, forward_points
from .perturb import PerturbConfig, perturb


def input_jacobian(params: ModelParams, cloud: np.ndarray) -> np.ndarray:
    """Jacobian of the logits w.r.t. the flattened coordinates (C x 3N).

    One backward pass per logit; the k-NN graph is held fixed.
    """
    x = np.asarray(cloud, dtype=np.float64)[None]
    rows = []
    for c in range(params.num_classes):
        xt = T.Tensor(x, requires_grad=True)
        logits = forward_points(params, xt)
        logits[0, c].backward()
        rows.append(xt.grad.ravel())
    return np.stack(rows)


def _power(apply, dim, iters, rng):
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    value = 0.0
    for _ in range(iters):
        w = apply(v)
        value = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return value


def anisotropy_ratio(jac: np.ndarray, iters: int = 200, rng: np.random.Generator | None = None) -> float:
    """Estimate ``sigma_max / sigma_min`` of ``jac`` by power iteration.

    The largest eigenvalue of the Gram matrix comes from plain power
    iteration; the smallest from power iteration on the shifted matrix
    ``lambda_max I - G``. The Gram matrix is taken on the smaller side of
    the Jacobian, so the estimate concerns its nonzero singular values.
    Returns ``inf`` when the smallest singular value falls below 1e-12.
    """
    rng = rng or np.random.default_rng(0)
    j = np.asarray(jac, dtype=np.float64)
    gram = j @ j.T if j.shape[0] <= j.shape[1] else j.T @ j
    dim = gram.shape[0]
    lam_max = _power(lambda v: gram @ v, dim, iters, rng)
    if lam_max <= 0:
        return float("inf")
    shifted = _power(lambda v: lam_max * v - gram @ v, dim, iters, rng)
    lam_min = max(lam_max - shifted, 0.0)
    s_max, s_min = np.sqrt(lam_max), np.sqrt(lam_min)
    if s_min < 1e-12:
        return float("inf")
    return max(float(s_max / s_min), 1.0)


def diagnostics_mu(params: ModelParams, cloud: np.ndarray, probes: int = 200, seed: int = 0) -> float:
    """Anisotropy of the input-logit Jacobian at one cloud."""
    return anisotropy_ratio(input_jacobian(params, cloud), iters=probes, rng=np.random.default_rng(seed))


def lipschitz_ratios(params: ModelParams, clouds: np.ndarray, perturb_cfg: PerturbConfig = PerturbConfig(),
                     seed: int = 0, epsilon: float = 1e-6, k: int | None = None) -> np.ndarray:
    """``|f(X) - f(X')| / (|phi(X) - phi(X')|_F + epsilon)`` for each cloud and a
    perturbed copy ``X'``; ``f`` is the logit vector."""
    rng = np.random.default_rng(seed)
    k = k or params.k
    out = []
    for x in clouds:
        xp = perturb(x, perturb_cfg, rng)
        out.append(pair_ratio(params, x, xp, epsilon, k))
    return np.array(out)


def pair_ratio(params: ModelParams, x1: np.ndarray, x2: np.ndarray, epsilon: float = 1e-6,
               k: int | None = None) -> float:
    k = k or params.k
    if np.array_equal(x1, x2):
        return 0.0
    f = forward_points(params, np.stack([x1, x2])).data
    num = float(np.linalg.norm(f[0] - f[1]))
    den = float(np.linalg.norm(intrinsic_map(x1, k) - intrinsic_map(x2, k)))
    return num / (den + epsilon)


def diagnostics_lipschitz(params: ModelParams, clouds: np.ndarray, pairs: int | None = None,
                          perturb_cfg: PerturbConfig = PerturbConfig(), seed: int = 0,
                          epsilon: float = 1e-6) -> dict:
    """Summary of the empirical ratio distribution over sampled pairs."""
    clouds = np.asarray(clouds)
    if len(clouds) < 2:
        raise ValueError("need at least 2 samples")
    if pairs is not None and pairs < len(clouds):
        pick = np.random.default_rng(seed).choice(len(clouds), size=pairs, replace=False)
        clouds = clouds[np.sort(pick)]
    r = lipschitz_ratios(params, clouds, perturb_cfg, seed, epsilon)
    q = np.quantile(r, [0.5, 0.9, 0.99])
    return {"max": float(r.max()), "mean": float(r.mean()), "q50": float(q[0]),
            "q90": float(q[1]), "q99": float(q[2]), "count": int(r.size)}
