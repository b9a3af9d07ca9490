"""Geometry-preserving training perturbation and statistical outlier removal."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, as_points

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PerturbConfig:
    """Random rotation about the z axis plus clipped Gaussian jitter.

    ``full_rotation`` samples the rotation axis uniformly on the sphere
    instead of fixing it to z.
    """

    max_rotation_deg: float = 15.0
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    full_rotation: bool = False

    def __post_init__(self):
        if not 0.0 <= self.max_rotation_deg <= 180.0:
            raise ValueError("max_rotation_deg must lie in [0, 180]")
        if self.jitter_sigma < 0 or self.jitter_clip < 0:
            raise ValueError("jitter_sigma and jitter_clip must be non-negative")


@dataclass(frozen=True)
class SorConfig:
    k: int = 2
    alpha: float = 1.1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit ``axis``."""
    ax = np.asarray(axis, dtype=np.float64)
    ax = ax / np.linalg.norm(ax)
    k = np.array([[0.0, -ax[2], ax[1]], [ax[2], 0.0, -ax[0]], [-ax[1], ax[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def perturb(cloud, cfg: PerturbConfig, rng: np.random.Generator):
    """Return ``R X + noise`` for a random small rotation ``R``.

    Accepts a :class:`PointCloud` (label is kept) or a bare N x 3 array and
    returns the same kind. The draws come only from ``rng``.
    """
    x = as_points(cloud)
    limit = np.deg2rad(cfg.max_rotation_deg)
    angle = rng.uniform(-limit, limit)
    if cfg.full_rotation:
        axis = rng.normal(size=3)
    else:
        axis = np.array([0.0, 0.0, 1.0])
    noise = np.clip(rng.normal(0.0, 1.0, size=x.shape) * cfg.jitter_sigma, -cfg.jitter_clip, cfg.jitter_clip)
    if angle == 0.0 and cfg.jitter_sigma == 0.0:
        out = x.copy()
    else:
        out = x @ rotation_matrix(axis, angle).T + noise
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.label)
    return out


def perturb_batch(points: np.ndarray, cfg: PerturbConfig, rng: np.random.Generator) -> np.ndarray:
    return np.stack([perturb(x, cfg, rng) for x in points])


def mean_knn_distance(points: np.ndarray, k: int) -> np.ndarray:
    """Mean distance of every point to its k nearest other points."""
    d, _ = cKDTree(points).query(points, k + 1)
    return np.asarray(d)[:, 1:].mean(axis=1)


def sor_mask(cloud, cfg: SorConfig = SorConfig()) -> np.ndarray:
    """Boolean mask of points kept by statistical outlier removal."""
    x = as_points(cloud)
    n = x.shape[0]
    if n <= cfg.k:
        logger.warning("SOR skipped: %d points is not more than k=%d", n, cfg.k)
        return np.ones(n, dtype=bool)
    d = mean_knn_distance(x, cfg.k)
    # population std; with std == 0 the threshold is the mean and nothing exceeds it
    mu = d.mean()
    keep = d <= mu + cfg.alpha * d.std() + 1e-12 * abs(mu)
    if not keep.any():
        logger.warning("SOR would remove every point; returning the input unchanged")
        return np.ones(n, dtype=bool)
    return keep


def sor_defense(cloud, cfg: SorConfig = SorConfig()):
    """Drop points whose mean k-NN distance exceeds ``mean + alpha * std``."""
    x = as_points(cloud)
    kept = x[sor_mask(x, cfg)]
    if isinstance(cloud, PointCloud):
        return PointCloud(kept, cloud.label)
    return kept
