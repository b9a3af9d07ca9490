"""k-NN diffusion operator and the intrinsic per-point feature map.

The feature map has 17 channels per point::

    for t in (1, 2, 4, 8):  [ (A^t X)_x, (A^t X)_y, (A^t X)_z, (A^t 1) ]   -> 16
    curvature  ||(I - A) X||_2                                              -> 1

where ``A`` is the symmetrized, row-normalized Gaussian k-NN adjacency.
Concatenated with the raw coordinates this gives a 20-wide point
representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import tensor as T

DEFAULT_K = 20
DIFFUSION_STEPS = (1, 2, 4, 8)
N_INTRINSIC = 4 * len(DIFFUSION_STEPS) + 1
AUGMENTED_WIDTH = 3 + N_INTRINSIC
CURVATURE_CHANNEL = N_INTRINSIC - 1


class GraphConfigError(ValueError):
    """The cloud is too small for the requested neighbor count."""


class DegenerateCloudError(ValueError):
    """Every point coincides, so no positive bandwidth exists."""


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"expected an N x 3 array, got shape {self.points.shape}")

    def __len__(self):
        return self.points.shape[0]


def as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


@dataclass
class DiffusionOperator:
    """Row-stochastic diffusion matrix built from a directed k-NN graph.

    ``neighbor_idx`` and ``directed_weights`` describe the directed graph
    (N x k); ``matrix`` is the symmetrized, row-normalized operator whose
    support is the union of both directions.
    """

    n: int
    neighbor_idx: np.ndarray
    directed_weights: np.ndarray
    bandwidths: np.ndarray
    matrix: sp.csr_matrix

    def apply(self, signal: np.ndarray) -> np.ndarray:
        return self.matrix @ signal


def _pairwise_dist(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    diff = x[rows] - x[cols]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def knn_brute_force(points, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact O(N^2) k-NN; ties go to the lower index, self is excluded."""
    x = as_points(points)
    n = x.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    cols = np.arange(n)
    for i in range(n):
        d = _pairwise_dist(x, np.full(n, i), cols)
        order = np.lexsort((cols, d))
        order = order[order != i][:k]
        idx[i], dist[i] = order, d[order]
    return idx, dist


def knn(points, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbors of every point, excluding the point itself.

    Candidates come from a kd-tree; rows whose candidate list may be cut
    off in the middle of a distance tie are recomputed by brute force, so
    the result always equals :func:`knn_brute_force`.
    """
    x = as_points(points)
    n = x.shape[0]
    if n <= k:
        raise GraphConfigError(f"need more than k={k} points, got {n}")
    m = min(n, k + 1 + 8)
    _, cand = cKDTree(x).query(x, m)
    cand = np.asarray(cand, dtype=np.int64).reshape(n, m)
    rows = np.repeat(np.arange(n), m).reshape(n, m)
    d = _pairwise_dist(x, rows.ravel(), cand.ravel()).reshape(n, m)
    d = np.where(cand == rows, np.inf, d)
    order = np.lexsort((cand, d), axis=-1)
    cand = np.take_along_axis(cand, order, axis=-1)
    d = np.take_along_axis(d, order, axis=-1)
    idx, dist = cand[:, :k].copy(), d[:, :k].copy()

    # the last finite candidate must be strictly farther than the k-th pick,
    # otherwise an equally distant point may have been left out of the query
    has_self = np.isinf(d).any(axis=1)
    last = np.where(has_self, d[:, -2] if m >= 2 else np.inf, d[:, -1])
    suspect = np.nonzero((last <= dist[:, -1]) & (m < n))[0]
    if suspect.size:
        cols = np.arange(n)
        for i in suspect:
            di = _pairwise_dist(x, np.full(n, i), cols)
            o = np.lexsort((cols, di))
            o = o[o != i][:k]
            idx[i], dist[i] = o, di[o]
    return idx, dist


def build_knn_graph(cloud, k: int = DEFAULT_K) -> DiffusionOperator:
    """Gaussian-weighted k-NN diffusion operator of a cloud.

    Edge weights are ``exp(-|x_i - x_j|^2 / sigma_i^2)`` with ``sigma_i``
    the distance to the k-th neighbor, symmetrized as ``(W + W^T) / 2``
    and then row-normalized.
    """
    x = as_points(cloud)
    n = x.shape[0]
    if n <= k:
        raise GraphConfigError(f"need more than k={k} points, got {n}")
    idx, dist = knn(x, k)
    sigma = dist[:, -1].copy()
    zero = sigma <= 0
    if zero.any():
        positive = sigma[~zero]
        if positive.size == 0:
            raise DegenerateCloudError("all points coincide; bandwidth is zero everywhere")
        sigma[zero] = np.median(positive) if np.median(sigma) <= 0 else np.median(sigma)
    w = np.exp(-(dist * dist) / (sigma[:, None] ** 2))
    rows = np.repeat(np.arange(n), k)
    directed = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n, n))
    sym = ((directed + directed.T) * 0.5).tocsr()
    row_sum = np.asarray(sym.sum(axis=1)).ravel()
    matrix = (sp.diags(1.0 / row_sum) @ sym).tocsr()
    matrix.sort_indices()
    return DiffusionOperator(n=n, neighbor_idx=idx, directed_weights=w, bandwidths=sigma, matrix=matrix)


def curvature(op: DiffusionOperator, cloud) -> np.ndarray:
    x = as_points(cloud)
    lap = x - op.apply(x)
    return np.sqrt(np.sum(lap * lap, axis=1))


def diffusion_features(op: DiffusionOperator, cloud, steps=DIFFUSION_STEPS) -> np.ndarray:
    """Diffused coordinates and diffused density at each step in ``steps``.

    Powers are built by repeated sparse application, reusing the previous
    power; the dense ``A^t`` is never formed.
    """
    steps = tuple(steps)
    if list(steps) != sorted(steps):
        raise ValueError(f"steps must be ascending, got {steps}")
    x = as_points(cloud)
    signal = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    out, t = [], 0
    for target in steps:
        while t < target:
            signal = op.apply(signal)
            t += 1
        out.append(signal)
    return np.concatenate(out, axis=1)


def intrinsic_map(cloud, k: int = DEFAULT_K) -> np.ndarray:
    """N x 17 intrinsic features of one cloud."""
    x = as_points(cloud)
    op = build_knn_graph(x, k)
    return np.concatenate([diffusion_features(op, x), curvature(op, x)[:, None]], axis=1)


def augment(cloud, k: int = DEFAULT_K) -> np.ndarray:
    """N x 20 array ``[X | intrinsic_map(X)]``."""
    x = as_points(cloud)
    return np.concatenate([x, intrinsic_map(x, k)], axis=1)


def intrinsic_map_batch(points: np.ndarray, k: int = DEFAULT_K) -> np.ndarray:
    return np.stack([intrinsic_map(x, k) for x in np.asarray(points)])


# -- differentiable path -------------------------------------------------------

def block_operator(ops: list[DiffusionOperator]) -> sp.csr_matrix:
    return sp.block_diag([op.matrix for op in ops], format="csr")


def intrinsic_features_tensor(points: T.Tensor, k: int = DEFAULT_K, ops=None) -> T.Tensor:
    """Intrinsic features of a B x N x 3 tensor, differentiable in the points.

    The graph (neighbor sets and edge weights) is rebuilt from the current
    coordinates and then held fixed, so gradients flow through ``A^t X`` and
    the curvature but not through the neighbor search.
    """
    if points.ndim != 3 or points.shape[2] != 3:
        raise T.ShapeError(f"expected B x N x 3 points, got {points.shape}")
    b, n, _ = points.shape
    if ops is None:
        ops = [build_knn_graph(x, k) for x in points.data]
    mat = block_operator(ops)
    flat = T.reshape(points, (b * n, 3))
    ones = np.ones((b * n, 1))
    chans = []
    diffused, density, t = flat, ones, 0
    first = None
    for target in DIFFUSION_STEPS:
        while t < target:
            diffused = T.sparse_apply(mat, diffused)
            density = mat @ density
            t += 1
            if first is None:
                first = diffused
        chans.append(diffused)
        chans.append(T.Tensor(density))
    chans.append(T.reshape(T.norm(flat - first, axis=-1), (b * n, 1)))
    feats = T.concat(chans, axis=-1)
    return T.reshape(feats, (b, n, N_INTRINSIC))


def augment_tensor(points: T.Tensor, k: int = DEFAULT_K, ops=None) -> T.Tensor:
    return T.concat([points, intrinsic_features_tensor(points, k, ops)], axis=-1)
