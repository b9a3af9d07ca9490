"""Look at the 17 intrinsic channels on two shapes.

Curvature (the last channel) is the distance from each point to its
neighborhood average. Rotating the cloud leaves it unchanged, while the
diffused coordinates rotate with the cloud.

    python demos/intrinsic_features.py
"""

import numpy as np

from mapr.data import sample_shape
from mapr.geometry import CURVATURE_CHANNEL, intrinsic_map
from mapr.perturb import rotation_matrix

rng = np.random.default_rng(0)
for name in ("sphere", "cube", "torus"):
    x = sample_shape(name, 512, rng)
    phi = intrinsic_map(x, k=20)
    kappa = phi[:, CURVATURE_CHANNEL]
    print(f"{name:>7}: curvature median {np.median(kappa):.4f}  p90 {np.quantile(kappa, 0.9):.4f}")

x = sample_shape("cube", 512, rng)
r = rotation_matrix(np.array([1.0, 1.0, 0.0]) / np.sqrt(2), 0.7)
phi, phr = intrinsic_map(x), intrinsic_map(x @ r.T)
print("curvature change under rotation:", np.abs(phi[:, -1] - phr[:, -1]).max())
print("diffused coords, rotated vs recomputed:", np.abs(phi[:, 0:3] @ r.T - phr[:, 0:3]).max())
