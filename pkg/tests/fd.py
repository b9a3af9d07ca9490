"""Central finite differences, used as the independent gradient oracle."""

import numpy as np


def central_diff(f, x, h=1e-4):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def stable_mask(signature, x, h=1e-4):
    """Coordinates whose piecewise pattern ``signature(x)`` (relu signs,
    argmax choices) is unchanged at ``x +- h``; central differences over a
    kink are not a valid oracle."""
    x = np.array(x, dtype=np.float64)
    ref = signature(x)
    ok = np.ones(x.shape, dtype=bool)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        same = np.array_equal(signature(x), ref)
        x[i] = old - h
        same = same and np.array_equal(signature(x), ref)
        x[i] = old
        ok[i] = same
    return ok


def activation_pattern(params, x):
    """Relu signs and max-pool argmax choices of a forward pass on ``x``."""
    bits, h = [], x
    for i, (w, b) in enumerate(params.layers[:-1]):
        if i == params.n_point_layers:
            bits.append(np.argmax(h, axis=1).ravel())
            h = h.max(axis=1)
        h = h @ w.data + b.data
        bits.append((h > 0).ravel())
        h = np.maximum(h, 0)
    return np.concatenate([np.asarray(v, dtype=np.int64) for v in bits])
