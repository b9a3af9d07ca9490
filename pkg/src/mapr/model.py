"""PointNet-lite: shared per-point MLP, global max-pool, MLP head.

Inputs are B x N x C with C = 20 (coordinates plus intrinsic features) or
C = 3 (raw coordinates). The max-pool over N makes the classifier invariant
to point order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import AUGMENTED_WIDTH, DEFAULT_K, augment_tensor

POINT_WIDTHS = (64, 128, 256)
HEAD_WIDTHS = (128,)
CKPT_MAGIC = b"MAPRCKPT1"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelParams:
    """Weights of the classifier as a flat list of ``(W, b)`` layer pairs.

    The first ``len(point_widths)`` layers act on every point; the rest form
    the head after pooling.
    """

    in_channels: int
    num_classes: int
    point_widths: tuple = POINT_WIDTHS
    head_widths: tuple = HEAD_WIDTHS
    k: int = DEFAULT_K
    layers: list = field(default_factory=list)

    @property
    def uses_intrinsic(self) -> bool:
        return self.in_channels == AUGMENTED_WIDTH

    @property
    def n_point_layers(self) -> int:
        return len(self.point_widths)

    def tensors(self) -> list[T.Tensor]:
        return [t for layer in self.layers for t in layer]

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.tensors()))

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def copy(self) -> "ModelParams":
        layers = [(T.Tensor(w.data, True), T.Tensor(b.data, True)) for w, b in self.layers]
        return ModelParams(self.in_channels, self.num_classes, self.point_widths,
                           self.head_widths, self.k, layers)

    def shapes(self) -> list[tuple]:
        return [t.shape for t in self.tensors()]


def init_params(in_channels: int, num_classes: int, seed: int,
                point_widths=POINT_WIDTHS, head_widths=HEAD_WIDTHS, k: int = DEFAULT_K) -> ModelParams:
    """He-uniform weights and zero biases drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    dims = [in_channels, *point_widths, *head_widths, num_classes]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((T.Tensor(w, requires_grad=True), T.Tensor(np.zeros(fan_out), requires_grad=True)))
    return ModelParams(in_channels, num_classes, tuple(point_widths), tuple(head_widths), k, layers)


def forward(params: ModelParams, batch) -> T.Tensor:
    """Logits (B x C) for a B x N x in_channels batch."""
    x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
    if x.ndim != 3 or x.shape[2] != params.in_channels:
        raise T.ShapeError(
            f"model expects B x N x {params.in_channels} input, got shape {x.shape}"
        )
    h = x
    for i, (w, b) in enumerate(params.layers):
        if i == params.n_point_layers:
            h = T.max_over_axis(h, axis=1)
        h = h @ w + b
        if i < len(params.layers) - 1:
            h = T.relu(h)
    return h


def forward_points(params: ModelParams, points) -> T.Tensor:
    """Logits from raw B x N x 3 coordinates, adding intrinsic features if the
    model consumes them. Gradients reach ``points`` through both paths."""
    x = points if isinstance(points, T.Tensor) else T.Tensor(points)
    if params.uses_intrinsic:
        x = augment_tensor(x, params.k)
    return forward(params, x)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(params: ModelParams, batch) -> tuple[np.ndarray, np.ndarray]:
    """Class indices (first maximum on ties) and softmax probabilities."""
    logits = forward(params, batch).data
    return np.argmax(logits, axis=-1), softmax_np(logits)


def predict_points(params: ModelParams, points) -> tuple[np.ndarray, np.ndarray]:
    logits = forward_points(params, points).data
    return np.argmax(logits, axis=-1), softmax_np(logits)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Write weights as: magic, tensor count, then per tensor
    ``ndim, dims..., little-endian float64 payload``."""
    tensors = params.tensors()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, template: ModelParams) -> ModelParams:
    """Read weights into a copy of ``template``; shapes must match exactly."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    expected = template.shapes()
    if count != len(expected):
        raise CheckpointError(f"{path}: {count} tensors, model has {len(expected)}")
    arrays = []
    for want in expected:
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        if tuple(shape) != tuple(want):
            raise CheckpointError(f"{path}: tensor shape {tuple(shape)} does not match model {tuple(want)}")
        size = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * size
    out = template.copy()
    it = iter(arrays)
    out.layers = [(T.Tensor(next(it), True), T.Tensor(next(it), True)) for _ in out.layers]
    return out
