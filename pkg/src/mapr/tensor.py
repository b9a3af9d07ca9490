"""Small dense-tensor engine with define-by-run reverse-mode autodiff.

Every operation on a :class:`Tensor` that has a differentiable operand
records a node holding its parents and a closure that pushes the output
gradient back to them. :func:`build_tape` orders those nodes topologically
and :meth:`Tensor.backward` walks the tape once, in reverse.

All data is float64.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation that requires finite input receives NaN/Inf."""


class DetachedError(RuntimeError):
    """Raised when backward() is called on a tensor that is not on a tape."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: "Tensor", b: "Tensor", name: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation.

    Parameters
    ----------
    data : array_like
        Values; copied to a float64 ndarray.
    requires_grad : bool
        Leaves with ``requires_grad=True`` receive ``.grad`` after
        :meth:`backward`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = tuple(_parents)
        self._backward = None
        self._op = _op

    # -- bookkeeping ------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self) -> None:
        """Debug assertion: raise if any value is NaN or infinite."""
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor of shape {self.shape}")

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    @staticmethod
    def _make(data, parents, op, backward) -> "Tensor":
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
        if needs:
            out._backward = backward
        return out

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None) -> None:
        """Populate ``.grad`` of every differentiable leaf reachable from self.

        Gradients accumulate additively, both across fan-out inside one
        graph and across repeated calls.
        """
        if not self.requires_grad:
            raise DetachedError("backward() on a tensor that is not recorded on any tape")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = build_tape(self)
        grads = {id(self): _as_array(grad)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of nodes that ``root`` depends on.

    Every node appears after all of its inputs, and exactly once.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, (a, b), "mul",
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._make(out, (a,), "reciprocal", lambda g: (-g * out * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("log of non-finite input")
    ad = a.data
    return Tensor._make(np.log(ad), (a,), "log", lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    safe = np.where(out > 0, out, np.inf)
    return Tensor._make(out, (a,), "sqrt", lambda g: (0.5 * g / safe,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(ad * ad, (a,), "square", lambda g: (2.0 * g * ad,))


def norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    ad = a.data
    out = np.sqrt(np.sum(ad * ad, axis=axis))
    safe = np.expand_dims(np.where(out > 0, out, np.inf), axis)

    def backward(g):
        return (np.expand_dims(g, axis) * ad / safe,)

    return Tensor._make(out, (a,), "norm", backward)


# -- reductions ----------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def max_over_axis(a: Tensor, axis: int = 1) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximizer only."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    res = Tensor._make(out, (a,), "max", backward)
    res.argmax = idx
    return res


# -- softmax family ------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("softmax of non-finite input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), "softmax", backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("log_softmax of non-finite input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), "log_softmax", backward)


# -- linear algebra and shape --------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any number of leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        flat_a = ad.reshape(-1, ad.shape[-1])
        gb = flat_a.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), "matmul", backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", backward)


def concat_channels(tensors) -> Tensor:
    return concat(tensors, axis=-1)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def take(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), "take", backward)


def pick(a: Tensor, labels) -> Tensor:
    """Row-wise gather ``a[i, labels[i]]`` from a 2-D tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(a.shape[0])
    return take(a, (rows, labels))


def sparse_apply(matrix: sp.spmatrix, a: Tensor) -> Tensor:
    """Left-multiply a 2-D tensor by a constant sparse matrix."""
    if matrix.shape[1] != a.shape[0]:
        raise ShapeError(f"sparse_apply: incompatible shapes {matrix.shape} and {a.shape}")
    mt = matrix.T.tocsr()
    return Tensor._make(matrix @ a.data, (a,), "sparse_apply", lambda g: (mt @ g,))


def clip_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)`` elementwise; gradient passes only above the floor."""
    mask = a.data > floor
    return Tensor._make(np.where(mask, a.data, floor), (a,), "clip_min", lambda g: (g * mask,))
