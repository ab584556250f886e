"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Define-by-run: every primitive records a node on the active graph, and
``backward`` replays the recorded nodes in exact reverse execution order.
The graph is rebuilt on every forward pass; call :func:`reset_graph` at the
start of each training step (or wrap inference in :func:`no_grad`).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """The autodiff graph was used outside its contract."""


class Tensor:
    """A dense n-dimensional float array with an optional gradient slot.

    Data is 32-bit by default; pass ``dtype=np.float64`` explicitly for
    higher-precision graphs (used by the test oracles only).
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar; the module-level functions are the primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(arr: np.ndarray) -> Tensor:
    """Wrap an ndarray without the float32 default cast (internal op outputs)."""
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    t.requires_grad = False
    return t


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Ordered record of executed primitives; backward walks it in reverse."""

    __slots__ = ("nodes",)

    def __init__(self):
        # each node: (output tensor, input tensors, backward closure)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE = Graph()
_GRAD_ENABLED = True


def active_graph() -> Graph:
    return _ACTIVE


def reset_graph() -> None:
    """Discard all recorded nodes; call before each fresh forward pass."""
    _ACTIVE.nodes.clear()


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE.nodes.append((out, inputs, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Idempotent per graph: grads of all tensors on the active graph are
    cleared first, so repeated calls reproduce identical gradients.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    nodes = _ACTIVE.nodes
    for out, inputs, _ in nodes:
        out.grad = None
        for t in inputs:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(nodes):
        if out.grad is not None:
            fn(out.grad)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reverse numpy broadcasting: sum ``g`` down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.shape[-1] != b.shape[-2]
        or a.shape[:-2] != b.shape[:-2]
    ):
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    out = _wrap(a.data @ b.data)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g @ b.data.swapaxes(-1, -2))
        _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _record(out, (a, b), _backward)


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _wrap(a.data + b.data)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, _sum_to_shape(g, a.shape))
        _accumulate(b, _sum_to_shape(g, b.shape))

    return _record(out, (a, b), _backward)


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _wrap(a.data * b.data)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, _sum_to_shape(g * b.data, a.shape))
        _accumulate(b, _sum_to_shape(g * a.data, b.shape))

    return _record(out, (a, b), _backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = _wrap(a.data * a.data.dtype.type(s))

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g * s)

    return _record(out, (a,), _backward)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _wrap(np.maximum(a.data, 0))

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g * (a.data > 0))

    return _record(out, (a,), _backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _wrap(y)

    def _backward(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _record(out, (a,), _backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _wrap(y)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _record(out, (a,), _backward)


def topk(a: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Top-k along the last axis, values sorted descending.

    Ties break toward the lower index, so equal inputs give deterministic,
    reproducible selections. Gradients flow to the selected positions only.
    Returns (values, indices); indices are a plain int array.
    """
    a = _as_tensor(a)
    n = a.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"topk k={k} out of range for last-axis size {n}")
    order = np.argsort(-a.data, axis=-1, kind="stable")[..., :k]
    values = np.take_along_axis(a.data, order, axis=-1)
    out = _wrap(values)

    def _backward(g: np.ndarray) -> None:
        da = np.zeros_like(a.data)
        np.put_along_axis(da, order, g.astype(a.data.dtype), axis=-1)
        _accumulate(a, da)

    return _record(out, (a,), _backward), order


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = _wrap(xhat * gain.data + bias.data)

    def _backward(g: np.ndarray) -> None:
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _accumulate(x, dx)

    return _record(out, (x, gain, bias), _backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _wrap(a.data.sum(axis=axis, keepdims=keepdims))

    def _backward(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _record(out, (a,), _backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = _wrap(a.data.reshape(shape))

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _record(out, (a,), _backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = _wrap(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g.transpose(inverse))

    return _record(out, (a,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat requires at least one tensor")
    out = _wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _record(out, tuple(tensors), _backward)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows (axis 0); duplicate indices are allowed."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = _wrap(a.data[idx])

    def _backward(g: np.ndarray) -> None:
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g.astype(a.data.dtype))
        _accumulate(a, da)

    return _record(out, (a,), _backward)


def scatter_rows(a: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Add rows of ``a`` into a zero tensor of ``n_rows`` rows at ``idx``."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = (n_rows,) + a.shape[1:]
    buf = np.zeros(shape, dtype=a.data.dtype)
    np.add.at(buf, idx, a.data)
    out = _wrap(buf)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, g[idx])

    return _record(out, (a,), _backward)


def take_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather elements a[rows[i], cols[i]] from a 2-d tensor."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = _wrap(a.data[rows, cols])

    def _backward(g: np.ndarray) -> None:
        da = np.zeros_like(a.data)
        np.add.at(da, (rows, cols), g.astype(a.data.dtype))
        _accumulate(a, da)

    return _record(out, (a,), _backward)


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None
