"""Dense float64 tensors with reverse-mode autodiff and a MAC meter.

Every op builds a node in the graph when any input requires grad. Calling
``Tensor.backward`` orders the graph topologically and runs each node's
backward rule once, in reverse.

Only matmuls are counted on the FLOP meter (one multiply-accumulate = one
FLOP). Softmax, layer norm, GELU and elementwise ops are free by convention.

Inside ``meta_mode()`` ops only propagate shapes: tensors are zero-stride
views and nothing is computed, but the meter still counts. This is how the
cost model runs Base-sized models at 896x896 in milliseconds.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import DuplicateIndex, IndexOutOfRange, ShapeMismatch

__all__ = [
    "Tensor",
    "FlopMeter",
    "FLOP_METER",
    "meta_mode",
    "is_meta",
    "no_grad",
    "tensor",
    "matmul",
    "add",
    "mul",
    "scale",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gather_rows",
    "mean",
    "sum_",
    "reshape",
    "transpose",
    "concat",
    "select",
    "topological_order",
]


class FlopMeter:
    """Global multiply-accumulate counter."""

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def read(self) -> int:
        return self.count

    def reset(self) -> int:
        self.count = 0
        return self.count

    @contextlib.contextmanager
    def measure(self):
        """Yield a one-element list that holds the MACs counted inside the block."""
        start = self.count
        box = [0]
        try:
            yield box
        finally:
            box[0] = self.count - start


FLOP_METER = FlopMeter()

_state = {"meta": 0, "grad": True}


@contextlib.contextmanager
def meta_mode():
    _state["meta"] += 1
    try:
        yield
    finally:
        _state["meta"] -= 1


def is_meta() -> bool:
    return _state["meta"] > 0


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def _meta_array(shape) -> np.ndarray:
    return np.broadcast_to(np.float64(0.0), tuple(int(s) for s in shape))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every node upstream."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeMismatch(f"seed grad {grad.shape} != {self.shape}")
        order = topological_order(self)
        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _state["grad"] and not is_meta() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each after all of its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``.

    Records ``m*k*n`` MACs per batch element on ``FLOP_METER``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    m, k = a.shape[-2:]
    k2, n = b.shape[-2:]
    if k != k2:
        raise ShapeMismatch(f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeMismatch(f"batch extents not broadcastable: {a.shape} @ {b.shape}") from exc
    FLOP_METER.add(math.prod(batch) * m * k * n)
    out_shape = tuple(batch) + (m, n)
    if is_meta():
        return Tensor(_meta_array(out_shape))

    if b.ndim == 2:
        # weight matrix: fold all leading extents into one GEMM
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(out_shape)

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node(out, (a, b), backward)

    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if is_meta():
        return Tensor(_meta_array(np.broadcast_shapes(a.shape, b.shape)))
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} + {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    if is_meta():
        return Tensor(_meta_array(np.broadcast_shapes(a.shape, b.shape)))
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} * {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    if is_meta():
        return Tensor(_meta_array(a.shape))
    return _node(a.data * c, (a,), lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation; the backward differentiates the approximation."""
    if is_meta():
        return Tensor(_meta_array(x.shape))
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v * v * v))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _node(out, (x,), backward)


# --------------------------------------------------------------------------
# normalizations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if is_meta():
        return Tensor(_meta_array(x.shape))
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if is_meta():
        return Tensor(_meta_array(x.shape))
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm over {d} with gain {gain.shape}, bias {bias.shape}")
    if is_meta():
        return Tensor(_meta_array(x.shape))
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), backward)


# --------------------------------------------------------------------------
# indexing and layout


def _check_indices(idx: np.ndarray, n: int) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexOutOfRange(f"row index outside [0, {n})")
    rows = idx.reshape(-1, idx.shape[-1]) if idx.ndim else idx.reshape(1, 1)
    srt = np.sort(rows, axis=-1)
    if rows.shape[-1] > 1 and np.any(srt[:, 1:] == srt[:, :-1]):
        raise DuplicateIndex("gather indices must be unique")


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows along axis 1 of ``x[B, N, d]``.

    ``indices`` is either one index list shared by the batch or a ``[B, k]``
    array giving each sample its own rows. The backward pass scatters into
    the source rows and leaves every other row at zero.
    """
    if x.ndim != 3:
        raise ShapeMismatch(f"gather_rows expects [B, N, d], got {x.shape}")
    B, N, d = x.shape
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim not in (1, 2) or (idx.ndim == 2 and idx.shape[0] != B):
        raise ShapeMismatch(f"indices of shape {idx.shape} do not fit batch {B}")
    _check_indices(idx, N)
    k = idx.shape[-1]
    if is_meta():
        return Tensor(_meta_array((B, k, d)))
    if idx.ndim == 1:
        out = x.data[:, idx, :]

        def backward(g):
            gx = np.zeros(x.shape)
            gx[:, idx, :] = g
            return (gx,)
    else:
        rows = np.arange(B)[:, None]
        out = x.data[rows, idx, :]

        def backward(g):
            gx = np.zeros(x.shape)
            gx[rows, idx, :] = g
            return (gx,)

    return _node(out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        out_shape: tuple[int, ...] = ()
        count = x.data.size
    else:
        ax = axis % x.ndim
        out_shape = x.shape[:ax] + x.shape[ax + 1 :]
        count = x.shape[ax]
    if is_meta():
        return Tensor(_meta_array(out_shape))
    out = np.asarray(x.data.mean(axis=axis))

    def backward(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape) / count,)

    return _node(out, (x,), backward)


def sum_(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        out_shape: tuple[int, ...] = ()
    else:
        ax = axis % x.ndim
        out_shape = x.shape[:ax] + x.shape[ax + 1 :]
    if is_meta():
        return Tensor(_meta_array(out_shape))
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _node(out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = math.prod(s for s in shape if s != -1)
        shape = tuple(x.data.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != math.prod(x.shape):
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}")
    if is_meta():
        return Tensor(_meta_array(shape))
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    if is_meta():
        return Tensor(_meta_array(tuple(x.shape[a] for a in axes)))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ax = axis % parts[0].ndim
    sizes = [p.shape[ax] for p in parts]
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or p.shape[:ax] + p.shape[ax + 1 :] != parts[0].shape[:ax] + parts[0].shape[ax + 1 :]:
            raise ShapeMismatch(f"cannot concat {[q.shape for q in parts]} along {axis}")
    if is_meta():
        shape = list(parts[0].shape)
        shape[ax] = sum(sizes)
        return Tensor(_meta_array(shape))
    out = np.concatenate([p.data for p in parts], axis=ax)
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _node(out, parts, backward)


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """``x`` indexed at a single position along ``axis`` (the axis is removed)."""
    ax = axis % x.ndim
    if not 0 <= index < x.shape[ax]:
        raise IndexOutOfRange(f"index {index} outside axis of extent {x.shape[ax]}")
    if is_meta():
        return Tensor(_meta_array(x.shape[:ax] + x.shape[ax + 1 :]))
    out = np.take(x.data, index, axis=ax)

    def backward(g):
        gx = np.zeros(x.shape)
        slicer = [slice(None)] * x.ndim
        slicer[ax] = index
        gx[tuple(slicer)] = g
        return (gx,)

    return _node(out, (x,), backward)
