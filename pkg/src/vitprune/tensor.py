"""Dense float64 tensors with reverse-mode automatic differentiation.

A small tape: every operation whose inputs require gradients records its
parents and a backward closure on the output. ``backward`` walks the graph
from the loss in reverse topological order and accumulates gradients into
``.grad`` buffers. Everything is 64-bit and single-threaded, which keeps
gradient checks tight and replay bit-deterministic.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "MacCounter",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "concat",
    "softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "backward",
    "zero_grads",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(ValueError):
    """An operation received non-finite values."""


# Counting hooks, see MacCounter. Kept as a list so contexts nest.
_MAC_HOOKS: list["MacCounter"] = []

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class MacCounter:
    """Counts multiply-accumulate operations of every matmul run inside
    the context. One batched matmul of shapes (..., m, k) x (..., k, n)
    contributes batch * m * k * n."""

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _MAC_HOOKS.append(self)
        return self

    def __exit__(self, *exc):
        _MAC_HOOKS.remove(self)
        return False


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """A dense float64 value, optionally carrying a gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], bwd) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._bwd = bwd
        else:
            out.requires_grad = False
            out._parents = ()
            out._bwd = None
        return out

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy)."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def narrow(self, axis, start, length):
        return narrow(self, axis, start, length)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def backward(self, params=None):
        backward(self, params)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcastable(a_shape, b_shape, op: str):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast") from None


# -- primitives -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or higher operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    _check_finite(a.data, "matmul lhs")
    _check_finite(b.data, "matmul rhs")
    out_data = np.matmul(a.data, b.data)
    if _MAC_HOOKS:
        batch = 1
        for extent in out_data.shape[:-2]:
            batch *= extent
        macs = batch * out_data.shape[-2] * a.shape[-1] * out_data.shape[-1]
        for hook in _MAC_HOOKS:
            hook.total += macs

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return Tensor._result(out_data, (a, b), bwd)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcastable(a.shape, b.shape, "add")
    _check_finite(a.data, "add lhs")
    _check_finite(b.data, "add rhs")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return Tensor._result(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcastable(a.shape, b.shape, "sub")
    _check_finite(a.data, "sub lhs")
    _check_finite(b.data, "sub rhs")
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return Tensor._result(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    """Elementwise product, broadcasting; scalars allowed."""
    a, b = _wrap(a), _wrap(b)
    _broadcastable(a.shape, b.shape, "mul")
    _check_finite(a.data, "mul lhs")
    _check_finite(b.data, "mul rhs")
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._result(out_data, (a, b), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for shape {a.shape}")
    out_data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        _accumulate(a, np.transpose(g, inverse))

    return Tensor._result(out_data, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    old_shape = a.shape

    def bwd(g):
        _accumulate(a, g.reshape(old_shape))

    return Tensor._result(out_data, (a,), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of extent ``length`` along ``axis``."""
    a = _wrap(a)
    if not 0 <= axis < a.ndim:
        raise ShapeError(f"narrow axis {axis} out of range for shape {a.shape}")
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow range [{start}, {start + length}) exceeds extent {a.shape[axis]} of shape {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out_data = a.data[index].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accumulate(a, full)

    return Tensor._result(out_data, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and o != b for i, (o, b) in enumerate(zip(other, base))
        ):
            raise ShapeError(f"concat shapes {[t.shape for t in ts]} differ off axis {axis}")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def bwd(g):
        offset = 0
        for t, ext in zip(ts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + ext)
            _accumulate(t, g[tuple(index)])
            offset += ext

    return Tensor._result(out_data, tuple(ts), bwd)


def expand(a, shape) -> Tensor:
    """Broadcast to ``shape`` (materialized)."""
    a = _wrap(a)
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))

    return Tensor._result(out_data, (a,), bwd)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    axes = _axis_tuple(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def bwd(g):
        gk = g
        if not keepdims:
            expand_shape = list(in_shape)
            for ax in axes:
                expand_shape[ax] = 1
            gk = g.reshape(expand_shape)
        _accumulate(a, np.broadcast_to(gk, in_shape).copy())

    return Tensor._result(out_data, (a,), bwd)


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out_data = a.data.mean(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def bwd(g):
        gk = g
        if not keepdims:
            expand_shape = list(in_shape)
            for ax in axes:
                expand_shape[ax] = 1
            gk = g.reshape(expand_shape)
        _accumulate(a, np.broadcast_to(gk, in_shape).copy() / count)

    return Tensor._result(out_data, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rows along ``axis`` sum to 1."""
    a = _wrap(a)
    _check_finite(a.data, "softmax input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return Tensor._result(out_data, (a,), bwd)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean, unit variance along ``axis`` (no affine)."""
    a = _wrap(a)
    if a.shape[axis % a.ndim] < 1:
        raise ShapeError(f"layer_norm axis extent must be >= 1, got shape {a.shape}")
    _check_finite(a.data, "layer_norm input")
    mean = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = centered * inv
    _check_finite(out_data, "layer_norm output")

    def bwd(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * out_data).mean(axis=axis, keepdims=True)
        _accumulate(a, inv * (g - gm - out_data * gy))

    return Tensor._result(out_data, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = _wrap(a)
    _check_finite(a.data, "gelu input")
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out_data = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        _accumulate(a, g * local)

    return Tensor._result(out_data, (a,), bwd)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax of the true class over the batch."""
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got shape {logits.shape}")
    _check_finite(logits.data, "cross_entropy logits")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy labels shape {labels.shape} does not match batch {logits.shape[0]}"
        )
    labels = labels.astype(np.int64)
    n, classes = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= classes:
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise ShapeError(f"cross_entropy label {bad} out of range for {classes} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per_sample = lse - shifted[np.arange(n), labels]
    out_data = np.asarray(per_sample.mean())

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, (float(g) / n) * p)

    return Tensor._result(out_data, (logits,), bwd)


# -- backward pass ---------------------------------------------------------


def _topo_order(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
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


def backward(loss: Tensor, params=None) -> None:
    """Populate ``.grad`` on every gradient-requiring tensor reachable from
    ``loss``. Grads of reachable tensors are reset first, so replaying a
    tape is bit-deterministic. Tensors in ``params`` that the loss does not
    reach receive zero gradients."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    _check_finite(loss.data, "loss")
    order = _topo_order(loss)
    reached = {id(t) for t in order}
    for t in order:
        t.grad = None
    if params is not None:
        for p in params:
            if id(p) not in reached:
                p.grad = None
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for t in reversed(order):
            if t._bwd is not None:
                t._bwd(t.grad)
    for t in order:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
