"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: every differentiable primitive stores a
closure mapping the output gradient to one gradient per operand, and
:meth:`Tensor.backward` replays those closures in reverse topological order.
Values live in numpy arrays (row-major).  Broadcasting is limited to the
one-sided case where the result has the shape of the larger operand, which
covers scalar arithmetic and bias addition.

Gradients of leaf tensors accumulate across ``backward`` calls; callers
(normally the optimizer) zero them explicitly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, InvalidInputError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "as_tensor",
    "matmul",
    "conv2d",
    "max_pool2d",
    "log_softmax",
    "softmax",
    "relu",
    "detach",
    "no_grad",
    "debug_mode",
    "is_debug",
    "is_grad_enabled",
]


class _Flags:
    grad_enabled = True
    debug = False


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (frozen forward passes)."""
    prev = _Flags.grad_enabled
    _Flags.grad_enabled = False
    try:
        yield
    finally:
        _Flags.grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Turn on contract checks: NaN inputs to ``log_softmax`` raise, and
    gradient-carrying teacher/adversary logits are rejected by the losses."""
    prev = _Flags.debug
    _Flags.debug = enabled
    try:
        yield
    finally:
        _Flags.debug = prev


def is_debug() -> bool:
    return _Flags.debug


def is_grad_enabled() -> bool:
    return _Flags.grad_enabled


def _sum64(a: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    # reductions accumulate in float64 regardless of storage precision
    return np.sum(a, axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype, copy=False)


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An n-dimensional float array that may participate in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_float_array(data, dtype)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._released = False

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str, backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._released = False
        track = _Flags.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    # --------------------------------------------------------------- backward
    def backward(self, grad=None, retain_graph: bool = False) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad.

        ``self`` must be a scalar unless ``grad`` is given.  The graph is
        released afterwards; a second call on the same graph raises
        :class:`ContractError` unless the first call passed ``retain_graph=True``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        if self._released:
            raise ContractError("graph already released; call backward(retain_graph=True) to reuse it")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._released:
                raise ContractError("graph already released; call backward(retain_graph=True) to reuse it")
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if not node.is_leaf:
                    node._released = True
                    node._backward = None

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other):
        return _add(self, as_tensor(other, self.dtype))

    def __radd__(self, other):
        return _add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return _sub(self, as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return _mul(as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return _div(self, as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return _div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return Tensor._node(-self.data, (self,), "neg", lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        p = float(exponent)
        x = self.data

        def back(g):
            return (g * p * np.power(x, p - 1),)

        return Tensor._node(np.power(x, p), (self,), "pow", back)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other, self.dtype))

    def __getitem__(self, index):
        index = _unwrap_index(index)
        x = self.data
        out = x[index]

        def back(g):
            full = np.zeros_like(x)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._node(np.array(out, copy=True), (self,), "index", back)

    # ------------------------------------------------------------- elementwise
    def relu(self):
        return relu(self)

    def exp(self):
        out = np.exp(self.data)
        return Tensor._node(out, (self,), "exp", lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._node(np.log(x), (self,), "log", lambda g: (g / x,))

    def clamp_min(self, floor: float):
        x = self.data
        mask = x > floor
        return Tensor._node(np.where(mask, x, floor).astype(x.dtype), (self,), "clamp_min", lambda g: (g * mask,))

    def clamp(self, lo: float, hi: float):
        x = self.data
        mask = (x > lo) & (x < hi)
        return Tensor._node(np.clip(x, lo, hi), (self,), "clamp", lambda g: (g * mask,))

    # -------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._node(_sum64(self.data, axis, keepdims), (self,), "sum", back)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        shape = self.shape
        total = np.sum(self.data, axis=axis, dtype=np.float64, keepdims=keepdims)
        out = (total / n).astype(self.dtype, copy=False)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, shape).astype(self.dtype),)

        return Tensor._node(np.asarray(out), (self,), "mean", back)

    # ------------------------------------------------------------------ shape
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {src} into {shape}") from exc
        return Tensor._node(out, (self,), "reshape", lambda g: (g.reshape(src),))

    def flatten(self, start_dim: int = 1):
        lead = self.shape[:start_dim]
        return self.reshape(*lead, -1)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unwrap_index(index):
    if isinstance(index, Tensor):
        return index.data.astype(np.intp)
    if isinstance(index, tuple):
        return tuple(i.data.astype(np.intp) if isinstance(i, Tensor) else i for i in index)
    return index


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        shape = None
    if shape is None or shape not in (a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not scalar/bias compatible")
    return shape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(shape) if d == 1 and g.shape[lead + i] != 1
    )
    return _sum64(g, axis=axes, keepdims=True).reshape(shape)


def _add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return Tensor._node(a.data + b.data, (a, b), "add",
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def _sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return Tensor._node(a.data - b.data, (a, b), "sub",
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    x, y = a.data, b.data

    def back(g):
        return (_unbroadcast(g * y, a.shape) if a.requires_grad else None,
                _unbroadcast(g * x, b.shape) if b.requires_grad else None)

    return Tensor._node(x * y, (a, b), "mul", back)


def _div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "div")
    x, y = a.data, b.data

    def back(g):
        return (_unbroadcast(g / y, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * x / (y * y), b.shape) if b.requires_grad else None)

    return Tensor._node(x / y, (a, b), "div", back)


def detach(t: Tensor) -> Tensor:
    """Same values as ``t``, cut off from the graph (a gradient barrier)."""
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._op = "detach"
    out._released = False
    return out


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return Tensor._node(out, (x,), "relu", lambda g: (g * (out > 0),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a @ b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data

    def back(g):
        return (g @ y.T if a.requires_grad else None,
                x.T @ g if b.requires_grad else None)

    return Tensor._node(x @ y, (a, b), "matmul", back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable ``x - max - log(sum(exp(x - max)))`` along ``axis``."""
    if x.shape[axis] < 2:
        raise ShapeError(f"log_softmax needs at least 2 classes along axis {axis}, got shape {x.shape}")
    if _Flags.debug and not np.all(np.isfinite(x.data)):
        raise InvalidInputError("log_softmax received non-finite values")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True, dtype=np.float64)).astype(x.dtype)
    out = z - lse

    def back(g):
        p = np.exp(out)
        return (g - p * _sum64(g, axis=axis, keepdims=True),)

    return Tensor._node(out, (x,), "log_softmax", back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis).exp()


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, NCHW input and OIHW kernel (im2col)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    b, c, h, w = x.shape
    o, ck, kh, kw = weight.shape
    if ck != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels but kernel {weight.shape} expects {ck}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape} (pad={pad})")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    L = oh * ow
    # columns laid out (batch, c*kh*kw, oh*ow) so the product lands directly in NCHW
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, L)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data.reshape(1, o, 1)
    out = out.reshape(b, o, oh, ow)

    def back(g):
        g3 = g.reshape(b, o, L)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape).astype(weight.dtype)
        if bias is not None and bias.requires_grad:
            gb = _sum64(g3, axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(b, c, kh, kw, oh, ow)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._node(out, parents, "conv2d", back)


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel); trailing rows/cols that do
    not fill a window are dropped.  Ties route the gradient to the first max."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    k = int(kernel)
    oh, ow = h // k, w // k
    if oh == 0 or ow == 0:
        raise ShapeError(f"max_pool2d: window {k} larger than input {x.shape}")
    offsets = [(i, j) for i in range(k) for j in range(k)]
    views = [x.data[:, :, i:i + oh * k:k, j:j + ow * k:k] for i, j in offsets]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def back(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(offsets, views):
            hit = (v == out) & ~taken
            taken |= hit
            full[:, :, i:i + oh * k:k, j:j + ow * k:k] = g * hit
        return (full,)

    return Tensor._node(out, (x,), "max_pool2d", back)
