"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op builds a fresh graph node holding its parents and a closure that maps
the output gradient to one gradient per parent. ``backward`` walks the graph
once in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ConfigError, NumericalError, ShapeError, UsageError
from . import kernels

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(f"{bad} non-finite value(s) produced by {where}")


class Tensor:
    """N-d array of float64 with optional gradient tracking.

    Treat ``data`` as immutable; ops never write to their inputs. Optimizers
    rebind ``data`` on leaves instead of mutating the buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)  # copy: callers may keep mutating theirs
        _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
        data = np.asarray(data, dtype=DTYPE)
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all of it routes through the functions below
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return max_over_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (_norm_axis(axis, ndim),)
    return tuple(sorted(_norm_axis(a, ndim) for a in axis))


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NumericalError("division by zero in div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._from_op(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


LEAKY_SLOPE = 0.01


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return Tensor._from_op(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(DTYPE)
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sqrt(a) -> Tensor:
    """Square root whose gradient at exactly 0 is taken as 0 (subgradient)."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericalError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return Tensor._from_op(out, (a,), bw, "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


# --------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._from_op(out, (a,), bw, "mean")


def max_over_axis(a, axis, keepdims: bool = False) -> Tensor:
    """Max over one or more axes; gradient goes to the first maximal entry."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    keep = [i for i in range(a.ndim) if i not in axes]
    moved = a.data.transpose(keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes)

    def bw(g):
        g = np.asarray(g)
        if keepdims:
            g = np.squeeze(g, axis=axes)
        gflat = np.zeros(flat.shape, dtype=DTYPE)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (gmoved.transpose(np.argsort(keep + list(axes))),)

    return Tensor._from_op(out, (a,), bw, "max_over_axis")


def global_avg(a, axes) -> Tensor:
    return mean(a, axes, keepdims=False)


def global_max(a, axes) -> Tensor:
    return max_over_axis(a, axes, keepdims=False)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return Tensor._from_op(out, (a,), bw, "softmax")


# --------------------------------------------------------------------------
# linear algebra and layout


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics (batched, broadcasting over leading dims)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape} (axes -1 vs -2)")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(_norm_axis(x, a.ndim) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out), (a,), bw, "getitem")


def slice_(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}) out of range for axis {ax} of size {a.shape[ax]}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return Tensor._from_op(a.data[index].copy(), (a,), bw, "slice")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of zero tensors")
    ndim = ts[0].ndim
    ax = _norm_axis(axis, ndim)
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"ragged concat along axis {ax}: {[t.shape for t in ts]}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


# --------------------------------------------------------------------------
# convolution and pooling


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``x[B,Cin,H,W]`` with ``w[Cout,Cin,kh,kw]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input axis 1 = {x.shape[1]}, weight axis 1 = {w.shape[1]}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    H, W = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if w.shape[2] > H or w.shape[3] > W:
        raise ShapeError(f"conv2d kernel {w.shape[2:]} larger than padded input ({H}, {W}) on axes 2/3")
    out = kernels.conv2d_forward(x.data, w.data, stride, padding)

    def bw(g):
        gx, gw = kernels.conv2d_backward(x.data, w.data, g, stride, padding)
        return gx, gw

    y = Tensor._from_op(out, (x, w), bw, "conv2d")
    if b is not None:
        y = add(y, reshape(b, (1, -1, 1, 1)))
    return y


def conv1d(x, w, b=None, padding: int = 0) -> Tensor:
    """1-D cross-correlation, ``x[B,Cin,L]`` with ``w[Cout,Cin,k]``, stride 1."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-d input and weight, got {x.shape} and {w.shape}")
    if padding:
        # pad only the length axis; conv2d padding would also pad the dummy height axis
        z = Tensor(np.zeros(x.shape[:2] + (padding,)))
        x = concat([z, x, z], axis=2)
    y = conv2d(reshape(x, x.shape[:2] + (1, x.shape[2])), reshape(w, w.shape[:2] + (1, w.shape[2])))
    y = reshape(y, (y.shape[0], y.shape[1], y.shape[3]))
    if b is not None:
        y = add(y, reshape(b, (1, -1, 1)))
    return y


def same_padding(kernel: int) -> int:
    """Padding that keeps sequence length for an odd ``kernel``."""
    if kernel % 2 == 0:
        raise ConfigError(f"same-length convolution needs an odd kernel, got {kernel}")
    return kernel // 2


def temporal_conv(x, w, b=None, padding: int = 1) -> Tensor:
    """Unshared per-part conv along time: ``x[B,N,C,M]``, ``w[M,Cout,Cin,k]``.

    Part ``m`` is convolved over the frame axis with its own kernel ``w[m]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"temporal_conv expects 4-d input and weight, got {x.shape} and {w.shape}")
    if w.shape[0] != x.shape[3]:
        raise ShapeError(f"temporal_conv part count: input axis 3 = {x.shape[3]}, weight axis 0 = {w.shape[0]}")
    if w.shape[2] != x.shape[2]:
        raise ShapeError(f"temporal_conv channels: input axis 2 = {x.shape[2]}, weight axis 2 = {w.shape[2]}")
    if w.shape[3] > x.shape[1] + 2 * padding:
        raise ShapeError(f"temporal kernel {w.shape[3]} longer than padded sequence {x.shape[1] + 2 * padding}")
    out = kernels.temporal_conv_forward(x.data, w.data, padding)

    def bw(g):
        return kernels.temporal_conv_backward(x.data, w.data, g, padding)

    y = Tensor._from_op(out, (x, w), bw, "temporal_conv")
    if b is not None:
        # b: [M, Cout]
        y = add(y, reshape(transpose(b, (1, 0)), (1, 1, b.shape[1], b.shape[0])))
    return y


def max_pool2d(x, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling over the last two axes of ``x[B,C,H,W]``; floor output size."""
    x = as_tensor(x)
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    Ho, Wo = (H - kernel) // stride + 1, (W - kernel) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"max_pool2d kernel {kernel} larger than input ({H}, {W})")
    # stack the kernel*kernel candidate planes, row-major over the window
    planes = np.stack(
        [x.data[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
         for i in range(kernel) for j in range(kernel)],
        axis=-1,
    )
    idx = planes.argmax(axis=-1)
    out = np.take_along_axis(planes, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        for pos in range(kernel * kernel):
            i, j = divmod(pos, kernel)
            gx[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += np.where(
                idx == pos, g, 0.0)
        return (gx,)

    return Tensor._from_op(out, (x,), bw, "max_pool2d")


# --------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Returns the same gradients as a ``{leaf: array}`` map.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")
    order = _topological(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward of {node.op}")
            prev = pending.get(id(parent))
            pending[id(parent)] = pg if prev is None else prev + pg
    return leaves
