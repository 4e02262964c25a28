"""Random small-shape instances of every differentiable op, for gradcheck."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

OpCase = tuple[Callable[[], Tensor], list[Tensor]]


def _leaf(rng, shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data, requires_grad=True)


def _small_shape(rng, ndim):
    # 3-8 elements total
    while True:
        shape = tuple(int(s) for s in rng.integers(1, 5, size=ndim))
        if 3 <= int(np.prod(shape)) <= 8:
            return shape


def make_case(name: str, rng: np.random.Generator) -> OpCase:
    if name in ("add", "sub", "mul"):
        a = _leaf(rng, _small_shape(rng, 2))
        b = _leaf(rng, (1, a.shape[1]))  # exercises broadcasting
        fn = {"add": T.add, "sub": T.sub, "mul": T.mul}[name]
        return (lambda: fn(a, b)), [a, b]
    if name == "div":
        a = _leaf(rng, _small_shape(rng, 2))
        b = _leaf(rng, a.shape, low=0.5)
        return (lambda: T.div(a, b)), [a, b]
    if name in ("neg", "sigmoid", "exp"):
        a = _leaf(rng, _small_shape(rng, 2))
        fn = {"neg": T.neg, "sigmoid": T.sigmoid, "exp": T.exp}[name]
        return (lambda: fn(a)), [a]
    if name in ("leaky_relu", "relu"):
        # keep entries away from the kink at 0
        data = rng.normal(size=_small_shape(rng, 2))
        data = np.where(np.abs(data) < 0.05, 0.3, data)
        a = Tensor(data, requires_grad=True)
        fn = T.leaky_relu if name == "leaky_relu" else T.relu
        return (lambda: fn(a)), [a]
    if name == "sqrt":
        a = _leaf(rng, _small_shape(rng, 2), low=0.3)
        return (lambda: T.sqrt(a)), [a]
    if name in ("sum", "mean"):
        a = _leaf(rng, _small_shape(rng, 3))
        axis = int(rng.integers(0, 3))
        fn = T.sum_ if name == "sum" else T.mean
        return (lambda: fn(a, axis)), [a]
    if name in ("max_over_axis", "global_max"):
        a = _leaf(rng, _small_shape(rng, 3))
        axes = (1, 2) if name == "global_max" else int(rng.integers(0, 3))
        return (lambda: T.max_over_axis(a, axes)), [a]
    if name == "global_avg":
        a = _leaf(rng, _small_shape(rng, 3))
        return (lambda: T.global_avg(a, (1, 2))), [a]
    if name == "softmax":
        a = _leaf(rng, _small_shape(rng, 2))
        axis = int(rng.integers(0, 2))
        return (lambda: T.softmax(a, axis)), [a]
    if name == "matmul":
        m, k, n = (int(v) for v in rng.integers(1, 4, size=3))
        a = _leaf(rng, (2, m, k))
        b = _leaf(rng, (k, n))
        return (lambda: T.matmul(a, b)), [a, b]
    if name == "reshape":
        a = _leaf(rng, (2, 3))
        return (lambda: T.reshape(a, (3, 2))), [a]
    if name == "transpose":
        a = _leaf(rng, _small_shape(rng, 3))
        perm = tuple(int(v) for v in rng.permutation(3))
        return (lambda: T.transpose(a, perm)), [a]
    if name == "getitem":
        a = _leaf(rng, (4, 2))
        return (lambda: T.getitem(a, (np.array([0, 2, 2]), slice(None)))), [a]
    if name == "slice":
        a = _leaf(rng, (2, 4))
        return (lambda: T.slice_(a, 1, 1, 3)), [a]
    if name == "concat":
        a = _leaf(rng, (2, int(rng.integers(1, 3))))
        b = _leaf(rng, (2, int(rng.integers(1, 3))))
        return (lambda: T.concat([a, b], axis=1)), [a, b]
    if name == "conv2d":
        x = _leaf(rng, (1, 2, 4, 3))
        w = _leaf(rng, (2, 2, 2, 2))
        b = _leaf(rng, (2,))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        return (lambda: T.conv2d(x, w, b, stride=stride, padding=pad)), [x, w, b]
    if name == "conv1d":
        x = _leaf(rng, (1, 2, 4))
        w = _leaf(rng, (2, 2, 3))
        b = _leaf(rng, (2,))
        return (lambda: T.conv1d(x, w, b, padding=1)), [x, w, b]
    if name == "temporal_conv":
        x = _leaf(rng, (1, 4, 2, 2))
        w = _leaf(rng, (2, 2, 2, 3))
        b = _leaf(rng, (2, 2))
        return (lambda: T.temporal_conv(x, w, b, padding=1)), [x, w, b]
    if name == "max_pool2d":
        x = _leaf(rng, (1, 1, 4, 5))
        return (lambda: T.max_pool2d(x, 2)), [x]
    raise KeyError(f"no gradcheck case for op {name!r}")
