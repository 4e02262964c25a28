"""Multiscale spatial-temporal feature extraction over part sequences.

Input layout is ``[B, N, C, M]`` (sequences, frames, channels, parts). Three
branches (part, local, global) each return ``[B, N, C, M]``; their outputs are
concatenated on the part axis and max-pooled over frames to ``[B, C, 3M]``.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .numerics import (
    Module,
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d,
    leaky_relu,
    matmul,
    max_over_axis,
    mean,
    mul,
    reshape,
    same_padding,
    sigmoid,
    softmax,
    temporal_conv,
    transpose,
)
from .numerics.module import he_normal, xavier_normal, zeros

TEMPORAL_KERNEL = 3


class TemporalConv(Module):
    """M unshared kernel-3 convs along frames, one per part, C -> C channels."""

    def __init__(self, channels: int, parts: int, rng, kernel: int = TEMPORAL_KERNEL):
        self.padding = same_padding(kernel)
        self.weight = he_normal(rng, (parts, channels, channels, kernel), channels * kernel)
        self.bias = zeros((parts, channels))

    def forward(self, x: Tensor) -> Tensor:
        return temporal_conv(x, self.weight, self.bias, padding=self.padding)

    def set_identity(self) -> None:
        M, C, _, k = self.weight.shape
        w = np.zeros((M, C, C, k))
        w[:, np.arange(C), np.arange(C), k // 2] = 1.0
        self.weight.data = w
        self.bias.data = np.zeros_like(self.bias.data)


class STStage(Module):
    """Spatial conv across parts (kernel ``s_size``) then per-part temporal convs."""

    def __init__(self, channels: int, parts: int, s_size: int, rng, activate: bool = True, slope: float = 0.01):
        self.parts = parts
        self.s_size = s_size
        self.s_padding = same_padding(s_size)
        self.activate = activate
        self.slope = slope
        self.spatial_w = he_normal(rng, (channels, channels, s_size), channels * s_size)
        self.spatial_b = zeros((channels,))
        self.temporal = TemporalConv(channels, parts, rng)

    def spatial(self, x: Tensor) -> Tensor:
        B, N, C, M = x.shape
        y = conv1d(reshape(x, (B * N, C, M)), self.spatial_w, self.spatial_b, padding=self.s_padding)
        return reshape(y, (B, N, C, M))

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[3] != self.parts:
            raise ShapeError(f"stage built for M={self.parts} parts, got input {x.shape}")
        y = self.temporal(self.spatial(x))
        return leaky_relu(y, self.slope) if self.activate else y

    def set_identity(self) -> None:
        C = self.spatial_w.shape[0]
        w = np.zeros((C, C, self.s_size))
        w[np.arange(C), np.arange(C), self.s_size // 2] = 1.0
        self.spatial_w.data = w
        self.spatial_b.data = np.zeros(C)
        self.temporal.set_identity()


class ScaleBranch(Module):
    """Two chained stages with the same spatial kernel (part: 1, local: 3)."""

    def __init__(self, channels: int, parts: int, s_size: int, rng, activate: bool = True, slope: float = 0.01):
        self.stage1 = STStage(channels, parts, s_size, rng, activate, slope)
        self.stage2 = STStage(channels, parts, s_size, rng, activate, slope)

    def forward(self, x) -> Tensor:
        return self.stage2(self.stage1(x))


def pooled_self_attention(pool: Tensor, w_k: Tensor, w_q: Tensor, w_v: Tensor) -> Tensor:
    """Self-attention of ``pool[...,2,M]`` over its M parts -> ``[...,2,M]``."""
    keys = matmul(w_k, pool)
    queries = matmul(w_q, pool)
    values = matmul(w_v, pool)
    nd = pool.ndim
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    scores = matmul(transpose(keys, swap), queries) * (1.0 / np.sqrt(2.0))  # [...,M,M]
    attended = matmul(softmax(scores, axis=-1), transpose(values, swap))  # [...,M,2]
    return transpose(attended, swap)


class GlobalBranch(Module):
    """Channel-pooled part attention gates the input, then temporal + part-level stages."""

    def __init__(self, channels: int, parts: int, rng, activate: bool = True, slope: float = 0.01):
        self.parts = parts
        self.w_k = xavier_normal(rng, (2, 2), 2, 2)
        self.w_q = xavier_normal(rng, (2, 2), 2, 2)
        self.w_v = xavier_normal(rng, (2, 2), 2, 2)
        self.gate_w = xavier_normal(rng, (1, 2, 1), 2, 1)
        self.gate_b = zeros((1,))
        self.temporal = TemporalConv(channels, parts, rng)
        self.stage = STStage(channels, parts, 1, rng, activate, slope)

    def attention(self, x: Tensor) -> Tensor:
        """Gate in (0, 1) of shape ``[B,N,1,M]``."""
        B, N, C, M = x.shape
        pool = concat([mean(x, 2, keepdims=True), max_over_axis(x, 2, keepdims=True)], axis=2)  # [B,N,2,M]
        pool_a = pooled_self_attention(pool, self.w_k, self.w_q, self.w_v)
        logits = conv1d(reshape(pool_a, (B * N, 2, M)), self.gate_w, self.gate_b)
        return reshape(sigmoid(logits), (B, N, 1, M))

    def reweight(self, x: Tensor, gate: Tensor) -> Tensor:
        return add(mul(gate, x), x)

    def forward(self, x, gate: Tensor | None = None) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[3] != self.parts:
            raise ShapeError(f"global branch built for M={self.parts} parts, got input {x.shape}")
        if gate is None:
            gate = self.attention(x)
        return self.stage(self.temporal(self.reweight(x, gate)))


class MSSTFE(Module):
    def __init__(self, channels: int, parts: int, rng, activate: bool = True, slope: float = 0.01):
        self.parts = parts
        self.part = ScaleBranch(channels, parts, 1, rng, activate, slope)
        self.local = ScaleBranch(channels, parts, 3, rng, activate, slope)
        self.glob = GlobalBranch(channels, parts, rng, activate, slope)

    def branches(self, x) -> tuple[Tensor, Tensor, Tensor]:
        x = as_tensor(x)
        return self.part(x), self.local(x), self.glob(x)

    def forward(self, x) -> Tensor:
        """``[B,N,C,M]`` -> ``[B,C,3M]`` (or ``[N,C,M]`` -> ``[C,3M]``)."""
        x = as_tensor(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = reshape(x, (1,) + x.shape)
        out = max_over_axis(concat(self.branches(x), axis=3), 1)
        return reshape(out, out.shape[1:]) if squeeze else out
