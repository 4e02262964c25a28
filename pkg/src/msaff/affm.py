"""Adaptive feature fusion: silhouette parts attend over skeleton parts.

Each of ``h`` heads projects silhouette features to keys and skeleton features
to queries and values (``d = D / h / r`` channels each), scores every
(silhouette part, skeleton part) pair, and returns a per-silhouette-part
mixture of skeleton values. Heads are concatenated and projected back to D;
a pooled skeleton summary (GAP + GMP over skeleton parts) is added as a bias,
and a fully connected layer fuses ``[silhouette; weighted skeleton]`` per part.
"""

from __future__ import annotations

import numpy as np

from .errors import PairingError, ShapeError
from .numerics import (
    Module,
    Tensor,
    add,
    as_tensor,
    concat,
    matmul,
    max_over_axis,
    mean,
    reshape,
    softmax,
    transpose,
)
from .numerics.module import xavier_normal, zeros

# scores are [.., MI, MS]; normalizing over the last axis spreads each
# silhouette part's attention across skeleton parts
ATTENTION_AXIS = -1


class AFFM(Module):
    """Parameters: per-head ``W_K, W_Q, W_V`` ([h, d, D]), ``W_O`` ([h*d, D]), FC ([D, 2D] + bias)."""

    def __init__(self, channels: int, heads: int = 4, compression: int = 2, rng: np.random.Generator | None = None):
        if channels % heads or (channels // heads) % compression:
            raise ShapeError(f"D={channels} does not split into {heads} heads with compression {compression}")
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.heads = heads
        self.compression = compression
        d = self.head_dim
        self.w_k = xavier_normal(rng, (heads, d, channels), channels, d)
        self.w_q = xavier_normal(rng, (heads, d, channels), channels, d)
        self.w_v = xavier_normal(rng, (heads, d, channels), channels, d)
        self.w_o = xavier_normal(rng, (heads * d, channels), heads * d, channels)
        self.fc_w = xavier_normal(rng, (channels, 2 * channels), 2 * channels, channels)
        self.fc_b = zeros((channels, 1))

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads // self.compression

    def forward(self, a_img, a_ske, return_attention: bool = False):
        return fuse(a_img, a_ske, self, return_attention)


def fuse(a_img, a_ske, params: AFFM, return_attention: bool = False):
    """Fuse ``a_img[...,D,MI]`` with ``a_ske[...,D,MS]`` -> ``[...,D,MI]``.

    Leading axes are batch axes and must match. With ``return_attention`` the
    per-head attention ``[B,h,MI,MS]`` and head outputs ``[B,h,MI,d]`` are also
    returned (batch axes flattened).
    """
    a_img, a_ske = as_tensor(a_img), as_tensor(a_ske)
    if a_img.ndim < 2 or a_ske.ndim < 2:
        raise ShapeError(f"AFFM inputs must be [...,D,M], got {a_img.shape} and {a_ske.shape}")
    D = params.channels
    if a_img.shape[-2] != D or a_ske.shape[-2] != D:
        raise ShapeError(f"AFFM built for D={D}, got channel axes {a_img.shape[-2]} and {a_ske.shape[-2]}")
    lead = a_img.shape[:-2]
    if a_ske.shape[:-2] != lead:
        raise ShapeError(f"AFFM batch axes differ: {a_img.shape} vs {a_ske.shape}")
    MI, MS = a_img.shape[-1], a_ske.shape[-1]
    B = int(np.prod(lead)) if lead else 1
    x_img = reshape(a_img, (B, 1, D, MI))
    x_ske = reshape(a_ske, (B, 1, D, MS))
    h, d = params.heads, params.head_dim

    keys = matmul(params.w_k, x_img)  # [B,h,d,MI]
    queries = matmul(params.w_q, x_ske)  # [B,h,d,MS]
    values = matmul(params.w_v, x_ske)  # [B,h,d,MS]
    scores = matmul(transpose(keys, (0, 1, 3, 2)), queries) * (1.0 / np.sqrt(d))  # [B,h,MI,MS]
    attn = softmax(scores, axis=ATTENTION_AXIS)
    heads = matmul(attn, transpose(values, (0, 1, 3, 2)))  # [B,h,MI,d]
    stacked = reshape(transpose(heads, (0, 2, 1, 3)), (B, MI, h * d))
    weight_ske = transpose(matmul(stacked, params.w_o), (0, 2, 1))  # [B,D,MI]

    ske = reshape(a_ske, (B, D, MS))
    bias_ske = add(mean(ske, -1, keepdims=True), max_over_axis(ske, -1, keepdims=True))  # [B,D,1]
    fused_in = concat([reshape(a_img, (B, D, MI)), add(weight_ske, bias_ske)], axis=1)  # [B,2D,MI]
    out = add(matmul(params.fc_w, fused_in), params.fc_b)
    out = reshape(out, lead + (D, MI))
    if return_attention:
        return out, attn, heads
    return out


def fuse_frames(p_img, p_ske, params: AFFM) -> Tensor:
    """Frame-level fusion: ``p_img[...,N,C,K]`` with ``p_ske[...,N,C,Z]``, one fuse per frame."""
    p_img, p_ske = as_tensor(p_img), as_tensor(p_ske)
    if p_img.shape[:-2] != p_ske.shape[:-2]:
        raise PairingError(f"frame axes differ: silhouette {p_img.shape[:-2]} vs skeleton {p_ske.shape[:-2]}")
    return fuse(p_img, p_ske, params)
