"""Frame-level spatial encoders: silhouette CNN and skeleton graph transformer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, InputError, PairingError, PreprocessingError, ShapeError
from .numerics import (
    Module,
    Tensor,
    add,
    as_tensor,
    conv2d,
    leaky_relu,
    matmul,
    max_over_axis,
    max_pool2d,
    mean,
    mul,
    reshape,
    softmax,
    sqrt,
    sub,
    transpose,
)
from .numerics.module import he_normal, ones, xavier_normal, zeros

# COCO-17 keypoint order
COCO_JOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

COCO_EDGES = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12), (5, 6), (5, 7),
    (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
)


@dataclass
class SilhouetteSequence:
    frames: np.ndarray  # [N, H, W], values in [0, 1]
    subject_id: str = ""
    condition: str = ""
    view: str = ""
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or len(self.frames) < 1:
            raise ShapeError(f"silhouette frames must be [N,H,W] with N>=1, got {self.frames.shape}")

    def __len__(self):
        return len(self.frames)


@dataclass
class SkeletonSequence:
    joints: np.ndarray  # [N, 3, Z]: x, y, confidence
    subject_id: str = ""
    condition: str = ""
    view: str = ""
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.ndim != 3 or self.joints.shape[1] != 3 or len(self.joints) < 1:
            raise ShapeError(f"skeleton joints must be [N,3,Z] with N>=1, got {self.joints.shape}")

    def __len__(self):
        return len(self.joints)


def check_pair(sil: SilhouetteSequence, ske: SkeletonSequence) -> None:
    if len(sil) != len(ske):
        raise PairingError(f"silhouette has {len(sil)} frames but skeleton has {len(ske)}")


def normalized_adjacency(num_joints: int = 17, edges=COCO_EDGES) -> np.ndarray:
    """Row-normalized COCO adjacency with self-loops, D^-1 (A + I)."""
    a = np.eye(num_joints)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    return a / a.sum(axis=1, keepdims=True)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 1, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis, keepdims=True)
    centred = sub(x, mu)
    var = mean(mul(centred, centred), axis, keepdims=True)
    return add(mul(centred / sqrt(var + eps), gamma), beta)


class SilhouetteEncoder(Module):
    """Stack of 3x3 convs with one stride-2 max pool after ``cfg.pool_after`` layers."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        widths = (1,) + tuple(cfg.cnn_channels)
        self.weights = [he_normal(rng, (co, ci, 3, 3), ci * 9) for ci, co in zip(widths[:-1], widths[1:])]
        self.biases = [zeros((co,)) for co in widths[1:]]

    def forward(self, frames) -> Tensor:
        """``frames[B,H,W]`` -> ``[B,C,H/2,W/2]``."""
        x = as_tensor(frames)
        if x.ndim != 3:
            raise ShapeError(f"silhouette encoder expects [B,H,W], got {x.shape}")
        if x.shape[1:] != (self.cfg.height, self.cfg.width):
            raise PreprocessingError(
                f"silhouettes must be {self.cfg.height}x{self.cfg.width}, got {x.shape[1]}x{x.shape[2]}")
        x = reshape(x, (x.shape[0], 1) + x.shape[1:])
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = leaky_relu(conv2d(x, w, b, padding=1), self.cfg.leaky_slope)
            if i + 1 == self.cfg.pool_after:
                x = max_pool2d(x, 2)
        return x


def part_pool(s, num_strips: int) -> Tensor:
    """Split ``s[B,C,h,w]`` into K horizontal strips, top to bottom; GAP + GMP each.

    Returns ``[B,C,K]``.
    """
    s = as_tensor(s)
    B, C, h, w = s.shape
    if h % num_strips:
        raise ConfigError(f"K={num_strips} does not divide feature-map height {h}")
    strips = reshape(s, (B, C, num_strips, (h // num_strips) * w))
    return add(mean(strips, -1), max_over_axis(strips, -1))


class GraphTransformerLayer(Module):
    """Graph conv over the skeleton, then joint self-attention and a feed-forward block.

    Both sub-blocks are residual with layer norm over channels.
    """

    def __init__(self, c_in: int, c_out: int, heads: int, adjacency: np.ndarray, rng, slope: float):
        self.heads = heads
        self.slope = slope
        self.adj_t = Tensor(adjacency.T)
        self.gc_w = he_normal(rng, (c_out, c_in), c_in)
        self.gc_b = zeros((c_out, 1))
        self.wq = xavier_normal(rng, (c_out, c_out), c_out, c_out)
        self.wk = xavier_normal(rng, (c_out, c_out), c_out, c_out)
        self.wv = xavier_normal(rng, (c_out, c_out), c_out, c_out)
        self.wo = xavier_normal(rng, (c_out, c_out), c_out, c_out)
        self.ln1_g, self.ln1_b = ones((c_out, 1)), zeros((c_out, 1))
        self.ff1_w = he_normal(rng, (2 * c_out, c_out), c_out)
        self.ff1_b = zeros((2 * c_out, 1))
        self.ff2_w = he_normal(rng, (c_out, 2 * c_out), 2 * c_out)
        self.ff2_b = zeros((c_out, 1))
        self.ln2_g, self.ln2_b = ones((c_out, 1)), zeros((c_out, 1))

    def attention(self, h: Tensor) -> Tensor:
        B, C, Z = h.shape
        dh = C // self.heads

        def split(w):
            return reshape(matmul(w, h), (B, self.heads, dh, Z))

        q, k, v = split(self.wq), split(self.wk), split(self.wv)
        scores = matmul(transpose(q, (0, 1, 3, 2)), k) * (1.0 / np.sqrt(dh))  # [B,h,Z,Z]
        attn = softmax(scores, axis=-1)
        out = matmul(v, transpose(attn, (0, 1, 3, 2)))  # [B,h,dh,Z]
        return matmul(self.wo, reshape(out, (B, C, Z)))

    def forward(self, x: Tensor) -> Tensor:
        # joint j aggregates its neighbours: x @ A^T
        h = matmul(x, self.adj_t)
        h = leaky_relu(add(matmul(self.gc_w, h), self.gc_b), self.slope)
        h = layer_norm(add(h, self.attention(h)), self.ln1_g, self.ln1_b)
        f = leaky_relu(add(matmul(self.ff1_w, h), self.ff1_b), self.slope)
        f = add(matmul(self.ff2_w, f), self.ff2_b)
        return layer_norm(add(h, f), self.ln2_g, self.ln2_b)


class SkeletonEncoder(Module):
    """Three graph-transformer layers over COCO-17 joints, per frame."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        adj = normalized_adjacency(cfg.num_joints)
        widths = (3,) + tuple(cfg.gt_channels)
        self.layers = [
            GraphTransformerLayer(ci, co, cfg.gt_heads, adj, rng, cfg.leaky_slope)
            for ci, co in zip(widths[:-1], widths[1:])
        ]

    def normalize(self, joints: np.ndarray) -> np.ndarray:
        """Map pixel coordinates to roughly [-1, 1] around the frame centre."""
        half = self.cfg.height / 2.0
        out = np.array(joints, dtype=np.float64)
        out[:, 0] = (out[:, 0] - self.cfg.width / 2.0) / half
        out[:, 1] = (out[:, 1] - half) / half
        return out

    def forward(self, joints) -> Tensor:
        """``joints[B,3,Z]`` (pixel x, pixel y, confidence) -> ``[B,C,Z]``."""
        if isinstance(joints, Tensor):
            x = joints
        else:
            arr = np.asarray(joints, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise InputError("skeleton coordinates contain NaN or Inf")
            x = Tensor(self.normalize(arr))
        if x.ndim != 3 or x.shape[1] != 3:
            raise ShapeError(f"skeleton encoder expects [B,3,Z], got {x.shape}")
        if x.shape[2] != self.cfg.num_joints:
            raise ConfigError(f"expected {self.cfg.num_joints} COCO joints, got {x.shape[2]}")
        for layer in self.layers:
            x = layer(x)
        return x
