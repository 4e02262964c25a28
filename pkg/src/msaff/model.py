"""MSAFF network assembly, feature-dimension pooling and the test-time metric."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .affm import AFFM, fuse_frames
from .config import ModelConfig
from .encoders import SilhouetteEncoder, SilhouetteSequence, SkeletonEncoder, SkeletonSequence, check_pair, part_pool
from .errors import ConfigError, PairingError, ShapeError
from .msstfe import MSSTFE
from .numerics import Module, Tensor, concat, matmul, reshape, transpose
from .numerics.module import xavier_normal

POOL_MODES = ("average", "max", "min", "median", "average+max", "average+min", "average+median")


@dataclass
class GaitEmbedding:
    values: np.ndarray  # [9K+3Z, dim]
    subject_id: str = ""
    condition: str = ""
    view: str = ""
    tags: dict = field(default_factory=dict)


class MSAFF(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        C, K, Z = cfg.channels, cfg.num_strips, cfg.num_joints
        act, slope = cfg.msstfe_activation, cfg.leaky_slope
        self.sil_encoder = SilhouetteEncoder(cfg, rng)
        self.ske_encoder = SkeletonEncoder(cfg, rng)
        self.msstfe_img = MSSTFE(C, K, rng, act, slope)
        self.msstfe_ske = MSSTFE(C, Z, rng, act, slope)
        self.msstfe_fs = MSSTFE(C, K, rng, act, slope)
        self.affm_frame = AFFM(C, cfg.heads, cfg.compression, rng)
        self.affm_st = AFFM(C, cfg.heads, cfg.compression, rng)
        # one bias-free C -> Out_c map per output part
        self.head = xavier_normal(rng, (cfg.part_count, C, cfg.out_channels), C, cfg.out_channels)

    def block_slices(self) -> dict[str, slice]:
        """Part-index ranges of the four globally fused blocks, in output order."""
        K, Z = self.cfg.num_strips, self.cfg.num_joints
        sizes = {"img": 3 * K, "ske": 3 * Z, "fs": 3 * K, "fst": 3 * K}
        out, start = {}, 0
        for name, n in sizes.items():
            out[name] = slice(start, start + n)
            start += n
        return out

    def features(self, silhouettes, skeletons) -> dict[str, Tensor]:
        """Intermediate maps for a batch: ``silhouettes[B,N,H,W]``, ``skeletons[B,N,3,Z]``."""
        sil = np.asarray(silhouettes, dtype=np.float64)
        ske = np.asarray(skeletons, dtype=np.float64)
        if sil.ndim != 4 or ske.ndim != 4:
            raise ShapeError(f"expected [B,N,H,W] and [B,N,3,Z], got {sil.shape} and {ske.shape}")
        if sil.shape[:2] != ske.shape[:2]:
            raise PairingError(f"silhouette batch/frames {sil.shape[:2]} != skeleton {ske.shape[:2]}")
        if self.cfg.modality == "skeleton":
            sil = np.zeros_like(sil)
        elif self.cfg.modality == "silhouette":
            ske = np.zeros_like(ske)
        B, N = sil.shape[:2]
        C, K, Z = self.cfg.channels, self.cfg.num_strips, self.cfg.num_joints

        s_img = self.sil_encoder(sil.reshape((B * N,) + sil.shape[2:]))
        s_ske = self.ske_encoder(ske.reshape((B * N,) + ske.shape[2:]))
        p_img = reshape(part_pool(s_img, K), (B, N, C, K))
        p_ske = reshape(s_ske, (B, N, C, Z))  # joints already in COCO order

        st_img = self.msstfe_img(p_img)
        st_ske = self.msstfe_ske(p_ske)
        p_fs = fuse_frames(p_img, p_ske, self.affm_frame)
        st_fs = self.msstfe_fs(p_fs)
        st_fst = self.affm_st(st_img, st_ske)
        return {"s_img": s_img, "s_ske": s_ske, "p_img": p_img, "p_ske": p_ske, "p_fs": p_fs,
                "st_img": st_img, "st_ske": st_ske, "st_fs": st_fs, "st_fst": st_fst}

    def map_parts(self, st: Tensor) -> Tensor:
        """Separate FC per part: ``st[B,C,P]`` -> ``[B,P,Out_c]``."""
        B, C, P = st.shape
        rows = reshape(transpose(st, (0, 2, 1)), (B, P, 1, C))
        return reshape(matmul(rows, self.head), (B, P, self.cfg.out_channels))

    def forward(self, silhouettes, skeletons) -> Tensor:
        """Training embeddings ``[B, 9K+3Z, Out_c]``."""
        f = self.features(silhouettes, skeletons)
        st = concat([f["st_img"], f["st_ske"], f["st_fs"], f["st_fst"]], axis=2)
        return self.map_parts(st)

    def embed(self, sil: SilhouetteSequence, ske: SkeletonSequence, op: int | None = None,
              mode: str = "average") -> GaitEmbedding:
        """Embed one full sequence (all frames); FD-pool to ``op`` channels when given."""
        check_pair(sil, ske)
        out = self.forward(sil.frames[None], ske.joints[None]).data[0]
        if op is not None:
            out = fd_pool(out, op, mode)
        return GaitEmbedding(out, sil.subject_id, sil.condition, sil.view)


def _reduce(groups: np.ndarray, how: str) -> np.ndarray:
    if how == "average":
        return groups.mean(axis=-1)
    if how == "max":
        return groups.max(axis=-1)
    if how == "min":
        return groups.min(axis=-1)
    if how == "median":
        return np.median(groups, axis=-1)
    raise ConfigError(f"unknown pooling {how!r}")


def fd_pool(out: np.ndarray, op: int, mode: str = "average") -> np.ndarray:
    """Cut the channel axis into ``op`` equal groups and pool each to one value.

    ``out[..., P, Out_c]`` -> ``[..., P, op]``. Combined modes (``a+b``) average
    the two reductions.
    """
    out = np.asarray(out, dtype=np.float64)
    width = out.shape[-1]
    if mode not in POOL_MODES:
        raise ConfigError(f"pooling mode must be one of {POOL_MODES}, got {mode!r}")
    if op < 1 or width % op:
        raise ConfigError(f"op={op} does not divide Out_c={width}")
    groups = out.reshape(out.shape[:-1] + (op, width // op))
    parts = mode.split("+")
    if len(parts) == 1:
        return _reduce(groups, mode)
    return 0.5 * (_reduce(groups, parts[0]) + _reduce(groups, parts[1]))


def inference_distance(a, b) -> float:
    """Mean over parts of the Euclidean distance between matching part vectors."""
    a = a.values if isinstance(a, GaitEmbedding) else np.asarray(a, dtype=np.float64)
    b = b.values if isinstance(b, GaitEmbedding) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum(axis=-1)).mean())


def pairwise_distance(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """``probe[Q,P,D]``, ``gallery[G,P,D]`` -> ``[Q,G]`` of ``inference_distance``."""
    probe = np.asarray(probe, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if probe.shape[1:] != gallery.shape[1:]:
        raise ShapeError(f"embedding shapes differ: {probe.shape[1:]} vs {gallery.shape[1:]}")
    out = np.empty((len(probe), len(gallery)))
    for q in range(len(probe)):
        diff = gallery - probe[q]
        out[q] = np.sqrt((diff * diff).sum(axis=-1)).mean(axis=-1)
    return out
