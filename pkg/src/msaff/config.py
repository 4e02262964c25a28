"""Architecture hyperparameters and dataset presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

PRESETS = ("casia_b", "gait3d", "grew", "micro")
MODALITIES = ("both", "silhouette", "skeleton")


@dataclass
class ModelConfig:
    """All MSAFF architecture settings.

    ``num_strips`` is K (horizontal silhouette strips), ``num_joints`` is Z,
    ``channels`` is C, ``out_channels`` is Out_c, ``heads``/``compression`` are
    the AFFM head count h and channel compression ratio r, ``op`` is the
    FD-pooling output width used at inference (None keeps Out_c).
    """

    preset: str = "casia_b"
    height: int = 64
    width: int = 44
    num_strips: int = 32
    num_joints: int = 17
    channels: int = 128
    out_channels: int = 256
    heads: int = 4
    compression: int = 2
    op: int | None = None
    cnn_channels: tuple[int, ...] = (32, 64, 128, 128)
    pool_after: int = 2
    gt_channels: tuple[int, ...] = (64, 128, 128)
    gt_heads: int = 4
    frames: int = 30
    leaky_slope: float = 0.01
    msstfe_activation: bool = True
    modality: str = "both"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cnn_channels = tuple(self.cnn_channels)
        self.gt_channels = tuple(self.gt_channels)
        self.validate()

    @property
    def part_count(self) -> int:
        """Rows of the final embedding: 3K + 3Z + 3K + 3K."""
        return 9 * self.num_strips + 3 * self.num_joints

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads // self.compression

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.num_joints != 17:
            raise ConfigError(f"skeletons use the COCO-17 layout, got num_joints={self.num_joints}")
        if self.cnn_channels[-1] != self.channels:
            raise ConfigError(f"last CNN width {self.cnn_channels[-1]} must equal channels={self.channels}")
        if self.gt_channels[-1] != self.channels:
            raise ConfigError(f"last graph-transformer width {self.gt_channels[-1]} must equal channels={self.channels}")
        if not 1 <= self.pool_after <= len(self.cnn_channels):
            raise ConfigError(f"pool_after={self.pool_after} outside the {len(self.cnn_channels)}-layer stack")
        if self.height % 2 or (self.height // 2) % self.num_strips:
            raise ConfigError(f"K={self.num_strips} must divide the pooled height {self.height // 2}")
        if self.channels % self.heads or (self.channels // self.heads) % self.compression:
            raise ConfigError(
                f"channels={self.channels} not divisible into {self.heads} heads with compression {self.compression}")
        if any(c % self.gt_heads for c in self.gt_channels):
            raise ConfigError(f"graph-transformer widths {self.gt_channels} must divide by gt_heads={self.gt_heads}")
        if self.op is not None and (self.op < 1 or self.out_channels % self.op):
            raise ConfigError(f"op={self.op} must divide out_channels={self.out_channels}")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        d["gt_channels"] = list(self.gt_channels)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> ModelConfig:
        """Load a JSON file; ``{"preset": name, ...}`` overrides start from that preset."""
        raw = json.loads(Path(path).read_text())
        base = preset(raw.get("preset", "casia_b")).to_dict()
        base.update(raw)
        return cls.from_dict(base)


def casia_b(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def gait3d(**overrides) -> ModelConfig:
    kw = dict(preset="gait3d", num_strips=16, cnn_channels=(32, 32, 64, 64, 128, 128), pool_after=2)
    kw.update(overrides)
    return ModelConfig(**kw)


def grew(**overrides) -> ModelConfig:
    return gait3d(**{"preset": "grew", **overrides})


def micro(**overrides) -> ModelConfig:
    """Scaled-down stack for gradient checks and desk-scale training."""
    kw = dict(
        preset="micro", height=16, width=12, num_strips=4, channels=8, out_channels=8,
        cnn_channels=(4, 8, 8, 8), gt_channels=(8, 8, 8), frames=3,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def preset(name: str, **overrides) -> ModelConfig:
    factories = {"casia_b": casia_b, "gait3d": gait3d, "grew": grew, "micro": micro}
    if name not in factories:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return factories[name](**overrides)
