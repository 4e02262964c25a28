"""Dataset files, manifests, and a synthetic walking-figure generator.

On-disk layout written by :func:`save_dataset`::

    root/manifest.json
    root/<subject>/<condition>-<view>/silhouettes/000.pgm ...  (P5, maxval 255)
    root/<subject>/<condition>-<view>/skeleton.json           ({"joints": N x 17 x 3})
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoders import COCO_JOINTS, SilhouetteSequence, SkeletonSequence
from .errors import AlignmentError, DatasetError, ParseError, PreprocessingError, SpecError

MANIFEST_VERSION = 1


@dataclass
class GaitSample:
    """One paired clip. ``silhouettes[N,H,W]`` in [0, 1]; ``skeletons[N,3,Z]``."""

    subject_id: str
    condition: str
    view: str
    silhouettes: np.ndarray
    skeletons: np.ndarray

    def __post_init__(self):
        if len(self.silhouettes) != len(self.skeletons):
            raise AlignmentError(
                f"{self.key}: {len(self.silhouettes)} silhouette frames vs {len(self.skeletons)} skeleton frames")

    @property
    def key(self) -> str:
        return f"{self.subject_id}/{self.condition}-{self.view}"

    @property
    def silhouette(self) -> SilhouetteSequence:
        return SilhouetteSequence(self.silhouettes, self.subject_id, self.condition, self.view)

    @property
    def skeleton(self) -> SkeletonSequence:
        return SkeletonSequence(self.skeletons, self.subject_id, self.condition, self.view)

    def __len__(self):
        return len(self.silhouettes)


@dataclass
class GaitDataset:
    samples: list[GaitSample]
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    probe_conditions: list[str] = field(default_factory=list)

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise DatasetError(f"train and test identities overlap: {sorted(overlap)}")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def subset(self, ids) -> list[GaitSample]:
        ids = set(ids)
        return [s for s in self.samples if s.subject_id in ids]

    def train(self) -> list[GaitSample]:
        return self.subset(self.train_ids)

    def test(self) -> list[GaitSample]:
        return self.subset(self.test_ids)


# --------------------------------------------------------------------------
# synthetic walker

# identity parameters that define body shape and motion, with sampling ranges;
# "phase" is drawn too but excluded from the separation check
KINEMATIC_RANGES = {
    "body_height": (0.70, 0.88),   # fraction of frame height
    "leg_ratio": (0.44, 0.54),     # leg length / body height
    "arm_ratio": (0.30, 0.42),
    "torso_ratio": (0.26, 0.32),
    "depth": (0.02, 0.10),         # left/right horizontal offset / body height
    "frequency": (0.08, 0.20),     # gait cycles per frame
    "amplitude": (0.25, 0.60),     # thigh swing, radians
    "bob": (0.01, 0.04),           # vertical bob / body height
    "lean": (-0.12, 0.12),         # torso lean, radians
}


@dataclass
class SyntheticSpec:
    identities: int = 8
    sequences_per_identity: int = 4
    frames: int = 30
    noise: float = 0.0             # joint-coordinate noise std, fraction of frame height
    seed: int = 0
    height: int = 64
    width: int = 44
    min_gap: float = 0.12          # min normalized difference between identities, in some parameter
    view: str = "090"
    kinematics: list[dict] | None = None  # explicit per-identity parameters (overrides sampling)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        d = {k: v for k, v in d.items() if k != "kind"}
        return cls(**d)


def _separated(candidate: np.ndarray, others: list[np.ndarray], gap: float) -> bool:
    return all(np.max(np.abs(candidate - o)) >= gap for o in others)


def draw_kinematics(spec: SyntheticSpec, rng: np.random.Generator) -> list[dict]:
    """Per-identity parameters; any two identities differ by ``min_gap`` in some normalized parameter."""
    if spec.kinematics is not None:
        if len(spec.kinematics) != spec.identities:
            raise SpecError(f"{len(spec.kinematics)} kinematics entries for {spec.identities} identities")
        return [dict(k) for k in spec.kinematics]
    names = list(KINEMATIC_RANGES)
    lo = np.array([KINEMATIC_RANGES[n][0] for n in names])
    hi = np.array([KINEMATIC_RANGES[n][1] for n in names])
    unit: list[np.ndarray] = []
    out = []
    for _ in range(spec.identities):
        for _attempt in range(10_000):
            u = rng.random(len(names))
            if _separated(u, unit, spec.min_gap):
                break
        else:
            raise SpecError(f"cannot place {spec.identities} identities {spec.min_gap} apart")
        unit.append(u)
        params = dict(zip(names, (lo + u * (hi - lo)).tolist()))
        params["phase"] = float(rng.uniform(0, 2 * np.pi))
        out.append(params)
    return out


def _validate_kinematics(k: dict) -> None:
    for name in ("body_height", "leg_ratio", "arm_ratio", "torso_ratio"):
        if k.get(name, 0) <= 0:
            raise SpecError(f"degenerate kinematics: {name}={k.get(name)} (limb lengths must be positive)")
    if k.get("frequency", 0) <= 0:
        raise SpecError("gait frequency must be positive")


def walker_pose(k: dict, t: np.ndarray, height: int, width: int) -> np.ndarray:
    """COCO-17 pixel coordinates ``[T, 17, 2]`` (x, y) at frame times ``t``."""
    hb = k["body_height"] * height
    leg = k["leg_ratio"] * hb
    torso = k["torso_ratio"] * hb
    arm = k["arm_ratio"] * hb
    depth = k["depth"] * hb
    amp = k["amplitude"]
    theta = 2 * np.pi * k["frequency"] * t + k["phase"]
    T = len(t)
    ground = height - 0.5 * (height - hb)
    hip_y = ground - leg + k["bob"] * hb * np.sin(theta)
    hip_x = np.full(T, width / 2.0)

    pose = np.zeros((T, 17, 2))
    lean = k["lean"]
    sh_x = hip_x + torso * np.sin(lean)
    sh_y = hip_y - torso * np.cos(lean)
    head = 0.13 * hb
    nose_x, nose_y = sh_x + 0.25 * head, sh_y - head
    pose[:, 0] = np.stack([nose_x, nose_y], -1)
    pose[:, 1] = np.stack([nose_x - 0.2 * depth, nose_y - 0.15 * head], -1)
    pose[:, 2] = np.stack([nose_x + 0.2 * depth, nose_y - 0.15 * head], -1)
    pose[:, 3] = np.stack([nose_x - 0.4 * head - 0.2 * depth, nose_y], -1)
    pose[:, 4] = np.stack([nose_x - 0.4 * head + 0.2 * depth, nose_y], -1)

    for side, sign in ((0, -1.0), (1, 1.0)):
        phase = theta + side * np.pi
        # arms swing opposite to the same-side leg
        shoulder = np.stack([sh_x + sign * depth, sh_y], -1)
        upper = -0.7 * amp * np.sin(phase)
        elbow = shoulder + 0.5 * arm * np.stack([np.sin(upper), np.cos(upper)], -1)
        fore = upper + 0.3 * amp * (1 + np.sin(phase)) / 2
        wrist = elbow + 0.5 * arm * np.stack([np.sin(fore), np.cos(fore)], -1)
        hip = np.stack([hip_x + sign * depth, hip_y], -1)
        thigh = amp * np.sin(phase)
        knee = hip + 0.5 * leg * np.stack([np.sin(thigh), np.cos(thigh)], -1)
        shin = thigh - 0.6 * amp * (1 - np.cos(phase)) / 2
        ankle = knee + 0.5 * leg * np.stack([np.sin(shin), np.cos(shin)], -1)
        pose[:, 5 + side] = shoulder
        pose[:, 7 + side] = elbow
        pose[:, 9 + side] = wrist
        pose[:, 11 + side] = hip
        pose[:, 13 + side] = knee
        pose[:, 15 + side] = ankle
    return pose


# (joint a, joint b, radius / body height); -1 / -2 mark shoulder / hip midpoints
_CAPSULES = (
    (-1, -2, 0.085), (5, 6, 0.05), (11, 12, 0.06), (-1, 0, 0.04),
    (5, 7, 0.035), (7, 9, 0.03), (6, 8, 0.035), (8, 10, 0.03),
    (11, 13, 0.05), (13, 15, 0.04), (12, 14, 0.05), (14, 16, 0.04),
)
_HEAD_RADIUS = 0.075


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(px - a, axis=-1)
    s = np.clip(((px - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(px - (a + s[..., None] * ab), axis=-1)


def rasterize(pose: np.ndarray, body_height: float, height: int, width: int) -> np.ndarray:
    """Binary ``[H, W]`` silhouette of capsules along the bones of one pose ``[17, 2]``."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = np.stack([xs + 0.5, ys + 0.5], -1).reshape(-1, 2)
    points = {j: pose[j] for j in range(17)}
    points[-1] = (pose[5] + pose[6]) / 2
    points[-2] = (pose[11] + pose[12]) / 2
    hb = body_height * height
    mask = np.zeros(len(px), dtype=bool)
    for a, b, r in _CAPSULES:
        mask |= _segment_distance(px, points[a], points[b]) <= max(r * hb, 0.5)
    head_centre = (pose[0] + (pose[3] + pose[4]) / 2) / 2
    mask |= np.linalg.norm(px - head_centre, axis=-1) <= max(_HEAD_RADIUS * hb, 0.5)
    return mask.reshape(height, width).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[GaitSample], list[dict]]:
    """Render every (identity, sequence) clip; returns ``(samples, kinematics)``.

    Sequences of one identity share its kinematics and differ by a random start
    time within the gait cycle plus coordinate noise.
    """
    if spec.frames < 4:
        raise SpecError(f"need at least 4 frames, got {spec.frames}")
    if spec.identities < 2:
        raise SpecError(f"need at least 2 identities, got {spec.identities}")
    rng = np.random.default_rng(spec.seed)
    kin = draw_kinematics(spec, rng)
    samples = []
    for i, k in enumerate(kin):
        _validate_kinematics(k)
        sid = f"{i + 1:03d}"
        for s in range(spec.sequences_per_identity):
            start = rng.uniform(0, 1.0 / k["frequency"])
            t = np.arange(spec.frames) + start
            pose = walker_pose(k, t, spec.height, spec.width)
            sil = np.stack([rasterize(p, k["body_height"], spec.height, spec.width) for p in pose])
            noisy = pose + rng.normal(0.0, spec.noise * spec.height, size=pose.shape) if spec.noise else pose
            joints = np.concatenate([noisy, np.ones(pose.shape[:2] + (1,))], -1)  # [N,17,3]
            samples.append(GaitSample(sid, f"nm-{s + 1:02d}", spec.view, sil, joints.transpose(0, 2, 1).copy()))
    return samples, kin


# --------------------------------------------------------------------------
# file formats

_PGM_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def write_pgm(path, frame: np.ndarray) -> None:
    """Binary P5, maxval 255; ``frame`` in [0, 1]."""
    frame = np.asarray(frame)
    data = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into float64 ``[H, W]`` scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if not m:
            raise ParseError(f"{path}: truncated PGM header", pos)
        tokens.append((m.group(2), m.start(2)))
        pos = m.end()
    magic, (w_tok, w_off), (h_tok, h_off), (max_tok, max_off) = tokens[0][0], tokens[1], tokens[2], tokens[3]
    if magic != b"P5":
        raise ParseError(f"{path}: expected P5 magic, got {magic!r}", tokens[0][1])
    try:
        w, h, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric PGM header field", w_off) from exc
    if not 0 < maxval <= 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}", max_off)
    pos += 1  # single whitespace byte after maxval
    need = w * h
    if len(raw) - pos < need:
        raise ParseError(f"{path}: pixel data has {len(raw) - pos} bytes, expected {need}", pos)
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(h, w).astype(np.float64) / maxval


def _load_json(path):
    text = Path(path).read_bytes()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.pos) from exc


def write_skeleton(path, joints: np.ndarray) -> None:
    """``joints[N,3,Z]`` -> JSON with an ``N x Z x 3`` array (x, y, confidence per joint)."""
    arr = np.asarray(joints).transpose(0, 2, 1)
    Path(path).write_text(json.dumps({"layout": "coco17", "joint_names": list(COCO_JOINTS),
                                      "joints": arr.tolist()}))


def read_skeleton(path) -> np.ndarray:
    doc = _load_json(path)
    try:
        arr = np.asarray(doc["joints"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: missing or ragged 'joints' array", 0) from exc
    if arr.ndim != 3 or arr.shape[1:] != (17, 3):
        raise ParseError(f"{path}: joints must be N x 17 x 3, got {arr.shape}", 0)
    return arr.transpose(0, 2, 1).copy()


@dataclass
class DatasetManifest:
    root: Path
    entries: list[dict]
    train_ids: list[str]
    test_ids: list[str]
    probe_conditions: list[str] = field(default_factory=list)
    frame_size: tuple[int, int] = (64, 44)

    @classmethod
    def load(cls, path) -> DatasetManifest:
        path = Path(path)
        doc = _load_json(path)
        split = doc.get("split", {})
        return cls(path.parent, doc["entries"], list(split.get("train", [])), list(split.get("test", [])),
                   list(doc.get("probe_conditions", [])), tuple(doc.get("frame_size", (64, 44))))

    def to_dict(self) -> dict:
        return {"schema_version": MANIFEST_VERSION, "frame_size": list(self.frame_size), "entries": self.entries,
                "split": {"train": self.train_ids, "test": self.test_ids},
                "probe_conditions": self.probe_conditions}


def save_dataset(samples, root, train_ids=(), test_ids=(), probe_conditions=()) -> Path:
    """Write clips and ``manifest.json`` under ``root``; returns the manifest path."""
    root = Path(root)
    entries = []
    frame_size = None
    for s in samples:
        rel = Path(s.subject_id) / f"{s.condition}-{s.view}"
        sil_dir = root / rel / "silhouettes"
        sil_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(s.silhouettes):
            write_pgm(sil_dir / f"{i:03d}.pgm", frame)
        write_skeleton(root / rel / "skeleton.json", s.skeletons)
        frame_size = s.silhouettes.shape[1:]
        entries.append({"subject_id": s.subject_id, "condition": s.condition, "view": s.view,
                        "silhouettes": str(rel / "silhouettes"), "skeleton": str(rel / "skeleton.json")})
    manifest = DatasetManifest(root, entries, list(train_ids), list(test_ids), list(probe_conditions),
                               tuple(int(v) for v in (frame_size or (64, 44))))
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=2))
    return path


def load_dataset(manifest, frame_size: tuple[int, int] | None = None) -> GaitDataset:
    """Load every manifest entry; silhouettes scaled to [0, 1] and size-checked."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    size = tuple(frame_size or manifest.frame_size)
    overlap = set(manifest.train_ids) & set(manifest.test_ids)
    if overlap:
        raise DatasetError(f"train and test identities overlap: {sorted(overlap)}")
    samples = []
    for e in manifest.entries:
        key = f"{e['subject_id']}/{e['condition']}-{e['view']}"
        sil_dir = manifest.root / e["silhouettes"]
        files = sorted(sil_dir.glob("*.pgm"))
        frames = np.stack([read_pgm(f) for f in files]) if files else np.zeros((0,) + size)
        if frames.shape[1:] != size:
            raise PreprocessingError(f"{key}: silhouettes are {frames.shape[1:]}, expected {size}")
        joints = read_skeleton(manifest.root / e["skeleton"])
        if len(frames) != len(joints):
            raise AlignmentError(f"{key}: {len(frames)} silhouette frames vs {len(joints)} skeleton frames")
        samples.append(GaitSample(e["subject_id"], e["condition"], e["view"], frames, joints))
    return GaitDataset(samples, manifest.train_ids, manifest.test_ids, manifest.probe_conditions)
