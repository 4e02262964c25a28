"""Finite-difference validation across every differentiable component.

``run_suite`` checks each primitive op, the fusion and feature-extraction
modules, the encoders, the triplet loss and the end-to-end micro model, and
returns one ``GradcheckResult`` per entry. The op list is checked against
``DIFFERENTIABLE_OPS`` so a newly added op cannot silently go unchecked.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .affm import AFFM, fuse
from .config import ModelConfig, preset
from .encoders import SilhouetteEncoder, SkeletonEncoder
from .errors import UsageError
from .model import MSAFF
from .msstfe import MSSTFE
from .numerics import DIFFERENTIABLE_OPS, Tensor
from .numerics.gradcheck import GradcheckResult, gradcheck
from .numerics.opcases import make_case
from .training import ba_triplet_loss

COMPONENTS = ("numerics", "affm", "msstfe", "encoders", "training", "model")
# evaluation point whose eps-stencils stay clear of relu / max kinks; other
# seeds can straddle one, which shows up in the ``kinks`` column
DEFAULT_SEED = 2


@dataclass
class SuiteEntry:
    component: str
    result: GradcheckResult


def generic_point(model, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Give every all-zero parameter (biases, norm shifts) small random values.

    With zero biases, empty silhouette regions put leaky-relu inputs exactly on
    the kink, where the function has no derivative to check.
    """
    for p in model.parameters():
        if not p.data.any():
            p.data = rng.normal(scale=scale, size=p.shape)


def micro_inputs(cfg: ModelConfig, batch: int, frames: int, rng: np.random.Generator):
    sil = rng.random((batch, frames, cfg.height, cfg.width))
    ske = np.concatenate([rng.uniform(0, cfg.width, (batch, frames, 1, cfg.num_joints)),
                          rng.uniform(0, cfg.height, (batch, frames, 1, cfg.num_joints)),
                          rng.random((batch, frames, 1, cfg.num_joints))], axis=2)
    return sil, ske


def _op_seed(name: str, seed: int) -> int:
    return zlib.crc32(name.encode()) + seed


def _ops(seed, corrupt):
    for op in DIFFERENTIABLE_OPS:
        fn, params = make_case(op, np.random.default_rng(_op_seed(op, seed)))
        yield SuiteEntry("numerics", gradcheck(fn, params, name=op, corrupt=corrupt.get(op, 0.0)))


def _affm(seed, corrupt):
    rng = np.random.default_rng(seed + 1)
    m = AFFM(8, 2, 1, rng)
    generic_point(m, rng)
    a_img = Tensor(rng.normal(size=(2, 8, 3)), requires_grad=True)
    a_ske = Tensor(rng.normal(size=(2, 8, 4)), requires_grad=True)
    yield SuiteEntry("affm", gradcheck(lambda: fuse(a_img, a_ske, m), [a_img, a_ske] + m.parameters(),
                                       name="affm.fuse", corrupt=corrupt.get("affm.fuse", 0.0)))


def _msstfe(seed, corrupt):
    rng = np.random.default_rng(seed + 2)
    m = MSSTFE(3, 3, rng)
    generic_point(m, rng)
    x = Tensor(rng.normal(size=(1, 4, 3, 3)), requires_grad=True)
    yield SuiteEntry("msstfe", gradcheck(lambda: m(x), [x] + m.parameters(), name="msstfe", max_entries=6,
                                         corrupt=corrupt.get("msstfe", 0.0)))
    g = m.glob
    yield SuiteEntry("msstfe", gradcheck(lambda: g(x), [x] + g.parameters(), name="msstfe.global", max_entries=6,
                                         corrupt=corrupt.get("msstfe.global", 0.0)))


def _encoders(seed, corrupt):
    cfg = preset("micro")
    rng = np.random.default_rng(seed + 3)
    sil = SilhouetteEncoder(cfg, rng)
    generic_point(sil, rng)
    frames = rng.random((1, cfg.height, cfg.width))
    yield SuiteEntry("encoders", gradcheck(lambda: sil(frames), sil.parameters(), name="encoders.silhouette",
                                           max_entries=6, corrupt=corrupt.get("encoders.silhouette", 0.0)))
    ske = SkeletonEncoder(cfg, rng)
    generic_point(ske, rng)
    joints = Tensor(rng.normal(size=(2, 3, cfg.num_joints)), requires_grad=True)
    yield SuiteEntry("encoders", gradcheck(lambda: ske(joints), [joints] + ske.parameters(),
                                           name="encoders.skeleton", max_entries=4,
                                           corrupt=corrupt.get("encoders.skeleton", 0.0)))


def _training(seed, corrupt):
    rng = np.random.default_rng(seed + 4)
    emb = Tensor(rng.normal(size=(6, 2, 3)), requires_grad=True)
    labels = [0, 0, 1, 1, 2, 2]
    yield SuiteEntry("training", gradcheck(lambda: ba_triplet_loss(emb, labels), [emb], name="ba_triplet_loss",
                                           corrupt=corrupt.get("ba_triplet_loss", 0.0)))


def _model(seed, corrupt):
    cfg = preset("micro", seed=seed)
    rng = np.random.default_rng(seed + 5)
    model = MSAFF(cfg)
    generic_point(model, rng)
    sil, ske = micro_inputs(cfg, 1, cfg.frames, rng)
    yield SuiteEntry("model", gradcheck(lambda: model(sil, ske), model.parameters(), name="msaff.end_to_end",
                                        max_entries=3, corrupt=corrupt.get("msaff.end_to_end", 0.0)))


_RUNNERS = {"numerics": _ops, "affm": _affm, "msstfe": _msstfe, "encoders": _encoders, "training": _training,
            "model": _model}


def run_suite(components=COMPONENTS, seed: int = DEFAULT_SEED, corrupt: dict[str, float] | None = None) -> list[SuiteEntry]:
    """Run the named components; ``corrupt`` maps check names to a gradient offset (negative control)."""
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise UsageError(f"unknown gradcheck components {sorted(unknown)}; choose from {COMPONENTS}")
    corrupt = corrupt or {}
    entries = [e for c in components for e in _RUNNERS[c](seed, corrupt)]
    if "numerics" in components:
        missing = set(DIFFERENTIABLE_OPS) - {e.result.name for e in entries if e.component == "numerics"}
        if missing:
            raise UsageError(f"ops without a gradcheck: {sorted(missing)}")
    return entries


def format_table(entries: list[SuiteEntry]) -> str:
    rows = [f"{'component':<10} {'check':<22} {'entries':>7} {'max abs err':>12} {'max rel err':>12}  status"]
    for e in entries:
        r = e.result
        rows.append(f"{e.component:<10} {r.name:<22} {r.checked:>7} {r.max_abs_err:>12.3e} {r.max_rel_err:>12.3e}  "
                    + ("PASS" if r.passed else f"FAIL ({r.failures}, {r.kinks} at kinks)"))
    n_fail = sum(not e.result.passed for e in entries)
    rows.append(f"{len(entries)} checks, {n_fail} failed")
    return "\n".join(rows)
