"""Command-line entry points: generate, train, eval, gradcheck, ablate-fdpool.

Every command writes into a fresh run directory that appears only once the
command has succeeded, and each run directory holds a ``config.json``
snapshot that can be passed back through ``--config`` to reproduce the run.
Exit codes: 0 success, 1 usage / config / data error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ModelConfig, preset
from .datakit import GaitDataset, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .errors import ConfigError, MsaffError, NumericalError, TrainingError, UsageError
from .evaluation import RetrievalProtocol, cross_view_rank1, evaluate, format_report, rank_k
from .gradsuite import COMPONENTS, DEFAULT_SEED, format_table, run_suite
from .model import MSAFF, POOL_MODES, fd_pool, pairwise_distance
from .numerics.checkpoint import load_checkpoint
from .training import BATCH_SHAPES, Schedule, fit

log = logging.getLogger("msaff")

SNAPSHOT_VERSION = 1
ABLATION_OPS = (1, 2, 4, 8)


@dataclass
class TrainingConfig:
    p: int = 8
    k: int = 8
    frames: int = 30
    base_lr: float = 1e-4
    milestones: tuple[int, ...] = (30_000, 60_000)
    gamma: float = 0.1
    total_iterations: int = 100_000
    margin: float = 0.2
    reduction: str = "nonzero_mean"
    checkpoint_every: int = 10_000

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if min(self.p, self.k, self.frames) < 1:
            raise ConfigError(f"p, k and frames must be positive, got {self.p}, {self.k}, {self.frames}")
        if self.reduction not in ("nonzero_mean", "mean"):
            raise ConfigError(f"unknown loss reduction {self.reduction!r}")

    @classmethod
    def for_preset(cls, name: str, **overrides) -> TrainingConfig:
        s = Schedule.for_preset(name)
        p, k = BATCH_SHAPES.get(name, (8, 8))
        kw = dict(p=p, k=k, base_lr=s.base_lr, milestones=s.milestones, gamma=s.gamma,
                  total_iterations=s.total_iterations)
        kw.update(overrides)
        return cls(**kw)

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.total_iterations, self.base_lr, self.milestones, self.gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class RunConfig:
    command: str
    model: ModelConfig
    training: TrainingConfig
    data: dict | str | None = None  # manifest path or synthetic spec
    out: str = ""
    seed: int = 0
    options: dict = field(default_factory=dict)

    def snapshot(self) -> dict:
        return {"schema_version": SNAPSHOT_VERSION, "msaff_version": __version__, "command": self.command,
                "model": self.model.to_dict(), "training": self.training.to_dict(), "data": self.data,
                "seed": self.seed, "options": self.options}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# config, data and run-directory plumbing


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def load_configs(path=None) -> tuple[ModelConfig, TrainingConfig]:
    """Model and training settings from a JSON file.

    The file is either a bare model config, or ``{"model": ..., "training": ...}``
    (the layout of a run snapshot). Model keys start from their ``preset``.
    """
    raw = _read_json(path) if path else {}
    if "model" in raw or "training" in raw:
        model_raw, train_raw = raw.get("model", {}), raw.get("training", {})
    else:
        model_raw, train_raw = raw, {}
    base = preset(model_raw.get("preset", "casia_b")).to_dict()
    base.update(model_raw)
    cfg = ModelConfig.from_dict(base)
    known = set(TrainingConfig.__dataclass_fields__)
    unknown = set(train_raw) - known
    if unknown:
        raise ConfigError(f"unknown training keys: {sorted(unknown)}")
    return cfg, TrainingConfig.for_preset(cfg.preset, **train_raw)


def load_data(path, seed: int | None = None) -> tuple[GaitDataset, dict | str]:
    """A dataset from a manifest, or generated from a ``{"kind": "synthetic", ...}`` spec.

    Returns the dataset and what to record in the snapshot.
    """
    if path is None:
        raise UsageError("--data is required")
    raw = _read_json(path)
    if raw.get("kind") != "synthetic":
        return load_dataset(path), str(path)
    raw = dict(raw)
    probe_conditions = raw.pop("probe_conditions", None)
    if seed is not None:
        raw["seed"] = seed
    try:
        spec = SyntheticSpec.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: bad synthetic spec: {exc}") from exc
    samples, _ = generate_synthetic(spec)
    if probe_conditions is None:
        probe_conditions = [f"nm-{spec.sequences_per_identity:02d}"]
    record = {"kind": "synthetic", **spec.to_dict(), "probe_conditions": list(probe_conditions)}
    return GaitDataset(samples, probe_conditions=list(probe_conditions)), record


def split(ds: GaitDataset):
    """``(train, probe, gallery)`` sample lists.

    Evaluation uses the test identities (all identities when none are listed);
    probes are the sequences recorded under ``probe_conditions`` and the gallery
    is the rest. Without probe conditions the gallery is the probe set itself.
    When training and evaluation share identities, probe sequences are held out
    of training.
    """
    pool = ds.test() if ds.test_ids else list(ds)
    probe_conds = set(ds.probe_conditions)
    probe = [s for s in pool if s.condition in probe_conds] if probe_conds else pool
    gallery = [s for s in pool if s.condition not in probe_conds] if probe_conds else pool
    train = ds.train() if ds.train_ids else list(ds)
    if not ds.test_ids:
        train = [s for s in train if s.condition not in probe_conds]
    return train, probe, gallery


@contextmanager
def run_directory(out):
    """Yield a staging directory that is renamed to ``out`` on success and removed on failure."""
    if out is None:
        raise UsageError("--out is required")
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise UsageError(f"output directory {out} already exists and is not empty")
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = out.parent / f".{out.name}.staging-{os.getpid()}"
    shutil.rmtree(staging, ignore_errors=True)
    staging.mkdir()
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if out.exists():
        out.rmdir()
    os.replace(staging, out)


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def build_model(cfg: ModelConfig, checkpoint=None) -> MSAFF:
    model = MSAFF(cfg)
    if checkpoint is not None:
        state, _ = load_checkpoint(checkpoint)
        try:
            model.load_state_dict(state)
        except MsaffError as exc:
            raise ConfigError(f"checkpoint {checkpoint} does not fit the configured model: {exc}") from exc
    return model


def raw_embeddings(model: MSAFF, samples) -> np.ndarray:
    """Unpooled embeddings ``[n, 9K+3Z, Out_c]`` of whole sequences, one forward pass each."""
    return np.stack([model.embed(s.silhouette, s.skeleton).values for s in samples])


def _protocol(cfg: ModelConfig, probe, gallery, p_emb, g_emb) -> RetrievalProtocol:
    def tags(samples, attr):
        return np.array([getattr(s, attr) for s in samples])

    pv, gv = tags(probe, "view"), tags(gallery, "view")
    admissible = np.ones((len(probe), len(gallery)), dtype=bool)
    if cfg.preset == "casia_b":
        admissible &= pv[:, None] != gv[None, :]
    return RetrievalProtocol(pairwise_distance(p_emb, g_emb), tags(probe, "subject_id"), tags(gallery, "subject_id"),
                             admissible, pv, gv, tags(probe, "condition"))


def _check_pooling(cfg: ModelConfig, op, mode) -> None:
    if mode not in POOL_MODES:
        raise ConfigError(f"--pool-mode must be one of {POOL_MODES}, got {mode!r}")
    if op is not None and (op < 1 or cfg.out_channels % op):
        raise ConfigError(f"--op {op} does not divide Out_c={cfg.out_channels}")


def _setup(args, command: str) -> RunConfig:
    cfg, tcfg = load_configs(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return RunConfig(command, cfg, tcfg, out=str(args.out), seed=cfg.seed)


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    raw = _read_json(args.data) if args.data else {"kind": "synthetic"}
    if raw.get("kind", "synthetic") != "synthetic":
        raise UsageError("generate expects a synthetic spec (kind: synthetic)")
    raw.pop("kind", None)
    probe_conditions = raw.pop("probe_conditions", None)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"bad synthetic spec: {exc}") from exc
    samples, kinematics = generate_synthetic(spec)
    if probe_conditions is None:
        probe_conditions = [f"nm-{spec.sequences_per_identity:02d}"]
    with run_directory(args.out) as tmp:
        save_dataset(samples, tmp, probe_conditions=probe_conditions)
        write_json(tmp / "config.json", {"schema_version": SNAPSHOT_VERSION, "msaff_version": __version__,
                                         "command": "generate", "data": {"kind": "synthetic", **spec.to_dict(),
                                                                         "probe_conditions": probe_conditions}})
        write_json(tmp / "kinematics.json", kinematics)
    print(f"wrote {len(samples)} sequences to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = _setup(args, "train")
    ds, run.data = load_data(args.data)
    train, _, _ = split(ds)
    t = run.training
    run.options = {"max_iterations": args.max_iterations}
    with run_directory(args.out) as tmp:
        write_json(tmp / "config.json", run.snapshot())
        if args.max_iterations == 0:
            return 0
        model = build_model(run.model, args.checkpoint)
        losses = fit(model, train, t.schedule, t.p, t.k, t.frames, seed=run.seed, margin=t.margin,
                     reduction=t.reduction, max_iterations=args.max_iterations, out_dir=tmp,
                     checkpoint_every=t.checkpoint_every)
    print(f"trained {len(losses)} iterations, final loss {losses[-1]:.6f}; checkpoints in {args.out}")
    return 0


def cmd_eval(args) -> int:
    run = _setup(args, "eval")
    _check_pooling(run.model, args.op, args.pool_mode)
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    ds, run.data = load_data(args.data)
    _, probe, gallery = split(ds)
    run.options = {"checkpoint": str(args.checkpoint), "op": args.op, "pool_mode": args.pool_mode}
    model = build_model(run.model, args.checkpoint)
    emb = raw_embeddings(model, probe + gallery)
    if args.op is not None:
        emb = fd_pool(emb, args.op, args.pool_mode)
    prot = _protocol(run.model, probe, gallery, emb[:len(probe)], emb[len(probe):])
    extra = {"embedding_shape": list(emb.shape[1:]), "embedding_dim": int(np.prod(emb.shape[1:])),
             "op": args.op, "pool_mode": args.pool_mode if args.op is not None else None,
             "preset": run.model.preset}
    if run.model.preset == "casia_b" and len(set(prot.gallery_views.tolist())) > 1:
        extra["cross_view"] = cross_view_rank1(prot)
    report = evaluate(prot, **extra)
    with run_directory(args.out) as tmp:
        write_json(tmp / "config.json", run.snapshot())
        write_json(tmp / "report.json", report)
        (tmp / "report.txt").write_text(format_report(report) + "\n")
    print(format_report(report))
    return 0


def ablation_grid(cfg: ModelConfig, probe, gallery, p_raw: np.ndarray, g_raw: np.ndarray,
                  ops=ABLATION_OPS) -> list[dict]:
    """Rank-1 for every pooling mode x op plus the unpooled baseline (last row)."""
    rows = []
    for mode in POOL_MODES:
        for op in ops:
            prot = _protocol(cfg, probe, gallery, fd_pool(p_raw, op, mode), fd_pool(g_raw, op, mode))
            rows.append({"mode": mode, "op": op, "rank1": rank_k(prot, 1)})
    rows.append({"mode": "none", "op": None, "rank1": rank_k(_protocol(cfg, probe, gallery, p_raw, g_raw), 1)})
    return rows


def format_ablation(report: dict) -> str:
    rows = report["grid"]
    ops = sorted({r["op"] for r in rows if r["op"] is not None})
    lines = [" | ".join([f"{'mode':<15}"] + [f"{'op=' + str(op):>7}" for op in ops])]
    for mode in POOL_MODES:
        cells = {r["op"]: r["rank1"] for r in rows if r["mode"] == mode}
        lines.append(" | ".join([f"{mode:<15}"] + [f"{100 * cells[op]:7.2f}" for op in ops]))
    base = next(r for r in rows if r["op"] is None)
    lines.append(f"no pooling (dim {report['out_channels']}): {100 * base['rank1']:.2f}")
    return "\n".join(lines)


def cmd_ablate_fdpool(args) -> int:
    run = _setup(args, "ablate-fdpool")
    for op in ABLATION_OPS:
        _check_pooling(run.model, op, "average")
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    ds, run.data = load_data(args.data)
    _, probe, gallery = split(ds)
    run.options = {"checkpoint": str(args.checkpoint)}
    model = build_model(run.model, args.checkpoint)
    emb = raw_embeddings(model, probe + gallery)
    p_raw, g_raw = emb[:len(probe)], emb[len(probe):]
    grid = ablation_grid(run.model, probe, gallery, p_raw, g_raw)
    width = run.model.out_channels
    identity = _protocol(run.model, probe, gallery, fd_pool(p_raw, width), fd_pool(g_raw, width))
    report = {"schema_version": 1, "grid": grid, "out_channels": width, "probes": len(probe),
              "gallery": len(gallery), "average_full_width_rank1": rank_k(identity, 1)}
    with run_directory(args.out) as tmp:
        write_json(tmp / "config.json", run.snapshot())
        write_json(tmp / "ablation.json", report)
        (tmp / "ablation.txt").write_text(format_ablation(report) + "\n")
    print(format_ablation(report))
    return 0


def _parse_corrupt(items) -> dict[str, float]:
    out = {}
    for item in items or ():
        name, _, value = item.partition("=")
        try:
            out[name] = float(value or 1.0)
        except ValueError as exc:
            raise UsageError(f"--corrupt expects NAME=OFFSET, got {item!r}") from exc
    return out


def cmd_gradcheck(args) -> int:
    seed = DEFAULT_SEED if args.seed is None else args.seed
    components = tuple(args.components.split(",")) if args.components else COMPONENTS
    entries = run_suite(components, seed, _parse_corrupt(args.corrupt))
    table = format_table(entries)
    print(table)
    if args.out is not None:
        doc = {"schema_version": 1, "seed": seed, "components": list(components),
               "checks": [{"component": e.component, **asdict(e.result)} for e in entries]}
        with run_directory(args.out) as tmp:
            write_json(tmp / "config.json", {"schema_version": SNAPSHOT_VERSION, "msaff_version": __version__,
                                             "command": "gradcheck", "seed": seed,
                                             "options": {"components": list(components)}})
            write_json(tmp / "gradcheck.json", doc)
            (tmp / "gradcheck.txt").write_text(table + "\n")
    return 0 if all(e.result.passed for e in entries) else 2


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msaff", description="Multimodal gait recognition: train, evaluate, validate.")
    parser.add_argument("--version", action="version", version=f"msaff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", help="JSON model config or run snapshot")
        if data:
            p.add_argument("--data", help="dataset manifest.json or synthetic spec JSON")
        p.add_argument("--out", help="run directory to create (must not exist or be empty)")
        p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--data", help="synthetic spec JSON (defaults apply when omitted)")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train with the batch-all triplet loss")
    common(p)
    p.add_argument("--max-iterations", type=int, help="stop after this many iterations")
    p.add_argument("--checkpoint", help="initial weights")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--op", type=int, help="feature-dimension pooling width")
    p.add_argument("--pool-mode", default="average", help=f"one of {', '.join(POOL_MODES)}")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference suite on the micro config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--components", help=f"comma-separated subset of {','.join(COMPONENTS)}")
    p.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)  # negative-control hook
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate-fdpool", help="rank-1 over pooling modes x op values")
    common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(fn=cmd_ablate_fdpool)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "max_iterations", None) is not None and args.max_iterations < 0:
        print("msaff: error: --max-iterations must be >= 0", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (NumericalError, TrainingError) as exc:
        print(f"msaff: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (MsaffError, OSError) as exc:
        print(f"msaff: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
