"""Batch-all triplet training: loss, (p, k) sampling, Adam and the LR schedule."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DatasetError, NumericalError, TrainingError
from .numerics import Tensor, backward, matmul, mul, relu, reshape, sqrt, sub, sum_, transpose
from .numerics.checkpoint import save_checkpoint

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.2
REDUCTIONS = ("nonzero_mean", "mean")


@dataclass
class TripletBatch:
    silhouettes: np.ndarray  # [p*k, N, H, W]
    skeletons: np.ndarray  # [p*k, N, 3, Z]
    labels: np.ndarray  # [p*k]
    p: int
    k: int


def triplet_masks(labels) -> np.ndarray:
    """``valid[a, pos, neg]``: anchor/positive share a label (a != pos), negative differs."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    return pos[:, :, None] & ~same[:, None, :]


def part_distances(embeddings: Tensor) -> Tensor:
    """Euclidean distance matrix per part: ``[B,P,D]`` -> ``[P,B,B]``."""
    x = transpose(embeddings, (1, 0, 2))  # [P,B,D]
    P, B, _ = x.shape
    sq = sum_(mul(x, x), -1)  # [P,B]
    gram = matmul(x, transpose(x, (0, 2, 1)))
    d2 = sub(reshape(sq, (P, B, 1)) + reshape(sq, (P, 1, B)), mul(gram, 2.0))
    return sqrt(relu(d2))


def ba_triplet_loss(embeddings, labels, margin: float = DEFAULT_MARGIN, reduction: str = "nonzero_mean",
                    return_stats: bool = False):
    """Batch-all triplet loss on ``embeddings[B,P,D]``, evaluated per part.

    Every (anchor, positive, negative) triplet contributes
    ``max(0, margin + d(a,p) - d(a,n))``. With ``nonzero_mean`` each part
    averages only its positive terms (0 if none); parts are then averaged.
    """
    if reduction not in REDUCTIONS:
        raise TrainingError(f"reduction must be one of {REDUCTIONS}")
    emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    labels = np.asarray(labels)
    if emb.ndim != 3 or len(labels) != emb.shape[0]:
        raise TrainingError(f"need embeddings [B,P,D] with B labels, got {emb.shape} and {len(labels)} labels")
    if len(np.unique(labels)) < 2:
        raise TrainingError("batch-all triplet loss is undefined for a single-identity batch")
    valid = triplet_masks(labels)
    if not valid.any():
        raise TrainingError("no identity in the batch has two samples; no positive pairs")

    dist = part_distances(emb)
    P, B, _ = dist.shape
    terms = relu(sub(reshape(dist, (P, B, B, 1)) + margin, reshape(dist, (P, B, 1, B))))
    terms = mul(terms, valid.astype(np.float64))
    per_part = sum_(terms, (1, 2, 3))  # [P]
    active = (terms.data > 0).sum(axis=(1, 2, 3))
    if reduction == "nonzero_mean":
        denom = np.maximum(active, 1).astype(np.float64)
    else:
        denom = np.full(P, float(valid.sum()))
    loss = sum_(per_part / Tensor(denom)) * (1.0 / P)
    if return_stats:
        return loss, {"active_triplets": int(active.sum()), "valid_triplets": int(valid.sum()) * P}
    return loss


@dataclass(frozen=True)
class Schedule:
    total_iterations: int = 100_000
    base_lr: float = 1e-4
    milestones: tuple[int, ...] = (30_000, 60_000)
    gamma: float = 0.1

    def lr_at(self, iteration: int) -> float:
        # repeated multiplication so each milestone is an exact x gamma step
        lr = self.base_lr
        for m in self.milestones:
            if iteration >= m:
                lr *= self.gamma
        return lr

    @classmethod
    def for_preset(cls, preset: str) -> Schedule:
        if preset == "grew":
            return cls(210_000, 1e-4, (150_000,))
        return cls()


BATCH_SHAPES = {"casia_b": (8, 8), "gait3d": (32, 4), "grew": (32, 4)}


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = np.zeros(p.shape) if p.grad is None else p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            p.data = p.data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(float(self.t))}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i]
            out[f"v.{i}"] = self.v[i]
        return out


def group_by_identity(dataset) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, item in enumerate(dataset):
        groups.setdefault(item.subject_id, []).append(i)
    return groups


def sample_frames(length: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` sorted frame indices; without replacement when the clip is long enough."""
    return np.sort(rng.choice(length, size=n, replace=length < n))


def sample_batch(dataset, p: int, k: int, frames: int, rng: np.random.Generator) -> TripletBatch:
    """Draw p identities x k sequences, each cut to ``frames`` sorted frames.

    ``dataset`` is a sequence of items with ``subject_id``, ``silhouettes`` and
    ``skeletons`` attributes (see ``datakit.GaitSample``).
    """
    groups = group_by_identity(dataset)
    if len(groups) < p:
        raise DatasetError(f"need at least p={p} identities, dataset has {len(groups)}")
    ids = sorted(groups)
    chosen = rng.choice(len(ids), size=p, replace=False)
    sil, ske, labels = [], [], []
    for ci in chosen:
        members = groups[ids[ci]]
        picks = rng.choice(len(members), size=k, replace=len(members) < k)
        for j in picks:
            item = dataset[members[j]]
            idx = sample_frames(len(item.silhouettes), frames, rng)
            sil.append(item.silhouettes[idx])
            ske.append(item.skeletons[idx])
            labels.append(ids[ci])
    return TripletBatch(np.stack(sil), np.stack(ske), np.array(labels), p, k)


def _diagnose(model) -> str:
    bad = [name for name, p in model.named_parameters()
           if not np.isfinite(p.data).all() or (p.grad is not None and not np.isfinite(p.grad).all())]
    return f"non-finite parameters: {bad}" if bad else "no parameter holds non-finite values"


def train_step(model, optimizer: Adam, batch: TripletBatch, schedule: Schedule, iteration: int,
               margin: float = DEFAULT_MARGIN, reduction: str = "nonzero_mean") -> tuple[float, float]:
    """One Adam update at the schedule's LR for ``iteration``; returns ``(loss, lr)``."""
    lr = schedule.lr_at(iteration)
    model.zero_grad()
    try:
        emb = model(batch.silhouettes, batch.skeletons)
        loss = ba_triplet_loss(emb, batch.labels, margin, reduction)
        backward(loss)
    except NumericalError as exc:
        raise TrainingError(f"iteration {iteration}: {exc}; {_diagnose(model)}") from exc
    for name, p in model.named_parameters():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingError(f"iteration {iteration}: non-finite gradient in parameter {name}")
    optimizer.step(lr)
    return loss.item(), lr


class TrainingLog:
    """Append-only CSV with ``iteration,loss,lr`` rows."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("a", newline="")
        self._writer = csv.writer(self._fh)
        if new:
            self._writer.writerow(["iteration", "loss", "lr"])

    def write(self, iteration: int, loss: float, lr: float) -> None:
        self._writer.writerow([iteration, repr(float(loss)), repr(float(lr))])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"iteration": int(r["iteration"]), "loss": float(r["loss"]), "lr": float(r["lr"])}
                for r in csv.DictReader(fh)]


def fit(model, dataset, schedule: Schedule, p: int, k: int, frames: int, *, seed: int = 0,
        margin: float = DEFAULT_MARGIN, reduction: str = "nonzero_mean", max_iterations: int | None = None,
        out_dir=None, checkpoint_every: int = 0) -> list[float]:
    """Run the schedule (or ``max_iterations`` steps); returns the loss history."""
    rng = np.random.default_rng(seed)
    optimizer = Adam(model.parameters())
    total = schedule.total_iterations if max_iterations is None else max_iterations
    out = Path(out_dir) if out_dir is not None else None
    logger = TrainingLog(out / "train_log.csv") if out is not None else None
    losses = []
    try:
        for it in range(total):
            batch = sample_batch(dataset, p, k, frames, rng)
            loss, lr = train_step(model, optimizer, batch, schedule, it, margin, reduction)
            losses.append(loss)
            if logger:
                logger.write(it, loss, lr)
            if out is not None and checkpoint_every and (it + 1) % checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{it + 1:07d}.bin", model.state_dict(), {"iteration": it + 1})
            if it % 100 == 0:
                log.info("iter %d loss %.5f lr %.2e", it, loss, lr)
    finally:
        if logger:
            logger.close()
    if out is not None and total > 0:
        save_checkpoint(out / "final.bin", model.state_dict(), {"iteration": total})
    return losses
