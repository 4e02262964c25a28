"""Retrieval metrics (rank-k / CMC, mAP, mINP) and the CASIA-B cross-view table."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ProtocolError, ShapeError
from .model import GaitEmbedding, pairwise_distance

SCHEMA_VERSION = 1
DEFAULT_RANKS = (1, 5, 10, 20)


@dataclass
class RetrievalProtocol:
    """Distances plus the admissibility of each (probe, gallery) pair."""

    distances: np.ndarray  # [Q, G]
    probe_labels: np.ndarray
    gallery_labels: np.ndarray
    admissible: np.ndarray  # bool [Q, G]
    probe_views: np.ndarray | None = None
    gallery_views: np.ndarray | None = None
    probe_conditions: np.ndarray | None = None

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.probe_labels = np.asarray(self.probe_labels)
        self.gallery_labels = np.asarray(self.gallery_labels)
        self.admissible = np.asarray(self.admissible, dtype=bool)
        Q, G = self.distances.shape
        if self.admissible.shape != (Q, G) or len(self.probe_labels) != Q or len(self.gallery_labels) != G:
            raise ShapeError("protocol arrays disagree on probe/gallery sizes")

    @classmethod
    def from_embeddings(cls, probe: Sequence[GaitEmbedding], gallery: Sequence[GaitEmbedding],
                        exclude_same_view: bool = False) -> RetrievalProtocol:
        p = np.stack([e.values for e in probe])
        g = np.stack([e.values for e in gallery])
        pv = np.array([e.view for e in probe])
        gv = np.array([e.view for e in gallery])
        admissible = np.ones((len(probe), len(gallery)), dtype=bool)
        if exclude_same_view:
            admissible &= pv[:, None] != gv[None, :]
        return cls(pairwise_distance(p, g), np.array([e.subject_id for e in probe]),
                   np.array([e.subject_id for e in gallery]), admissible, pv, gv,
                   np.array([e.condition for e in probe]))

    def restrict(self, probe_mask, gallery_mask) -> RetrievalProtocol:
        pm, gm = np.asarray(probe_mask, bool), np.asarray(gallery_mask, bool)

        def sub(a, m):
            return None if a is None else a[m]

        return RetrievalProtocol(self.distances[np.ix_(pm, gm)], self.probe_labels[pm], self.gallery_labels[gm],
                                 self.admissible[np.ix_(pm, gm)], sub(self.probe_views, pm),
                                 sub(self.gallery_views, gm), sub(self.probe_conditions, pm))


def ranked_matches(protocol: RetrievalProtocol, q: int) -> np.ndarray:
    """Boolean same-identity flags of probe ``q``'s admissible gallery, nearest first.

    Ties keep gallery order (stable sort over ascending gallery indices).
    """
    cand = np.flatnonzero(protocol.admissible[q])
    order = cand[np.argsort(protocol.distances[q, cand], kind="stable")]
    matches = protocol.gallery_labels[order] == protocol.probe_labels[q]
    if not matches.any():
        raise ProtocolError(f"probe {q} (identity {str(protocol.probe_labels[q])!r}) has no admissible gallery match")
    return matches


def _per_probe(protocol: RetrievalProtocol, fn, workers: int = 1) -> np.ndarray:
    Q = len(protocol.probe_labels)
    if Q == 0:
        raise ProtocolError("protocol has no probes")
    if workers <= 1:
        return np.array([fn(ranked_matches(protocol, q)) for q in range(Q)], dtype=np.float64)
    with ThreadPoolExecutor(workers) as pool:
        return np.array(list(pool.map(lambda q: fn(ranked_matches(protocol, q)), range(Q))), dtype=np.float64)


def _mean(values) -> float:
    # correctly rounded sum: the result does not depend on summation order
    values = list(values)
    return math.fsum(values) / len(values)


def average_precision(matches: np.ndarray) -> float:
    hits = (np.flatnonzero(matches) + 1).tolist()  # 1-based ranks of relevant items
    return _mean((i + 1) / r for i, r in enumerate(hits))


def inverse_negative_penalty(matches: np.ndarray) -> float:
    hits = np.flatnonzero(matches) + 1
    return len(hits) / int(hits[-1])


def rank_k(protocol: RetrievalProtocol, k: int, workers: int = 1) -> float:
    if k < 1:
        raise ProtocolError(f"k must be >= 1, got {k}")
    return _mean(_per_probe(protocol, lambda m: m[:k].any(), workers).tolist())


def cmc(protocol: RetrievalProtocol, ranks: Sequence[int] = DEFAULT_RANKS) -> dict[int, float]:
    first = _per_probe(protocol, lambda m: np.flatnonzero(m)[0] + 1)
    return {k: _mean((first <= k).tolist()) for k in ranks}


def mean_ap(protocol: RetrievalProtocol, workers: int = 1) -> float:
    return _mean(_per_probe(protocol, average_precision, workers).tolist())


def mean_inp(protocol: RetrievalProtocol, workers: int = 1) -> float:
    return _mean(_per_probe(protocol, inverse_negative_penalty, workers).tolist())


def cross_view_rank1(protocol: RetrievalProtocol) -> dict:
    """Rank-1 per probe condition and probe view, averaged over gallery views != probe view.

    Returns ``{condition: {probe_view: acc, ..., "mean": acc}}``.
    """
    if protocol.probe_views is None or protocol.gallery_views is None:
        raise ProtocolError("cross-view evaluation needs view tags")
    conditions = protocol.probe_conditions if protocol.probe_conditions is not None else np.full(
        len(protocol.probe_labels), "all")
    table: dict = {}
    views = sorted(set(protocol.probe_views.tolist()))
    gviews = sorted(set(protocol.gallery_views.tolist()))
    for cond in sorted(set(conditions.tolist())):
        row = {}
        for pv in views:
            accs = []
            for gv in gviews:
                if gv == pv:
                    continue
                sub = protocol.restrict((conditions == cond) & (protocol.probe_views == pv),
                                        protocol.gallery_views == gv)
                if len(sub.probe_labels) == 0:
                    continue
                accs.append(rank_k(sub, 1))
            if accs:
                row[pv] = _mean(accs)
        if row:
            row["mean"] = _mean(row.values())
            table[cond] = row
    return table


def evaluate(protocol: RetrievalProtocol, ranks: Sequence[int] = DEFAULT_RANKS, **extra) -> dict:
    """JSON-ready report: rank-k for each k, mAP, mINP and sizes."""
    curve = cmc(protocol, ranks)
    report = {
        "schema_version": SCHEMA_VERSION,
        "probes": int(len(protocol.probe_labels)),
        "gallery": int(len(protocol.gallery_labels)),
        "rank": {str(k): v for k, v in curve.items()},
        "mAP": mean_ap(protocol),
        "mINP": mean_inp(protocol),
    }
    report.update(extra)
    return report


def format_report(report: dict) -> str:
    """Plain-text table derived from a report dict."""
    ranks = list(report["rank"])
    head = ["Rank-" + k for k in ranks] + ["mAP", "mINP"]
    vals = [100 * report["rank"][k] for k in ranks] + [100 * report["mAP"], 100 * report["mINP"]]
    lines = []
    if "embedding_shape" in report:
        lines.append(f"Embedding: {' x '.join(str(v) for v in report['embedding_shape'])}"
                     + (f" (FD pooling op={report['op']}, {report.get('pool_mode')})" if report.get("op") else ""))
    lines.append(f"Probes: {report['probes']}  Gallery: {report['gallery']}")
    lines.append(" | ".join(f"{h:>8}" for h in head))
    lines.append(" | ".join(f"{v:8.2f}" for v in vals))
    if report.get("cross_view"):
        lines.append("")
        table = report["cross_view"]
        views = sorted({v for row in table.values() for v in row if v != "mean"})
        lines.append(" | ".join([f"{'Probe':>6}"] + [f"{v:>6}" for v in views] + [f"{'Mean':>6}"]))
        for cond, row in table.items():
            cells = [f"{100 * row[v]:6.1f}" if v in row else f"{'-':>6}" for v in views]
            lines.append(" | ".join([f"{cond:>6}"] + cells + [f"{100 * row['mean']:6.1f}"]))
    return "\n".join(lines)
