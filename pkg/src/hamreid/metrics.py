"""Cross-camera retrieval evaluation: distances, CMC and mAP."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class EmbeddingSet:
    descriptors: np.ndarray  # n×D
    pids: np.ndarray
    camids: np.ndarray
    role: str = "query"
    paths: Sequence[str] | None = None

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2:
            raise ValueError(f"descriptors must be n×D, got shape {self.descriptors.shape}")
        self.pids = np.asarray(self.pids, dtype=np.int64)
        self.camids = np.asarray(self.camids, dtype=np.int64)
        n = len(self.descriptors)
        if self.pids.shape != (n,) or self.camids.shape != (n,):
            raise ValueError("pids and camids must match the descriptor rows")


@dataclass
class RankingResult:
    order: np.ndarray  # n_q×n_g gallery indices, nearest first
    ap: np.ndarray  # per query; NaN for queries without a valid match
    cmc: np.ndarray  # max_rank cumulative match rates
    mAP: float
    num_valid: int
    num_invalid: int

    def rank(self, r: int) -> float:
        return float(self.cmc[r - 1])

    def summary(self) -> str:
        ranks = [r for r in (1, 5, 10) if r <= len(self.cmc)]
        parts = [f"rank{r}={self.rank(r):.4f}" for r in ranks]
        return " ".join(parts + [f"mAP={self.mAP:.4f}"])


class ProtocolError(ValueError):
    pass


def pairwise_distances(q: EmbeddingSet | np.ndarray, g: EmbeddingSet | np.ndarray) -> np.ndarray:
    """Euclidean distances via ``|q|² + |g|² - 2 q·g``, clamped at 0 before the root."""
    qd = q.descriptors if isinstance(q, EmbeddingSet) else np.asarray(q, dtype=np.float64)
    gd = g.descriptors if isinstance(g, EmbeddingSet) else np.asarray(g, dtype=np.float64)
    if qd.shape[1] != gd.shape[1]:
        raise ValueError(f"descriptor widths differ: {qd.shape[1]} vs {gd.shape[1]}")
    sq = (qd * qd).sum(1)[:, None] + (gd * gd).sum(1)[None, :] - 2.0 * qd @ gd.T
    return np.sqrt(np.maximum(sq, 0.0))


def rank_gallery(dist: np.ndarray) -> np.ndarray:
    """Ascending distance, ties broken by gallery index."""
    return np.argsort(dist, axis=1, kind="stable")


def evaluate(q: EmbeddingSet, g: EmbeddingSet, max_rank: int = 10,
             dist: np.ndarray | None = None) -> RankingResult:
    """CMC and mAP under the cross-camera protocol.

    Gallery items sharing both pid and camera with the query are dropped, as
    are junk items (pid < 0). Queries left without any true match are excluded
    from the averages and counted in ``num_invalid``.
    """
    if dist is None:
        dist = pairwise_distances(q, g)
    order = rank_gallery(dist)
    cmc_sum = np.zeros(max_rank)
    ap = np.full(len(q.pids), np.nan)
    for i in range(len(q.pids)):
        gp, gc = g.pids[order[i]], g.camids[order[i]]
        keep = ~((gp == q.pids[i]) & (gc == q.camids[i])) & (gp >= 0)
        hits = gp[keep] == q.pids[i]
        if not hits.any():
            continue
        first = int(np.argmax(hits))
        if first < max_rank:
            cmc_sum[first:] += 1
        pos = np.flatnonzero(hits)
        # fsum is correctly rounded, so the result does not depend on summation order
        ap[i] = math.fsum(np.arange(1, len(pos) + 1) / (pos + 1)) / len(pos)
    valid = ~np.isnan(ap)
    nv = int(valid.sum())
    if nv == 0:
        raise ProtocolError("no query has a cross-camera match in the gallery")
    return RankingResult(order, ap, cmc_sum / nv, math.fsum(ap[valid]) / nv, nv, len(ap) - nv)


def write_report(result: RankingResult, path: str | Path) -> None:
    """``rank,cmc`` CSV; values printed with repr so reruns compare byte for byte."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "cmc"])
        for r, v in enumerate(result.cmc, start=1):
            w.writerow([r, repr(float(v))])
        w.writerow(["mAP", repr(result.mAP)])


def write_ranked_lists(result: RankingResult, q: EmbeddingSet, g: EmbeddingSet,
                       path: str | Path, top: int = 10) -> None:
    """One row per (query, rank) with the gallery path and a correct flag."""
    gpaths = g.paths if g.paths is not None else [str(i) for i in range(len(g.pids))]
    qpaths = q.paths if q.paths is not None else [str(i) for i in range(len(q.pids))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "rank", "gallery", "correct"])
        for i, row in enumerate(result.order):
            keep = [j for j in row if not (g.pids[j] == q.pids[i] and g.camids[j] == q.camids[i])
                    and g.pids[j] >= 0]
            for r, j in enumerate(keep[:top], start=1):
                w.writerow([qpaths[i], r, gpaths[j], int(g.pids[j] == q.pids[i])])
