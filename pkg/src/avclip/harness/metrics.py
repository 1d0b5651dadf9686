"""Text-to-video retrieval metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class RetrievalResult:
    r1: float
    r5: float
    r10: float
    mnr: float
    ranks: list = field(default_factory=list)

    def as_dict(self, with_ranks: bool = True) -> dict:
        out = asdict(self)
        if not with_ranks:
            out.pop("ranks")
        return out


def true_ranks(sim, truth=None) -> np.ndarray:
    """1-indexed rank of each query's true gallery item.

    Items scoring strictly higher rank ahead of the true item; items tied with
    it rank ahead only when their gallery index is smaller.
    """
    sim = np.asarray(getattr(sim, "data", sim), dtype=float)
    q, g = sim.shape
    truth = np.arange(q) if truth is None else np.asarray(truth)
    if truth.shape != (q,):
        raise ValueError(f"need one truth index per query, got shape {truth.shape}")
    if truth.min(initial=0) < 0 or truth.max(initial=0) >= g:
        raise IndexError(f"truth index outside gallery of size {g}")
    target = sim[np.arange(q), truth][:, None]
    ahead = (sim > target) | ((sim == target) & (np.arange(g)[None, :] < truth[:, None]))
    return ahead.sum(axis=1) + 1


def rank_metrics(sim, truth=None) -> RetrievalResult:
    """R@1/5/10 in percent and mean rank for a ``(queries, gallery)`` score matrix."""
    ranks = true_ranks(sim, truth)
    recall = lambda k: float(100.0 * np.mean(ranks <= k))  # noqa: E731
    return RetrievalResult(recall(1), recall(5), recall(10), float(ranks.mean()), ranks.tolist())
