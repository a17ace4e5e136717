"""Closed-set accuracy, rank-based unknown-detection AUROC, and multi-episode
aggregation with normal-approximation confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class EpisodeMetrics:
    """accuracy covers known queries only; auroc is None exactly when one of
    the two query groups is empty."""

    accuracy: float
    auroc: float | None
    n_known: int
    n_unknown: int

    def __post_init__(self) -> None:
        degenerate = self.n_known == 0 or self.n_unknown == 0
        if degenerate and self.auroc is not None:
            raise ValueError("auroc must be None when either query group is empty")
        if not degenerate and self.auroc is None:
            raise ValueError("auroc missing although both query groups are nonempty")


@dataclass(frozen=True)
class AggregateMetrics:
    mean_accuracy: float
    mean_auroc: float
    ci95_accuracy: float
    ci95_auroc: float
    n_episodes: int

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "mean_auroc": self.mean_auroc,
            "ci95_accuracy": self.ci95_accuracy,
            "ci95_auroc": self.ci95_auroc,
            "n_episodes": self.n_episodes,
        }


def accuracy(pairs: Iterable[tuple[int | None, int]]) -> float:
    """Fraction of known queries assigned their true class. A prediction of
    None means the query was rejected as unknown, which counts as an error."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("accuracy needs at least one prediction")
    hits = sum(1 for predicted, truth in pairs if predicted is not None and predicted == truth)
    return hits / len(pairs)


def _midranks(values: np.ndarray) -> np.ndarray:
    """Fractional ranks starting at 1; tied values share the mean of the ranks
    they span."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(known_scores: Sequence[float], unknown_scores: Sequence[float]) -> float:
    """Rank-based estimate of the probability that a random unknown query
    scores above a random known one, ties counting half. Equals the area under
    the threshold-swept ROC curve with unknown as the positive class."""
    known = np.asarray(known_scores, dtype=np.float64)
    unknown = np.asarray(unknown_scores, dtype=np.float64)
    if known.size == 0 or unknown.size == 0:
        raise ValueError("auroc needs at least one known and one unknown score")
    ranks = _midranks(np.concatenate([known, unknown]))
    rank_sum = float(ranks[known.size :].sum())
    n_u = unknown.size
    return (rank_sum - n_u * (n_u + 1) / 2.0) / (n_u * known.size)


def _ci95(values: np.ndarray) -> float:
    if values.size <= 1:
        return 0.0
    return 1.96 * float(values.std(ddof=1)) / float(np.sqrt(values.size))


def aggregate(per_episode: Sequence[EpisodeMetrics]) -> AggregateMetrics:
    """Arithmetic means over episodes with 1.96 * stddev / sqrt(n) intervals.
    Episodes without an AUROC are skipped for the AUROC statistics."""
    if not per_episode:
        raise ValueError("aggregate needs at least one episode")
    accs = np.array([m.accuracy for m in per_episode])
    aucs = np.array([m.auroc for m in per_episode if m.auroc is not None])
    if aucs.size == 0:
        raise ValueError("no episode carries an AUROC")
    return AggregateMetrics(
        mean_accuracy=float(accs.mean()),
        mean_auroc=float(aucs.mean()),
        ci95_accuracy=_ci95(accs),
        ci95_auroc=_ci95(aucs),
        n_episodes=len(per_episode),
    )
