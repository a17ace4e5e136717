"""Prototype classifier bank: known-class rows built from support averages,
background rows seeded by one of three strategies, and cosine scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featmap import EPS_NORM, EmbeddingVector

INIT_RANDOM = "random"
INIT_AVG = "avg"
INIT_GLOBAL = "global"
INIT_KINDS = (INIT_RANDOM, INIT_AVG, INIT_GLOBAL)

SCORE_MARGIN = "margin"
SCORE_NEG_MAX_KNOWN = "neg_max_known"
SCORE_KINDS = (SCORE_MARGIN, SCORE_NEG_MAX_KNOWN)


class PrototypeBank:
    """Joint classifier weights: known rows on [0, num_known), background rows
    on [num_known, num_known + num_background). Immutable once built."""

    __slots__ = ("_known", "_background")

    def __init__(self, known_weights, background_weights=None) -> None:
        known = np.array(known_weights, dtype=np.float64, copy=True)
        if known.ndim != 2 or known.shape[0] < 1 or known.shape[1] < 1:
            raise ValueError(f"known weights need shape N_known x dim, got {known.shape}")
        if background_weights is None:
            background = np.zeros((0, known.shape[1]))
        else:
            background = np.array(background_weights, dtype=np.float64, copy=True)
            if background.ndim != 2 or background.shape[1] != known.shape[1]:
                raise ValueError(
                    f"background weights need shape N_bkg x {known.shape[1]}, "
                    f"got {background.shape}"
                )
        if not np.all(np.isfinite(known)) or not np.all(np.isfinite(background)):
            raise ValueError("prototype weights contain non-finite values")
        known.flags.writeable = False
        background.flags.writeable = False
        self._known = known
        self._background = background

    @property
    def known_weights(self) -> np.ndarray:
        return self._known

    @property
    def background_weights(self) -> np.ndarray:
        return self._background

    @property
    def dim(self) -> int:
        return self._known.shape[1]

    @property
    def num_known(self) -> int:
        return self._known.shape[0]

    @property
    def num_background(self) -> int:
        return self._background.shape[0]

    @property
    def num_rows(self) -> int:
        return self.num_known + self.num_background

    def all_weights(self) -> np.ndarray:
        """Known rows stacked above background rows, (num_rows x dim)."""
        return np.concatenate([self._known, self._background], axis=0)

    def with_background(self, background_weights) -> "PrototypeBank":
        return PrototypeBank(self._known, background_weights)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "num_known": self.num_known,
            "num_background": self.num_background,
            "known_weights": self._known.tolist(),
            "background_weights": self._background.tolist(),
        }

    def __repr__(self) -> str:
        return (
            f"PrototypeBank(num_known={self.num_known}, "
            f"num_background={self.num_background}, dim={self.dim})"
        )


@dataclass
class InitStrategy:
    """How background rows get their starting values.

    random: rows drawn i.i.d. uniform on [-1/sqrt(d), +1/sqrt(d)] from `seed`.
    avg:    rows are means of a round-robin partition of mined background
            embeddings (a single row is the mean of all of them).
    global: rows are carried across episodes through `persisted_weights`;
            freshly seeded like `random` on first use.
    """

    kind: str = INIT_RANDOM
    seed: int = 0
    persisted_weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in INIT_KINDS:
            raise ValueError(f"unknown init kind {self.kind!r}, expected one of {INIT_KINDS}")


@dataclass(frozen=True)
class ScoreVector:
    """Cosine similarities of one query against every bank row."""

    known_scores: np.ndarray
    background_scores: np.ndarray

    def all_scores(self) -> np.ndarray:
        return np.concatenate([self.known_scores, self.background_scores])


@dataclass(frozen=True)
class Prediction:
    """Verdict for one query: a known class index or a background row index,
    plus a continuous unknownness score (higher means more likely unknown)."""

    is_unknown: bool
    index: int
    unknownness: float


def build_known_prototypes(
    support: list[tuple[EmbeddingVector, int]], n_way: int, k_shot: int
) -> PrototypeBank:
    """Class-mean prototypes from exactly k_shot embeddings per class.

    Shots are summed in a canonical lexicographic order, so any permutation of
    the support list produces bit-identical prototypes.
    """
    if n_way < 1 or k_shot < 1:
        raise ValueError("n_way and k_shot must be >= 1")
    groups: dict[int, list[np.ndarray]] = {c: [] for c in range(n_way)}
    for emb, label in support:
        if not 0 <= label < n_way:
            raise ValueError(f"support label {label} outside [0, {n_way})")
        groups[label].append(emb.values)
    rows = []
    for c in range(n_way):
        shots = groups[c]
        if len(shots) != k_shot:
            raise ValueError(f"class {c} has {len(shots)} support embeddings, expected {k_shot}")
        stacked = np.stack(shots)
        order = np.lexsort(stacked.T[::-1])
        proto = stacked[order].sum(axis=0) / k_shot
        if float(np.linalg.norm(proto)) <= EPS_NORM:
            raise ValueError(f"class {c} prototype has zero norm")
        rows.append(proto)
    return PrototypeBank(np.stack(rows))


def random_background_rows(num_background: int, dim: int, seed: int) -> np.ndarray:
    """I.i.d. uniform rows on [-1/sqrt(dim), +1/sqrt(dim)], the bound a
    fan-in-scaled uniform initializer gives a dim-input linear layer."""
    bound = 1.0 / np.sqrt(dim)
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(num_background, dim))


def init_background(
    bank: PrototypeBank,
    strategy: InitStrategy,
    num_background: int,
    bkg_embeddings: list[EmbeddingVector] | None = None,
) -> PrototypeBank:
    """Attach num_background freshly initialized rows to the bank.

    For the global strategy the freshly seeded rows are stored back onto the
    strategy so later episodes reuse them; fine-tuned weights are written back
    by the evaluation driver, not here.
    """
    if num_background < 0:
        raise ValueError("num_background must be >= 0")
    if num_background == 0:
        return bank.with_background(np.zeros((0, bank.dim)))
    d = bank.dim
    if strategy.kind == INIT_RANDOM:
        rows = random_background_rows(num_background, d, strategy.seed)
    elif strategy.kind == INIT_AVG:
        if not bkg_embeddings:
            raise ValueError("avg initialization needs at least one background embedding")
        if len(bkg_embeddings) < num_background:
            raise ValueError(
                f"avg initialization got {len(bkg_embeddings)} embeddings for "
                f"{num_background} background rows; every row needs at least one"
            )
        sums = np.zeros((num_background, d))
        counts = np.zeros(num_background)
        for i, emb in enumerate(bkg_embeddings):
            if emb.dim != d:
                raise ValueError(f"background embedding {i} has dim {emb.dim}, expected {d}")
            sums[i % num_background] += emb.values
            counts[i % num_background] += 1
        rows = sums / counts[:, None]
    elif strategy.kind == INIT_GLOBAL:
        if strategy.persisted_weights is None:
            rows = random_background_rows(num_background, d, strategy.seed)
            strategy.persisted_weights = rows.copy()
        else:
            persisted = np.asarray(strategy.persisted_weights, dtype=np.float64)
            if persisted.shape != (num_background, d):
                raise ValueError(
                    f"persisted global weights have shape {persisted.shape}, "
                    f"expected ({num_background}, {d})"
                )
            rows = persisted.copy()
    else:  # pragma: no cover - kind validated at construction
        raise ValueError(f"unknown init kind {strategy.kind!r}")
    return bank.with_background(rows)


def cosine_scores(bank: PrototypeBank, query: EmbeddingVector) -> ScoreVector:
    """Cosine similarity of the query against every known and background row."""
    q = query.values
    if q.shape[0] != bank.dim:
        raise ValueError(f"query dim {q.shape[0]} does not match bank dim {bank.dim}")
    qn = float(np.linalg.norm(q))
    if qn <= EPS_NORM:
        raise ValueError("query embedding has zero norm")
    weights = bank.all_weights()
    norms = np.linalg.norm(weights, axis=1)
    bad = np.flatnonzero(norms <= EPS_NORM)
    if bad.size:
        raise ValueError(f"prototype row {int(bad[0])} has zero norm")
    scores = np.clip((weights @ q) / (norms * qn), -1.0, 1.0)
    return ScoreVector(scores[: bank.num_known], scores[bank.num_known :])


def unknownness_score(scores: ScoreVector, kind: str = SCORE_MARGIN) -> float:
    """Continuous score for ranking queries by how unknown they look.

    margin: best background similarity minus best known similarity, monotone in
    the decision boundary the joint argmax induces. neg_max_known: negated best
    known similarity. A bank without background rows always falls back to the
    latter, since no margin exists.
    """
    if kind not in SCORE_KINDS:
        raise ValueError(f"unknown score kind {kind!r}, expected one of {SCORE_KINDS}")
    best_known = float(scores.known_scores.max())
    if kind == SCORE_NEG_MAX_KNOWN or scores.background_scores.size == 0:
        return -best_known
    return float(scores.background_scores.max()) - best_known


def predict(
    bank: PrototypeBank, query: EmbeddingVector, score_kind: str = SCORE_MARGIN
) -> Prediction:
    """Argmax over all rows; landing on a background row means unknown.

    Ties break toward the lowest row index. With no background rows the verdict
    is always a known class.
    """
    scores = cosine_scores(bank, query)
    best = int(np.argmax(scores.all_scores()))
    unknownness = unknownness_score(scores, score_kind)
    if best >= bank.num_known:
        return Prediction(True, best - bank.num_known, unknownness)
    return Prediction(False, best, unknownness)
