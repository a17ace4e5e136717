"""Cross-entropy losses over cosine scores, their analytic gradients, the
episodic classifier fine-tuning loop that treats mined background embeddings
as pseudo-unknowns, and an optional linear embedding adapter trained
episodically.

No autograd framework is used. Gradients are derived by composing the
softmax cross-entropy gradient with the cosine-similarity Jacobian

    d/dw [ (w.q) / (|w||q|) ] = q / (|w||q|) - (w.q) w / (|w|^3 |q|)

and, for the adapter, the chain rule through the linear map and the
support-averaging step. Every gradient is checked against central finite
differences in the test suite and by the gradcheck command.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import islice
from typing import Iterable, Iterator

import numpy as np

from .classifier import PrototypeBank
from .featmap import EPS_NORM, EmbeddingVector


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    learning_rate: float = 0.002
    bkg_loss_weight: float = 0.05
    temperature: float = 10.0
    reassign_each_epoch: bool = True
    freeze_known: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.bkg_loss_weight <= 0:
            raise ValueError("bkg_loss_weight must be > 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass(frozen=True)
class LossReport:
    """loss_known and loss_background are the mean cross-entropy of the two
    query groups; total = loss_known + weight * loss_background. For the
    fine-tune loop, per_epoch_totals[e] is the total before the e-th step and
    the last entry is the total after the final step (epochs + 1 entries)."""

    loss_known: float
    loss_background: float
    total: float
    per_epoch_totals: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "loss_known": self.loss_known,
            "loss_background": self.loss_background,
            "total": self.total,
            "per_epoch_totals": list(self.per_epoch_totals),
        }


def _make_report(
    loss_known: float, loss_background: float, weight: float, trace: tuple[float, ...] = ()
) -> LossReport:
    return LossReport(
        loss_known=float(loss_known),
        loss_background=float(loss_background),
        total=float(loss_known + weight * loss_background),
        per_epoch_totals=trace,
    )


def _row_norms(matrix: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.flatnonzero(norms <= EPS_NORM)
    if bad.size:
        raise ValueError(f"{what} {int(bad[0])} has zero norm")
    return norms


def _cosine_matrix(weights: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unclipped cosine similarities, queries x rows, plus both norm vectors."""
    wn = _row_norms(weights, "prototype row")
    qn = _row_norms(queries, "embedding")
    scores = (queries / qn[:, None]) @ (weights / wn[:, None]).T
    return scores, wn, qn


def _stack(embeddings: Iterable[EmbeddingVector], dim: int) -> np.ndarray:
    rows = []
    for i, emb in enumerate(embeddings):
        if emb.dim != dim:
            raise ValueError(f"embedding {i} has dim {emb.dim}, expected {dim}")
        rows.append(emb.values)
    return np.stack(rows)


def prototype_batch_loss(
    weights: np.ndarray,
    embeddings: np.ndarray,
    labels: np.ndarray,
    item_weights: np.ndarray,
    temperature: float,
) -> float:
    """Weighted sum of per-item cross-entropies over cosine scores. This is the
    scalar the analytic prototype gradient differentiates; gradcheck probes it
    with finite differences."""
    scores, _, _ = _cosine_matrix(weights, embeddings)
    logits = temperature * scores
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    ce = log_z - shifted[np.arange(len(labels)), labels]
    return float(np.dot(item_weights, ce))


def _batch_ce_and_grad(
    weights: np.ndarray,
    embeddings: np.ndarray,
    labels: np.ndarray,
    item_weights: np.ndarray,
    temperature: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-item cross-entropies (unweighted) and the gradient of the weighted
    sum with respect to every prototype row."""
    scores, wn, qn = _cosine_matrix(weights, embeddings)
    logits = temperature * scores
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    z = exp.sum(axis=1)
    probs = exp / z[:, None]
    idx = np.arange(len(labels))
    ce = np.log(z) - shifted[idx, labels]

    delta = probs.copy()
    delta[idx, labels] -= 1.0
    dscore = temperature * delta * item_weights[:, None]  # items x rows
    term1 = (dscore / qn[:, None]).T @ embeddings / wn[:, None]
    term2 = ((dscore * scores).sum(axis=0) / wn**2)[:, None] * weights
    return ce, term1 - term2


def ce_loss_cosine(
    bank: PrototypeBank, embedding: EmbeddingVector, label: int, temperature: float = 10.0
) -> float:
    """Cross-entropy of the temperature-scaled cosine scores against `label`,
    which may name a known class or a background row."""
    if not 0 <= label < bank.num_rows:
        raise ValueError(f"label {label} outside [0, {bank.num_rows})")
    queries = embedding.values[None, :]
    if embedding.dim != bank.dim:
        raise ValueError(f"embedding dim {embedding.dim} does not match bank dim {bank.dim}")
    return prototype_batch_loss(
        bank.all_weights(), queries, np.array([label]), np.array([1.0]), temperature
    )


def grad_wrt_prototypes(
    bank: PrototypeBank,
    batch: list[tuple[EmbeddingVector, int, float]],
    temperature: float = 10.0,
) -> np.ndarray:
    """Exact gradient of sum_i weight_i * CE_i with respect to every prototype
    row, returned as a (num_rows x dim) matrix. Embeddings are inputs only and
    are never modified."""
    if not batch:
        raise ValueError("batch must be nonempty")
    embeddings = _stack((item[0] for item in batch), bank.dim)
    labels = np.array([item[1] for item in batch], dtype=np.intp)
    item_weights = np.array([item[2] for item in batch], dtype=np.float64)
    if np.any(item_weights <= 0):
        raise ValueError("item weights must be > 0")
    if labels.min() < 0 or labels.max() >= bank.num_rows:
        raise ValueError(f"batch labels must lie in [0, {bank.num_rows})")
    _, grad = _batch_ce_and_grad(bank.all_weights(), embeddings, labels, item_weights, temperature)
    return grad


def _assign_background_labels(
    weights: np.ndarray, num_known: int, embeddings: np.ndarray
) -> np.ndarray:
    """Pseudo-label each embedding with its most similar background row,
    offset into the joint index range."""
    bkg = weights[num_known:]
    scores, _, _ = _cosine_matrix(bkg, embeddings)
    return num_known + np.argmax(scores, axis=1)


def finetune_bank(
    bank: PrototypeBank,
    supports: list[tuple[EmbeddingVector, int]],
    backgrounds: list[EmbeddingVector],
    cfg: FinetuneConfig,
) -> tuple[PrototypeBank, LossReport]:
    """Full-batch SGD on the prototype rows, with background embeddings acting
    as pseudo-unknowns.

    Each epoch: background embeddings are pseudo-labeled with their nearest
    background row (once at epoch 0 unless reassign_each_epoch), the batch
    loss is evaluated, and one gradient step updates every row (background
    rows only when freeze_known). The step descends the summed batch loss
    with per-item weights 1 (supports) and bkg_loss_weight (backgrounds);
    the reported losses are the group means, so the reported total is the
    step objective divided by the support count when groups are equal-sized.
    The report carries the final loss components and the mean total at every
    epoch plus one final entry evaluated after the last step.
    """
    if bank.num_background < 1:
        raise ValueError("fine-tuning needs at least one background row")
    if not supports:
        raise ValueError("supports must be nonempty")
    if not backgrounds:
        raise ValueError("backgrounds must be nonempty")

    sup = _stack((emb for emb, _ in supports), bank.dim)
    sup_labels = np.array([label for _, label in supports], dtype=np.intp)
    if sup_labels.min() < 0 or sup_labels.max() >= bank.num_known:
        raise ValueError(f"support labels must lie in [0, {bank.num_known})")
    bkg = _stack(backgrounds, bank.dim)

    # the step optimizes the summed batch loss: weight 1 per support item,
    # bkg_loss_weight per background item; the report still carries the means
    n_sup, n_bkg = len(supports), len(backgrounds)
    embeddings = np.concatenate([sup, bkg], axis=0)
    item_weights = np.concatenate(
        [np.ones(n_sup), np.full(n_bkg, cfg.bkg_loss_weight)]
    )

    weights = bank.all_weights()
    num_known = bank.num_known
    pseudo: np.ndarray | None = None
    trace: list[float] = []

    def evaluate(current_pseudo: np.ndarray) -> tuple[float, float, np.ndarray, np.ndarray]:
        labels = np.concatenate([sup_labels, current_pseudo])
        ce, grad = _batch_ce_and_grad(weights, embeddings, labels, item_weights, cfg.temperature)
        loss_known = float(ce[:n_sup].mean())
        loss_background = float(ce[n_sup:].mean())
        return loss_known, loss_background, grad, labels

    loss_known = loss_background = 0.0
    for _ in range(cfg.epochs):
        if pseudo is None or cfg.reassign_each_epoch:
            pseudo = _assign_background_labels(weights, num_known, bkg)
        loss_known, loss_background, grad, _ = evaluate(pseudo)
        trace.append(loss_known + cfg.bkg_loss_weight * loss_background)
        if cfg.freeze_known:
            weights = weights.copy()
            weights[num_known:] -= cfg.learning_rate * grad[num_known:]
        else:
            weights = weights - cfg.learning_rate * grad

    if cfg.reassign_each_epoch:
        pseudo = _assign_background_labels(weights, num_known, bkg)
    assert pseudo is not None
    loss_known, loss_background, _, _ = evaluate(pseudo)
    trace.append(loss_known + cfg.bkg_loss_weight * loss_background)

    new_bank = PrototypeBank(weights[:num_known], weights[num_known:])
    return new_bank, _make_report(loss_known, loss_background, cfg.bkg_loss_weight, tuple(trace))


def episodic_loss(
    bank: PrototypeBank,
    known_queries: list[tuple[EmbeddingVector, int]],
    unknown_queries: list[EmbeddingVector],
    bkg_loss_weight: float = 0.05,
    temperature: float = 10.0,
) -> LossReport:
    """Mean CE of known queries against their true classes, plus the weighted
    mean CE of unknown queries against their nearest-background pseudo-label."""
    if not known_queries:
        raise ValueError("known_queries must be nonempty")
    weights = bank.all_weights()
    known = _stack((emb for emb, _ in known_queries), bank.dim)
    known_labels = np.array([label for _, label in known_queries], dtype=np.intp)
    if known_labels.min() < 0 or known_labels.max() >= bank.num_known:
        raise ValueError(f"known query labels must lie in [0, {bank.num_known})")
    ones = np.ones(len(known_queries))
    ce_known, _ = _batch_ce_and_grad(weights, known, known_labels, ones, temperature)
    loss_known = float(ce_known.mean())

    if not unknown_queries:
        return _make_report(loss_known, 0.0, bkg_loss_weight)
    if bank.num_background < 1:
        raise ValueError("unknown queries need at least one background row")
    unknown = _stack(unknown_queries, bank.dim)
    pseudo = _assign_background_labels(weights, bank.num_known, unknown)
    ce_unknown, _ = _batch_ce_and_grad(
        weights, unknown, pseudo, np.ones(len(unknown_queries)), temperature
    )
    return _make_report(loss_known, float(ce_unknown.mean()), bkg_loss_weight)


@dataclass
class LinearAdapter:
    """Learnable d x d map applied to raw embeddings before classification,
    standing in for trainable embedding parameters. Starts at identity."""

    matrix: np.ndarray
    enabled: bool = True

    @classmethod
    def identity(cls, dim: int) -> "LinearAdapter":
        return cls(matrix=np.eye(dim), enabled=True)

    def apply(self, embedding: EmbeddingVector) -> EmbeddingVector:
        return EmbeddingVector(self.matrix @ embedding.values)


@dataclass(frozen=True)
class AdapterEpisode:
    """One raw-embedding episode for adapter training. background_rows are
    fixed classifier rows used for the unknown-query loss term; they do not
    pass through the adapter."""

    supports: tuple[tuple[EmbeddingVector, int], ...]
    known_queries: tuple[tuple[EmbeddingVector, int], ...]
    unknown_queries: tuple[EmbeddingVector, ...] = ()
    background_rows: np.ndarray | None = None


def _class_means(
    supports: tuple[tuple[EmbeddingVector, int], ...], dim: int
) -> tuple[np.ndarray, int]:
    labels = sorted({label for _, label in supports})
    n_way = len(labels)
    if labels != list(range(n_way)):
        raise ValueError(f"support labels must be dense in [0, N), got {labels}")
    sums = np.zeros((n_way, dim))
    counts = np.zeros(n_way)
    for emb, label in supports:
        sums[label] += emb.values
        counts[label] += 1
    return sums / counts[:, None], n_way


def adapter_episode_loss(
    matrix: np.ndarray,
    episode: AdapterEpisode,
    bkg_loss_weight: float = 0.05,
    temperature: float = 10.0,
) -> LossReport:
    """Episodic loss with every embedding mapped through the adapter matrix and
    known prototypes rebuilt from the adapted supports."""
    if not episode.supports or not episode.known_queries:
        raise ValueError("adapter episode needs supports and known queries")
    dim = episode.supports[0][0].dim
    means, _ = _class_means(episode.supports, dim)
    known_rows = means @ matrix.T
    if episode.background_rows is not None and len(episode.background_rows) > 0:
        bank = PrototypeBank(known_rows, np.asarray(episode.background_rows, dtype=np.float64))
    else:
        bank = PrototypeBank(known_rows)
    known = [
        (EmbeddingVector(matrix @ emb.values), label) for emb, label in episode.known_queries
    ]
    unknown = [EmbeddingVector(matrix @ emb.values) for emb in episode.unknown_queries]
    return episodic_loss(bank, known, unknown, bkg_loss_weight, temperature)


def adapter_loss_and_grad(
    matrix: np.ndarray,
    episode: AdapterEpisode,
    bkg_loss_weight: float = 0.05,
    temperature: float = 10.0,
) -> tuple[LossReport, np.ndarray]:
    """Episodic loss plus its exact gradient with respect to the adapter.

    Both the known prototypes (adapted class means) and the query embeddings
    are functions of the matrix, so each query term contributes through the
    query path and through every known row; background rows are constants.
    """
    if not episode.supports or not episode.known_queries:
        raise ValueError("adapter episode needs supports and known queries")
    dim = episode.supports[0][0].dim
    if matrix.shape != (dim, dim):
        raise ValueError(f"adapter matrix must be {dim} x {dim}, got {matrix.shape}")
    means, n_way = _class_means(episode.supports, dim)
    known_rows = means @ matrix.T
    if episode.background_rows is not None and len(episode.background_rows) > 0:
        bkg_rows = np.array(episode.background_rows, dtype=np.float64)
    else:
        bkg_rows = np.zeros((0, dim))
    weights = np.concatenate([known_rows, bkg_rows], axis=0)
    wn = _row_norms(weights, "prototype row")

    n_known_q = len(episode.known_queries)
    n_unknown_q = len(episode.unknown_queries)
    grad = np.zeros((dim, dim))
    ce_known_sum = 0.0
    ce_unknown_sum = 0.0

    def accumulate(raw: np.ndarray, label: int, weight: float) -> float:
        q = matrix @ raw
        qn = float(np.linalg.norm(q))
        if qn <= EPS_NORM:
            raise ValueError("adapted query embedding has zero norm")
        s = (weights @ q) / (wn * qn)
        logits = temperature * s
        shifted = logits - logits.max()
        exp = np.exp(shifted)
        probs = exp / exp.sum()
        ce = float(np.log(exp.sum()) - shifted[label])
        dscore = temperature * probs
        dscore[label] -= temperature
        dscore *= weight
        # query path: dL/dq, then dq/dA = outer(., raw)
        g_q = (dscore / wn) @ weights / qn - float(dscore @ s) * q / qn**2
        grad_local = np.outer(g_q, raw)
        # prototype path: dL/dw_c for adapted rows, then dw_c/dA = outer(., mean_c)
        d_known = dscore[:n_way]
        g_w = (d_known / (wn[:n_way] * qn))[:, None] * q[None, :] - (
            d_known * s[:n_way] / wn[:n_way] ** 2
        )[:, None] * known_rows
        grad_local += g_w.T @ means
        nonlocal grad
        grad = grad + grad_local
        return ce

    for emb, label in episode.known_queries:
        if not 0 <= label < n_way:
            raise ValueError(f"known query label {label} outside [0, {n_way})")
        ce_known_sum += accumulate(emb.values, label, 1.0 / n_known_q)
    for emb in episode.unknown_queries:
        if bkg_rows.shape[0] < 1:
            raise ValueError("unknown queries need at least one background row")
        q = matrix @ emb.values
        sims = (bkg_rows @ q) / (np.linalg.norm(bkg_rows, axis=1) * np.linalg.norm(q))
        pseudo = n_way + int(np.argmax(sims))
        ce_unknown_sum += accumulate(emb.values, pseudo, bkg_loss_weight / n_unknown_q)

    loss_known = ce_known_sum / n_known_q
    loss_background = ce_unknown_sum / n_unknown_q if n_unknown_q else 0.0
    return _make_report(loss_known, loss_background, bkg_loss_weight), grad


def train_adapter(
    adapter: LinearAdapter,
    episodes: Iterable[AdapterEpisode] | Iterator[AdapterEpisode],
    cfg: FinetuneConfig,
    num_steps: int,
) -> LinearAdapter:
    """One SGD step per episode on the adapter matrix, num_steps episodes total
    (fewer if the stream runs out). num_steps = 0 returns the adapter as-is."""
    if not adapter.enabled:
        raise ValueError("adapter is disabled")
    if num_steps < 0:
        raise ValueError("num_steps must be >= 0")
    matrix = np.array(adapter.matrix, dtype=np.float64, copy=True)
    for episode in islice(iter(episodes), num_steps):
        _, grad = adapter_loss_and_grad(matrix, episode, cfg.bkg_loss_weight, cfg.temperature)
        matrix -= cfg.learning_rate * grad
    return LinearAdapter(matrix=matrix, enabled=True)
