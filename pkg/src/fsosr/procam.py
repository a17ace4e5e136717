"""Class activation maps and the progressive mining loop that turns a support
feature map into a foreground mask and a background feature map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import PrototypeBank
from .featmap import (
    NORM_KINDS,
    NORM_MINMAX,
    ActivationMap,
    EmbeddingVector,
    FeatureMap,
    mask_apply,
    minmax_norm,
    spatial_avg_pool,
    spatial_softmax,
)


@dataclass(frozen=True)
class ProCamConfig:
    """iterations: how many activation maps get mined and superimposed.
    norm_kind selects the per-iteration normalization; the final aggregate is
    always min-max normalized so the mask stays in [0, 1]."""

    iterations: int = 4
    norm_kind: str = NORM_MINMAX
    include_trace: bool = False

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.norm_kind!r}, expected one of {NORM_KINDS}")


@dataclass(frozen=True)
class ProCamResult:
    final_mask: ActivationMap
    background_map: FeatureMap
    per_iteration_masks: tuple[ActivationMap, ...] | None = None


def cam(f: FeatureMap, w: EmbeddingVector) -> ActivationMap:
    """Per-location weighted channel sum: the raw activation map for the class
    whose classifier weights are w, before any normalization."""
    if w.dim != f.channels:
        raise ValueError(f"weight dim {w.dim} does not match feature channels {f.channels}")
    return ActivationMap(f.values @ w.values)


def _normalize_step(m: ActivationMap, norm_kind: str) -> ActivationMap:
    if norm_kind == NORM_MINMAX:
        return minmax_norm(m)
    return spatial_softmax(m, peak_rescale=True)


def procam(f: FeatureMap, w: EmbeddingVector, cfg: ProCamConfig) -> ProCamResult:
    """Progressive activation mining.

    Each iteration computes the activation map of the working features, masks
    the discovered region out, and continues on what is left, so later passes
    surface regions the first map missed. The normalized per-iteration maps are
    summed and min-max normalized into the final foreground mask; the
    background map is the original features suppressed by that mask.
    """
    working = f
    total = np.zeros((f.height, f.width))
    trace: list[ActivationMap] = []
    for _ in range(cfg.iterations):
        step = _normalize_step(cam(working, w), cfg.norm_kind)
        total = total + step.values
        working = mask_apply(working, step)
        if cfg.include_trace:
            trace.append(step)
    final_mask = minmax_norm(ActivationMap(total))
    return ProCamResult(
        final_mask=final_mask,
        background_map=mask_apply(f, final_mask),
        per_iteration_masks=tuple(trace) if cfg.include_trace else None,
    )


def background_embedding(result: ProCamResult) -> EmbeddingVector:
    """Pooled embedding of the masked-out background map."""
    return spatial_avg_pool(result.background_map)


def procam_for_support(
    supports: list[tuple[FeatureMap, int]], bank: PrototypeBank, cfg: ProCamConfig
) -> list[tuple[EmbeddingVector, EmbeddingVector]]:
    """(foreground, background) embedding pairs for every support item, mining
    each item with its own class prototype. Order follows the input."""
    out: list[tuple[EmbeddingVector, EmbeddingVector]] = []
    for fmap, label in supports:
        if not 0 <= label < bank.num_known:
            raise ValueError(f"no known prototype for class {label} (bank has {bank.num_known})")
        weight = EmbeddingVector(bank.known_weights[label])
        result = procam(fmap, weight, cfg)
        out.append((spatial_avg_pool(fmap), background_embedding(result)))
    return out


def mask_iou(mask: ActivationMap, truth, threshold: float = 0.5) -> float:
    """Intersection over union between the mask thresholded at `threshold` and
    a binary ground-truth map. Both empty counts as perfect agreement."""
    pred = mask.values >= threshold
    gt = np.asarray(truth, dtype=bool)
    if gt.shape != pred.shape:
        raise ValueError(f"truth shape {gt.shape} does not match mask {pred.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)
