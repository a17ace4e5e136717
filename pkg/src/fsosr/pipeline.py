"""End-to-end episode evaluation: configuration, the per-episode pipeline
(sample, prototype, mine, fine-tune, score), results bundles on disk, and the
randomized finite-difference gradient check harness."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .classifier import (
    INIT_AVG,
    INIT_GLOBAL,
    INIT_KINDS,
    SCORE_KINDS,
    SCORE_NEG_MAX_KNOWN,
    InitStrategy,
    PrototypeBank,
    build_known_prototypes,
    init_background,
    predict,
)
from .dataset_io import read_dataset
from .episode import EpisodeSpec, FeatureDataset, derive_episode_seed, sample_episode
from .featmap import NORM_KINDS, NORM_MINMAX, EmbeddingVector, spatial_avg_pool
from .finetune import (
    AdapterEpisode,
    FinetuneConfig,
    adapter_episode_loss,
    adapter_loss_and_grad,
    finetune_bank,
    grad_wrt_prototypes,
    prototype_batch_loss,
)
from .metrics import EpisodeMetrics, accuracy, aggregate, auroc
from .procam import ProCamConfig, procam_for_support

BUNDLE_FORMAT_VERSION = 1


@dataclass
class RunConfig:
    """Everything a full evaluation run needs. The stage toggles compose the
    ablation ladder: plain prototype classifier, plus background rows, plus
    mined-background fine-tuning of the background rows only (freeze_known),
    plus fine-tuning all rows, with iterations > 1 switching single-pass
    activation maps to progressive mining."""

    dataset: str
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 10
    n_open_classes: int = 5
    n_open_query: int | None = None
    iterations: int = 4
    norm_kind: str = NORM_MINMAX
    epochs: int = 20
    learning_rate: float = 0.002
    bkg_loss_weight: float = 0.05
    temperature: float = 10.0
    reassign_each_epoch: bool = True
    init_kind: str = "random"
    num_background: int = 2
    num_episodes: int = 600
    master_seed: int = 0
    use_background_classes: bool = True
    use_procam_finetune: bool = True
    freeze_known: bool = False
    score_kind: str = "margin"
    pooled_auroc: bool = False
    output_dir: str | None = None
    workers: int = 1
    dump_last_bank: bool = False

    def __post_init__(self) -> None:
        if self.init_kind not in INIT_KINDS:
            raise ValueError(f"unknown init kind {self.init_kind!r}, expected one of {INIT_KINDS}")
        if self.score_kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.score_kind!r}, expected one of {SCORE_KINDS}")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.norm_kind!r}, expected one of {NORM_KINDS}")
        if self.num_episodes < 1:
            raise ValueError("num_episodes must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.use_background_classes and self.num_background < 1:
            raise ValueError("background classes enabled but num_background < 1")

    def resolved_open_query(self) -> int:
        return self.n_query if self.n_open_query is None else self.n_open_query

    def episode_spec(self, seed: int) -> EpisodeSpec:
        return EpisodeSpec(
            n_way=self.n_way,
            k_shot=self.k_shot,
            n_query=self.n_query,
            n_open_classes=self.n_open_classes,
            n_open_query=self.resolved_open_query(),
            seed=seed,
        )

    def procam_config(self) -> ProCamConfig:
        return ProCamConfig(iterations=self.iterations, norm_kind=self.norm_kind)

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            bkg_loss_weight=self.bkg_loss_weight,
            temperature=self.temperature,
            reassign_each_epoch=self.reassign_each_epoch,
            freeze_known=self.freeze_known,
        )

    def snapshot(self) -> dict:
        """Result-affecting configuration only. Execution details (workers,
        output paths, dump flags) are excluded so identical configs yield
        byte-identical bundles no matter how the run was executed."""
        return {
            "dataset": self.dataset,
            "episode": {
                "n_way": self.n_way,
                "k_shot": self.k_shot,
                "n_query": self.n_query,
                "n_open_classes": self.n_open_classes,
                "n_open_query": self.resolved_open_query(),
            },
            "procam": {"iterations": self.iterations, "norm_kind": self.norm_kind},
            "finetune": {
                "epochs": self.epochs,
                "learning_rate": self.learning_rate,
                "bkg_loss_weight": self.bkg_loss_weight,
                "temperature": self.temperature,
                "reassign_each_epoch": self.reassign_each_epoch,
                "freeze_known": self.freeze_known,
            },
            "init": {"kind": self.init_kind, "num_background": self.num_background},
            "stages": {
                "use_background_classes": self.use_background_classes,
                "use_procam_finetune": self.use_procam_finetune,
                "score_kind": self.score_kind,
            },
            "num_episodes": self.num_episodes,
            "master_seed": self.master_seed,
            "pooled_auroc": self.pooled_auroc,
        }


@dataclass
class ResultsBundle:
    """Per-episode rows plus the aggregate, reproducible bit-for-bit from the
    config snapshot and master seed."""

    format_version: int
    config: dict
    episodes: list[dict]
    aggregate: dict
    pooled_auroc: float | None = None
    last_bank: dict | None = None
    last_loss: dict | None = None

    def episodes_csv_text(self) -> str:
        lines = ["episode,seed,accuracy,auroc"]
        for row in self.episodes:
            lines.append(f"{row['episode']},{row['seed']},{row['accuracy']!r},{row['auroc']!r}")
        return "\n".join(lines) + "\n"

    def summary_json_text(self) -> str:
        payload = {
            "format_version": self.format_version,
            "config": self.config,
            "aggregate": self.aggregate,
        }
        if self.pooled_auroc is not None:
            payload["pooled_auroc"] = self.pooled_auroc
        if self.last_bank is not None:
            payload["last_bank"] = self.last_bank
        if self.last_loss is not None:
            payload["last_loss"] = self.last_loss
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def write(self, output_dir) -> tuple[Path, Path]:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "episodes.csv"
        json_path = out / "summary.json"
        csv_path.write_text(self.episodes_csv_text())
        json_path.write_text(self.summary_json_text())
        return csv_path, json_path


def validate_dataset_for_config(ds: FeatureDataset, cfg: RunConfig) -> None:
    """Fail with a descriptive error before any episode runs."""
    need_classes = cfg.n_way + cfg.n_open_classes
    if ds.num_classes < need_classes:
        raise ValueError(
            f"dataset has {ds.num_classes} classes but episodes need {need_classes} "
            f"({cfg.n_way} closed + {cfg.n_open_classes} open)"
        )
    need_items = max(cfg.k_shot + cfg.n_query, cfg.resolved_open_query())
    smallest = min((len(idx), c) for c, idx in ds.class_index.items())
    if smallest[0] < need_items:
        raise ValueError(
            f"class {smallest[1]} has {smallest[0]} items but episodes may need {need_items}"
        )


def evaluate_episode(
    ds: FeatureDataset, cfg: RunConfig, index: int, global_strategy: InitStrategy | None = None
) -> dict:
    """Run the full pipeline for episode `index` and return a plain record:
    sample, build known prototypes, mine backgrounds, init and fine-tune the
    background rows, then score every query."""
    sample_seed = derive_episode_seed(cfg.master_seed, index, stream=0)
    episode = sample_episode(ds, cfg.episode_spec(sample_seed))
    support_emb = [(spatial_avg_pool(f), c) for f, c in episode.support]
    bank = build_known_prototypes(support_emb, cfg.n_way, cfg.k_shot)

    loss_report = None
    if cfg.use_background_classes:
        needs_mining = cfg.use_procam_finetune or cfg.init_kind == INIT_AVG
        bg_embeddings = None
        if needs_mining:
            pairs = procam_for_support(list(episode.support), bank, cfg.procam_config())
            bg_embeddings = [bg for _, bg in pairs]
        if cfg.init_kind == INIT_GLOBAL:
            strategy = global_strategy or InitStrategy(
                INIT_GLOBAL, seed=derive_episode_seed(cfg.master_seed, 0, stream=1)
            )
        else:
            strategy = InitStrategy(
                cfg.init_kind, seed=derive_episode_seed(cfg.master_seed, index, stream=1)
            )
        bank = init_background(bank, strategy, cfg.num_background, bg_embeddings)
        if cfg.use_procam_finetune:
            bank, loss_report = finetune_bank(bank, support_emb, bg_embeddings, cfg.finetune_config())
            if strategy.kind == INIT_GLOBAL:
                strategy.persisted_weights = np.array(bank.background_weights)

    score_kind = cfg.score_kind if cfg.use_background_classes else SCORE_NEG_MAX_KNOWN
    acc_pairs: list[tuple[int | None, int]] = []
    known_scores: list[float] = []
    unknown_scores: list[float] = []
    for fmap, truth in episode.known_queries:
        pred = predict(bank, spatial_avg_pool(fmap), score_kind)
        acc_pairs.append((None if pred.is_unknown else pred.index, truth))
        known_scores.append(pred.unknownness)
    for fmap in episode.unknown_queries:
        unknown_scores.append(predict(bank, spatial_avg_pool(fmap), score_kind).unknownness)

    return {
        "episode": index,
        "seed": sample_seed,
        "accuracy": accuracy(acc_pairs),
        "auroc": auroc(known_scores, unknown_scores),
        "n_known": len(known_scores),
        "n_unknown": len(unknown_scores),
        "known_scores": known_scores,
        "unknown_scores": unknown_scores,
        "bank": bank.to_dict() if cfg.dump_last_bank else None,
        "loss": loss_report.to_dict() if cfg.dump_last_bank and loss_report else None,
    }


_WORKER_STATE: dict = {}


def _worker_init(cfg: RunConfig) -> None:
    _WORKER_STATE["cfg"] = cfg
    _WORKER_STATE["ds"] = read_dataset(cfg.dataset)


def _worker_run(index: int) -> dict:
    return evaluate_episode(_WORKER_STATE["ds"], _WORKER_STATE["cfg"], index)


def run_eval(cfg: RunConfig) -> ResultsBundle:
    """Evaluate num_episodes episodes and assemble (and optionally write) the
    results bundle. The global init strategy shares state across episodes, so
    it always runs on a single worker."""
    ds = read_dataset(cfg.dataset)
    validate_dataset_for_config(ds, cfg)

    workers = 1 if cfg.init_kind == INIT_GLOBAL else cfg.workers
    if workers == 1:
        global_strategy = InitStrategy(
            INIT_GLOBAL, seed=derive_episode_seed(cfg.master_seed, 0, stream=1)
        )
        records = [
            evaluate_episode(ds, cfg, i, global_strategy) for i in range(cfg.num_episodes)
        ]
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_worker_init, initargs=(cfg,)
        ) as pool:
            records = list(pool.map(_worker_run, range(cfg.num_episodes), chunksize=8))

    per_episode = [
        EpisodeMetrics(
            accuracy=r["accuracy"], auroc=r["auroc"], n_known=r["n_known"], n_unknown=r["n_unknown"]
        )
        for r in records
    ]
    agg = aggregate(per_episode)

    pooled = None
    if cfg.pooled_auroc:
        pooled = auroc(
            [s for r in records for s in r["known_scores"]],
            [s for r in records for s in r["unknown_scores"]],
        )

    bundle = ResultsBundle(
        format_version=BUNDLE_FORMAT_VERSION,
        config=cfg.snapshot(),
        episodes=[
            {"episode": r["episode"], "seed": r["seed"], "accuracy": r["accuracy"], "auroc": r["auroc"]}
            for r in records
        ],
        aggregate=agg.to_dict(),
        pooled_auroc=pooled,
        last_bank=records[-1]["bank"] if cfg.dump_last_bank else None,
        last_loss=records[-1]["loss"] if cfg.dump_last_bank else None,
    )
    if cfg.output_dir is not None:
        bundle.write(cfg.output_dir)
    return bundle


def finite_difference(fn: Callable[[np.ndarray], float], x0: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry."""
    x = np.array(x0, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn(x)
        flat[i] = orig - step
        f_minus = fn(x)
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float((np.abs(analytic - numeric) / denom).max())


DEFAULT_PROTOTYPE_SHAPES: tuple[tuple[int, int, int], ...] = (
    (5, 1, 8),
    (5, 2, 8),
    (5, 5, 8),
    (5, 1, 64),
    (5, 2, 64),
    (5, 5, 64),
)
GRADCHECK_THRESHOLD = 1e-4


def _random_prototype_case(rng: np.random.Generator, shape: tuple[int, int, int]):
    n_known, n_background, dim = shape
    rows = rng.normal(size=(n_known + n_background, dim))
    bank = PrototypeBank(rows[:n_known], rows[n_known:])
    batch = []
    for _ in range(n_known + n_background):
        label = int(rng.integers(0, n_known + n_background))
        weight = 1.0 if label < n_known else 0.05
        batch.append((EmbeddingVector(rng.normal(size=dim)), label, weight))
    return bank, batch


def _random_adapter_case(rng: np.random.Generator, dim: int) -> tuple[np.ndarray, AdapterEpisode]:
    n_way, k_shot = 3, 2
    supports = tuple(
        (EmbeddingVector(rng.normal(size=dim)), c) for c in range(n_way) for _ in range(k_shot)
    )
    known = tuple(
        (EmbeddingVector(rng.normal(size=dim)), int(rng.integers(0, n_way))) for _ in range(4)
    )
    unknown = tuple(EmbeddingVector(rng.normal(size=dim)) for _ in range(3))
    bkg_rows = rng.normal(size=(2, dim))
    matrix = np.eye(dim) + 0.1 * rng.normal(size=(dim, dim))
    return matrix, AdapterEpisode(supports, known, unknown, bkg_rows)


def gradcheck_report(
    seed: int = 0,
    trials: int = 20,
    prototype_shapes: Sequence[tuple[int, int, int]] = DEFAULT_PROTOTYPE_SHAPES,
    adapter_dim: int = 8,
    temperature: float = 10.0,
    perturb: float = 0.0,
) -> dict:
    """Randomized finite-difference checks of both analytic gradients.

    `perturb` adds a constant offset to the analytic gradients; it exists so a
    broken gradient demonstrably fails the check.
    """
    rng = np.random.default_rng(seed)
    proto_err = 0.0
    for t in range(trials):
        bank, batch = _random_prototype_case(rng, tuple(prototype_shapes[t % len(prototype_shapes)]))
        analytic = grad_wrt_prototypes(bank, batch, temperature) + perturb
        embeddings = np.stack([item[0].values for item in batch])
        labels = np.array([item[1] for item in batch])
        weights = np.array([item[2] for item in batch])
        numeric = finite_difference(
            lambda w: prototype_batch_loss(
                w.reshape(bank.num_rows, bank.dim), embeddings, labels, weights, temperature
            ),
            bank.all_weights().reshape(-1),
        ).reshape(bank.num_rows, bank.dim)
        proto_err = max(proto_err, max_relative_error(analytic, numeric))

    adapter_err = 0.0
    for _ in range(trials):
        matrix, episode = _random_adapter_case(rng, adapter_dim)
        _, analytic = adapter_loss_and_grad(matrix, episode, 0.05, temperature)
        analytic = analytic + perturb
        numeric = finite_difference(
            lambda a: adapter_episode_loss(a.reshape(adapter_dim, adapter_dim), episode, 0.05, temperature).total,
            matrix.reshape(-1),
        ).reshape(adapter_dim, adapter_dim)
        adapter_err = max(adapter_err, max_relative_error(analytic, numeric))

    return {
        "prototype_gradient": proto_err,
        "adapter_gradient": adapter_err,
        "threshold": GRADCHECK_THRESHOLD,
        "passed": proto_err < GRADCHECK_THRESHOLD and adapter_err < GRADCHECK_THRESHOLD,
    }


def gradcheck_command(
    seed: int = 0, trials: int = 20, perturb: float = 0.0, printer: Callable[[str], None] = print
) -> int:
    """Run the gradient checks, print one line per component, return a shell
    exit code (0 pass, 1 fail)."""
    report = gradcheck_report(seed=seed, trials=trials, perturb=perturb)
    for component in ("prototype_gradient", "adapter_gradient"):
        err = report[component]
        verdict = "PASS" if err < report["threshold"] else "FAIL"
        printer(f"{component}: max relative error {err:.3e} (threshold {report['threshold']:.0e}) {verdict}")
    return 0 if report["passed"] else 1
