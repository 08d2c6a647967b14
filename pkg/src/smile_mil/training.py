"""Training harness: cross-entropy loss, Adam and Ranger (rectified Adam with
lookahead) optimizers, stratified k-fold splits, the batched epoch loop with
best-checkpoint selection, and checkpoint persistence.

Bags are heterogeneous, so a batch is processed bag-by-bag: one graph build,
forward, and backward per bag, gradients averaged across the batch, then a
single optimizer step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (
    CHECKPOINT_VERSION,
    BagDataset,
    UnsupportedVersionError,
    read_container,
    write_container,
)
from .metrics import MetricsReport, aggregate_cv, evaluate_predictions
from .model import (
    MODEL_KINDS,
    ScaleConfig,
    SmileParams,
    build_bag_graph,
    init_smile_params,
)

__all__ = [
    "TrainConfig",
    "FoldSplit",
    "OptimizerState",
    "EpochRecord",
    "FoldResult",
    "CVResult",
    "NonFiniteGradientError",
    "TooFewSamplesError",
    "cross_entropy",
    "cross_entropy_node",
    "init_optimizer_state",
    "adam_step",
    "ranger_step",
    "kfold_split",
    "train_fold",
    "run_cv",
    "save_checkpoint",
    "load_checkpoint",
]

PROB_CLAMP = 1e-12

# batch-norm parameters and biases are exempt from weight decay
DECAY_EXEMPT = frozenset({"bn_gamma", "bn_beta", "adapter_bias", "clf_bias"})

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
# canonical constants of the Ranger optimizer
RANGER_BETA1, RANGER_BETA2, RANGER_EPS = 0.95, 0.999, 1e-5
RADAM_RHO_THRESHOLD = 4.0


class NonFiniteGradientError(ValueError):
    pass


class TooFewSamplesError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 100
    batch_size: int = 12
    folds: int = 5
    seed: int = 0
    optimizer: str = "ranger"
    model: str = "smile"
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    hidden_dim: int = 256
    attn_dim: int = 64
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5
    averaging: str = "weighted"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.optimizer not in ("adam", "ranger"):
            raise ValueError(f"optimizer must be 'adam' or 'ranger', got {self.optimizer!r}")
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.lookahead_k < 1:
            raise ValueError("lookahead_k must be at least 1")
        if not 0.0 < self.lookahead_alpha <= 1.0:
            raise ValueError("lookahead_alpha must lie in (0, 1]")
        if self.averaging not in ("macro", "weighted"):
            raise ValueError("averaging must be 'macro' or 'weighted'")


def cross_entropy(pred: float, label: int) -> float:
    """Binary cross-entropy with the prediction clamped away from 0 and 1."""
    p = min(max(pred, PROB_CLAMP), 1.0 - PROB_CLAMP)
    y = float(label)
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))


def cross_entropy_node(prob: ad.Node, label: int) -> ad.Node:
    """Graph form of the loss on a (1, 1) probability node."""
    p = ad.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP, name="clamped_prob")
    y = float(label)
    term = ad.add(
        ad.mul(ad.constant([[y]]), ad.log(p)),
        ad.mul(ad.constant([[1.0 - y]]), ad.log(ad.sub(ad.constant([[1.0]]), p))),
    )
    return ad.sub(ad.constant([[0.0]]), term, name="cross_entropy")


@dataclass
class OptimizerState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    slow: dict[str, np.ndarray] | None  # lookahead slow weights (ranger only)


def init_optimizer_state(params: dict[str, np.ndarray], cfg: TrainConfig) -> OptimizerState:
    return OptimizerState(
        step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        slow={k: p.copy() for k, p in params.items()} if cfg.optimizer == "ranger" else None,
    )


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for '{name}'")


def _apply_decay(params: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    if cfg.weight_decay == 0.0:
        return
    shrink = cfg.learning_rate * cfg.weight_decay
    for name, p in params.items():
        if name not in DECAY_EXEMPT:
            p -= shrink * p


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam with decoupled weight decay; updates in place."""
    _check_finite(grads)
    state.step += 1
    t = state.step
    _apply_decay(params, cfg)
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def ranger_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: OptimizerState, cfg: TrainConfig) -> None:
    """Rectified-Adam step (plain momentum while the variance rectification is
    undefined, rho_t <= 4) plus lookahead interpolation every k steps."""
    _check_finite(grads)
    state.step += 1
    t = state.step
    _apply_decay(params, cfg)

    beta2_t = RANGER_BETA2 ** t
    rho_inf = 2.0 / (1.0 - RANGER_BETA2) - 1.0
    rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
    bias1 = 1.0 - RANGER_BETA1 ** t
    if rho_t > RADAM_RHO_THRESHOLD:
        rect = math.sqrt(
            (1.0 - beta2_t)
            * (rho_t - 4.0) / (rho_inf - 4.0)
            * (rho_t - 2.0) / rho_t
            * rho_inf / (rho_inf - 2.0)
        )
        step_size = rect / bias1
    else:
        step_size = 1.0 / bias1

    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= RANGER_BETA1
        m += (1.0 - RANGER_BETA1) * g
        v *= RANGER_BETA2
        v += (1.0 - RANGER_BETA2) * g * g
        if rho_t > RADAM_RHO_THRESHOLD:
            p -= cfg.learning_rate * step_size * m / (np.sqrt(v) + RANGER_EPS)
        else:
            p -= cfg.learning_rate * step_size * m

    if state.step % cfg.lookahead_k == 0:
        for name, p in params.items():
            slow = state.slow[name]
            slow += cfg.lookahead_alpha * (p - slow)
            p[...] = slow


@dataclass
class FoldSplit:
    fold_index: int
    train_ids: list[str]
    val_ids: list[str]


def kfold_split(ids_with_labels, k: int, seed: int = 0) -> list[FoldSplit]:
    """Deterministic stratified k-fold: each class is shuffled once and dealt
    round-robin, so per-fold class counts differ from proportional by at most
    one."""
    if k < 2:
        raise ValueError("k must be at least 2")
    pos = [i for i, lab in ids_with_labels if lab == 1]
    neg = [i for i, lab in ids_with_labels if lab == 0]
    if len(pos) < k or len(neg) < k:
        raise TooFewSamplesError(
            f"{k}-fold needs at least {k} bags per class, got {len(pos)} positive / {len(neg)} negative"
        )
    rng = np.random.default_rng(seed)
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    val_folds: list[list[str]] = [[] for _ in range(k)]
    for group in (pos, neg):
        for i, bag_id in enumerate(group):
            val_folds[i % k].append(bag_id)
    splits = []
    for fold in range(k):
        train = [bag_id for j in range(k) if j != fold for bag_id in val_folds[j]]
        splits.append(FoldSplit(fold, train, list(val_folds[fold])))
    return splits


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metrics: MetricsReport


@dataclass
class FoldResult:
    fold_index: int
    params: SmileParams
    best_epoch: int
    best_metrics: MetricsReport
    history: list[EpochRecord]
    val_ids: list[str]


def _predict_proba(bag, params, cfg: TrainConfig, mode: str) -> float:
    graph = build_bag_graph(bag, params, cfg.scale, mode=mode, kind=cfg.model)
    return float(ad.evaluate_missing(graph.prob)[0, 0])


def _evaluate_split(bags, params, cfg: TrainConfig) -> MetricsReport:
    probs = [_predict_proba(bag, params, cfg, mode="eval") for bag in bags]
    labels = [bag.label for bag in bags]
    return evaluate_predictions(probs, labels, averaging=cfg.averaging)


def train_fold(dataset: BagDataset, split: FoldSplit, cfg: TrainConfig) -> FoldResult:
    """Train one fold and return the checkpoint with the highest validation
    AUC (earliest epoch on ties), with the full per-epoch history."""
    by_id = {bag.bag_id: bag for bag in dataset.bags}
    train_bags = [by_id[i] for i in split.train_ids]
    val_bags = [by_id[i] for i in split.val_ids]

    seeds = np.random.SeedSequence([cfg.seed, split.fold_index]).spawn(2)
    params = init_smile_params(
        dataset.feature_dim, cfg.hidden_dim, cfg.attn_dim,
        seed=np.random.default_rng(seeds[0]),
    )
    shuffle_rng = np.random.default_rng(seeds[1])

    trainable = params.trainable()
    state = init_optimizer_state(trainable, cfg)
    step_fn = adam_step if cfg.optimizer == "adam" else ranger_step

    history: list[EpochRecord] = []
    best: FoldResult | None = None
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_bags))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            grad_sum = {name: np.zeros_like(p) for name, p in trainable.items()}
            for idx in chunk:
                bag = train_bags[idx]
                graph = build_bag_graph(bag, params, cfg.scale, mode="train", kind=cfg.model)
                loss_node = cross_entropy_node(graph.prob, bag.label)
                epoch_losses.append(float(ad.evaluate_missing(loss_node)[0, 0]))
                node_grads = ad.gradient(loss_node, [[1.0]])
                for name, node in graph.param_nodes.items():
                    if node in node_grads:
                        grad_sum[name] += node_grads[node]
            inv = 1.0 / len(chunk)
            for name in grad_sum:
                grad_sum[name] *= inv
            step_fn(trainable, grad_sum, state, cfg)

        val_metrics = _evaluate_split(val_bags, params, cfg)
        history.append(EpochRecord(epoch, float(np.mean(epoch_losses)), val_metrics))
        if best is None or val_metrics.auc > best.best_metrics.auc:
            best = FoldResult(split.fold_index, params.copy(), epoch, val_metrics,
                              history, list(split.val_ids))
    best.history = history
    return best


@dataclass
class CVResult:
    fold_results: list[FoldResult]
    fold_reports: list[MetricsReport]
    mean_report: MetricsReport


def run_cv(dataset: BagDataset, cfg: TrainConfig) -> CVResult:
    """Stratified cross-validation: train every fold, evaluate each best
    checkpoint on its own validation fold, and average the reports."""
    ids_with_labels = [(bag.bag_id, bag.label) for bag in dataset.bags]
    splits = kfold_split(ids_with_labels, cfg.folds, seed=cfg.seed)
    results = [train_fold(dataset, split, cfg) for split in splits]
    reports = [r.best_metrics for r in results]
    return CVResult(results, reports, aggregate_cv(reports))


def save_checkpoint(path, result: FoldResult, cfg: TrainConfig, feature_dim: int) -> None:
    """Persist one fold's best parameters in the float64 container variant,
    with a JSON header carrying tensor shapes and run metadata."""
    tensors = result.params.tensors()
    records = [(name, 0, arr.reshape(-1, 1)) for name, arr in tensors.items()]
    write_container(path, 1, records, version=CHECKPOINT_VERSION)
    header = {
        "tensors": {name: list(arr.shape) for name, arr in tensors.items()},
        "feature_dim": feature_dim,
        "hidden_dim": cfg.hidden_dim,
        "attn_dim": cfg.attn_dim,
        "model": cfg.model,
        "optimizer": cfg.optimizer,
        "scale": {"threshold": cfg.scale.threshold, "factor": cfg.scale.factor},
        "averaging": cfg.averaging,
        "fold_index": result.fold_index,
        "best_epoch": result.best_epoch,
        "best_metrics": result.best_metrics.as_dict(),
        "val_ids": result.val_ids,
        "seed": cfg.seed,
    }
    Path(path).with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")


def load_checkpoint(path) -> tuple[SmileParams, dict]:
    """Load a checkpoint saved by :func:`save_checkpoint`."""
    version, _, records = read_container(path)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version} is not a checkpoint container")
    header_path = Path(path).with_suffix(".json")
    header = json.loads(header_path.read_text())
    shapes = header["tensors"]
    tensors = {}
    for name, _, flat in records:
        tensors[name] = np.ascontiguousarray(flat).reshape(shapes[name])
    params = SmileParams(**tensors)
    return params, header
