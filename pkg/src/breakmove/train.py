"""Minibatch training of the head with validation-based model selection."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import EmbeddingDataset, Label, WindowTable, window_table
from .errors import DivergedLoss, EmptyDataset, InvalidArgument
from .evaluation import WindowPrediction, score_predictions
from .head import HeadConfig, HeadParams, forward, init_head
from .objective import LossConfig, PairBatch, loss_and_grad, total_loss
from .rng import substream


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    pairs_per_batch: int = 32
    optimizer: str = "adam"
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.15
    pool: str = "mean"
    min_coverage: float = 0.5
    eval_pairs: int = 256

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidArgument("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.pairs_per_batch < 0:
            raise InvalidArgument("batch_size must be positive; epochs and pairs_per_batch non-negative")
        if self.pairs_per_batch > 0 and self.batch_size < 2:
            raise InvalidArgument("pair sampling needs batch_size >= 2")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgument(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.val_fraction < 1:
            raise InvalidArgument("val_fraction must lie in [0, 1)")


@dataclass
class TrainReport:
    history: list[dict] = field(default_factory=list)
    initial_val_accuracy: float = float("nan")
    best_epoch: int = 0
    best_val_accuracy: float = float("nan")
    stopped_early: bool = False
    wall_clock_sec: float = 0.0
    train_videos: list[str] = field(default_factory=list)
    val_videos: list[str] = field(default_factory=list)

    def loss_history(self) -> list[float]:
        return [h["train_loss"] for h in self.history]

    def val_history(self) -> list[float]:
        return [self.initial_val_accuracy] + [h["val_accuracy"] for h in self.history]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float):
    return Adam(lr) if name == "adam" else SGD(lr)


# ---------------------------------------------------------------------------
# pairs


def sample_pairs(labels, pairs_per_batch: int, rng: np.random.Generator) -> PairBatch:
    """Class-balanced pairs within a batch: ceil(P/2) same-class, floor(P/2) cross-class.

    When one kind is impossible (a single class, or only singleton classes)
    all pairs are of the other kind; a batch of fewer than two items yields none.
    """
    labels = np.asarray(labels).reshape(-1)
    n = labels.shape[0]
    if n < 2 or pairs_per_batch <= 0:
        return PairBatch.empty()
    classes, counts = np.unique(labels, return_counts=True)
    can_same = bool(np.any(counts >= 2))
    can_diff = classes.shape[0] >= 2
    n_same = math.ceil(pairs_per_batch / 2)
    n_diff = pairs_per_batch - n_same
    if not can_diff:
        n_same, n_diff = pairs_per_batch, 0
    elif not can_same:
        n_same, n_diff = 0, pairs_per_batch

    members = {c: np.flatnonzero(labels == c) for c in classes}
    eligible = np.flatnonzero(np.isin(labels, classes[counts >= 2]))
    ii, jj, same = [], [], []
    for _ in range(n_same):
        i = int(eligible[rng.integers(eligible.shape[0])])
        others = members[labels[i]]
        others = others[others != i]
        ii.append(i)
        jj.append(int(others[rng.integers(others.shape[0])]))
        same.append(True)
    for _ in range(n_diff):
        i = int(rng.integers(n))
        others = np.flatnonzero(labels != labels[i])
        ii.append(i)
        jj.append(int(others[rng.integers(others.shape[0])]))
        same.append(False)
    return PairBatch(np.array(ii), np.array(jj), np.array(same))


# ---------------------------------------------------------------------------
# evaluation helpers


@dataclass
class SplitEvaluation:
    accuracy: float
    count: int
    logits: np.ndarray
    preds: np.ndarray
    table: WindowTable

    @property
    def defined(self) -> bool:
        return self.count > 0


def _as_table(data, pool: str = "mean", min_coverage: float = 0.5) -> WindowTable:
    return data if isinstance(data, WindowTable) else window_table(data, pool, min_coverage)


def evaluate_split(params: HeadParams, data, pool: str = "mean", min_coverage: float = 0.5) -> SplitEvaluation:
    """Window-level accuracy; NaN with ``count == 0`` on empty data."""
    table = _as_table(data, pool, min_coverage)
    if len(table) == 0:
        return SplitEvaluation(float("nan"), 0, np.zeros((0, params.config.num_classes)), np.zeros(0, np.int64), table)
    logits, _ = forward(params, table.X)
    preds = np.argmax(logits, axis=1)
    return SplitEvaluation(float(np.mean(preds == table.y)), len(table), logits, preds, table)


def window_predictions(table: WindowTable, preds: np.ndarray) -> list[WindowPrediction]:
    return [
        WindowPrediction(str(table.video_ids[k]), float(table.start_sec[k]), float(table.end_sec[k]), Label(int(preds[k])))
        for k in range(len(table))
    ]


def predict_dataset(params: HeadParams, dataset: EmbeddingDataset, pool: str = "mean") -> list[WindowPrediction]:
    ev = evaluate_split(params, dataset, pool)
    return window_predictions(ev.table, ev.preds)


def frame_accuracy_of(params: HeadParams, dataset: EmbeddingDataset, table: WindowTable | None = None) -> float:
    table = table if table is not None else window_table(dataset)
    if len(table) == 0:
        return float("nan")
    preds = np.argmax(forward(params, table.X)[0], axis=1)
    return score_predictions(window_predictions(table, preds), dataset).overall


# ---------------------------------------------------------------------------
# training


def split_validation(video_ids: list[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Hold out whole videos; at least one video always stays in training."""
    n = len(video_ids)
    n_val = int(round(fraction * n))
    if fraction > 0 and n >= 2:
        n_val = max(1, n_val)
    n_val = min(n_val, n - 1) if n else 0
    order = substream(seed, "split").permutation(n)
    val = sorted(video_ids[k] for k in order[:n_val])
    train = [v for v in video_ids if v not in set(val)]
    return train, val


def fit(
    train_data: EmbeddingDataset,
    head_cfg: HeadConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    init: HeadParams | None = None,
) -> tuple[HeadParams, TrainReport]:
    """Train a head and return the parameters of the best validation epoch.

    Validation uses whole held-out videos scored by frame accuracy; without
    held-out videos the training videos double as validation. Ties in
    validation accuracy go to the lower training objective. Epoch 0 is the
    initial state, so training that never improves returns it unchanged.
    """
    t0 = time.perf_counter()
    if len(train_data) == 0:
        raise EmptyDataset("training data has no videos")
    train_ids, val_ids = split_validation(train_data.video_ids, train_cfg.val_fraction, train_cfg.seed)
    fit_data = train_data.subset(train_ids)
    val_data = train_data.subset(val_ids) if val_ids else fit_data
    table = window_table(fit_data, train_cfg.pool, train_cfg.min_coverage)
    val_table = window_table(val_data, train_cfg.pool, train_cfg.min_coverage)
    if len(table) == 0:
        raise EmptyDataset("training data has no windows")

    params = init.copy() if init is not None else init_head(head_cfg)
    shuffle_rng = substream(train_cfg.seed, "shuffle")
    pair_rng = substream(train_cfg.seed, "pairs")
    # a fixed pair set makes the per-epoch objective comparable across epochs
    eval_pairs = sample_pairs(table.y, train_cfg.eval_pairs, substream(train_cfg.seed, "pairs", 1))
    optimizer = make_optimizer(train_cfg.optimizer, train_cfg.learning_rate)

    report = TrainReport(train_videos=list(train_ids), val_videos=list(val_ids))
    best = params.copy()
    report.initial_val_accuracy = report.best_val_accuracy = frame_accuracy_of(params, val_data, val_table)
    best_loss = total_loss(params, table.X, table.y, eval_pairs, loss_cfg)[0]
    wait = 0
    arrays = params.arrays()
    n = len(table)
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        batch_loss = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            yb = table.y[idx]
            pairs = sample_pairs(yb, train_cfg.pairs_per_batch, pair_rng)
            breakdown, grads = loss_and_grad(params, table.X[idx], yb, pairs, loss_cfg)
            if not math.isfinite(breakdown.total):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            batch_loss += breakdown.total
            optimizer.step(arrays, grads.arrays())
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise DivergedLoss(f"non-finite parameters after epoch {epoch}")
        _, full = total_loss(params, table.X, table.y, eval_pairs, loss_cfg)
        if not math.isfinite(full.total):
            raise DivergedLoss(f"non-finite loss at epoch {epoch}")
        val_acc = frame_accuracy_of(params, val_data, val_table)
        report.history.append(
            {
                "epoch": epoch,
                "train_loss": full.total,
                "regularizer": full.regularizer,
                "hinge": full.hinge,
                "contrastive": full.contrastive,
                "batch_loss": batch_loss,
                "val_accuracy": val_acc,
            }
        )
        # ties on validation accuracy go to the lower training objective
        if val_acc > report.best_val_accuracy or (val_acc == report.best_val_accuracy and full.total < best_loss):
            report.best_val_accuracy = val_acc
            report.best_epoch = epoch
            best_loss = full.total
            best = params.copy()
            wait = 0
        else:
            wait += 1
            if wait >= train_cfg.patience:
                report.stopped_early = True
                break
    report.wall_clock_sec = time.perf_counter() - t0
    return best, report


def write_report(path, report: TrainReport, config: dict) -> None:
    payload = report.to_dict()
    payload["config"] = config
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, default=float)
        fh.write("\n")
