"""Training with early stopping and reduce-on-plateau, k-fold CV, evaluation and the jitter study."""
from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .augment import JitterConfig, augment_sequence, sequence_rng
from .geometry import REFERENCE_ROI, GestureSequence, Roi
from .models import ModelParams, ModelSpec, backward, forward, init_params
from .nn import NumericError, adam_step, softmax_crossentropy
from .voxelizer import WindowTensor, assemble_windows, grid_dims, voxelize_sequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 3
    lr_plateau_epochs: int = 3
    lr_factor: float = 0.3
    folds: int = 5
    dropout: float = 0.3
    seed: int = 0
    min_delta: float = 1e-6

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch size and max epochs must be positive")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must be in (0, 1)")
        if self.patience < 1 or self.lr_plateau_epochs < 1:
            raise ValueError("patience and lr_plateau_epochs must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class PipelineConfig:
    """How sequences become windows."""

    roi: Roi = REFERENCE_ROI
    voxel_size: float = 0.05
    mode: str = "binary"
    window: int = 4

    @property
    def dims(self):
        return grid_dims(self.roi, self.voxel_size)

    def windows(self, sequences: Sequence[GestureSequence], first_id: int = 0) -> list[WindowTensor]:
        out = []
        for n, seq in enumerate(sequences):
            grids = voxelize_sequence(seq, self.roi, self.voxel_size, self.mode)
            out.extend(assemble_windows(grids, self.window, seq.label, first_id + n))
        return out

    def training_windows(self, sequences: Sequence[GestureSequence],
                         jitter: Optional[JitterConfig] = None) -> list[WindowTensor]:
        """Original windows plus, when ``jitter.alpha > 0``, one jittered copy per sequence."""
        out = self.windows(sequences)
        if jitter is not None and jitter.alpha > 0:
            for n, seq in enumerate(sequences):
                grids = augment_sequence(seq, self.roi, self.voxel_size, self.mode, jitter,
                                         sequence_rng(jitter.seed, n))
                out.extend(assemble_windows(grids, self.window, seq.label, len(sequences) + n))
        return out


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float  # rate in effect during the epoch


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = "max_epochs"
    lr_events: list[tuple[int, float]] = field(default_factory=list)  # (epoch, new lr)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc), repr(r.lr)])
        return buf.getvalue()


class PlateauTracker:
    """Early-stopping and reduce-on-plateau bookkeeping.

    An epoch improves when its validation loss is below the best so far by at
    least ``min_delta``. Both counters reset on improvement; the learning rate
    is cut at most once per stagnation run.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.best = np.inf
        self.best_epoch = 0
        self.wait = 0
        self.reduced = False

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool, bool]:
        """Returns ``(improved, reduce_lr, stop)``."""
        if val_loss < self.best - self.cfg.min_delta:
            self.best, self.best_epoch, self.wait, self.reduced = val_loss, epoch, 0, False
            return True, False, False
        self.wait += 1
        reduce = not self.reduced and self.wait >= self.cfg.lr_plateau_epochs
        self.reduced |= reduce
        return False, reduce, self.wait >= self.cfg.patience


# --------------------------------------------------------------------------
# splitting


def kfold_split(items, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle, then ``k`` contiguous folds; the first ``n % k`` folds get one extra item.

    ``items`` is a sequence or an item count. Returns ``(train, validation)``
    index arrays, each sorted.
    """
    n = items if isinstance(items, (int, np.integer)) else len(items)
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"cannot split {n} items into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    out, start = [], 0
    for size in sizes:
        val = np.sort(perm[start : start + size])
        train = np.sort(np.concatenate([perm[:start], perm[start + size :]]))
        out.append((train, val))
        start += size
    return out


def holdout_split(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """First fold of :func:`kfold_split`: the validation holdout used by final training."""
    return kfold_split(n, min(cfg.folds, n), cfg.seed)[0] if n >= 2 else (np.arange(n), np.arange(0))


# --------------------------------------------------------------------------
# evaluation


def stack_windows(data: Sequence[WindowTensor], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([w.array(dtype) for w in data]) if data else np.empty((0,), dtype)
    y = np.array([w.label for w in data], dtype=np.int64)
    return x, y


def predict_batches(spec: ModelSpec, params: ModelParams, x: np.ndarray, batch_size: int = 64):
    """Inference-mode logits for an ``(N, m, nx, ny, nz)`` array."""
    out = [forward(spec, params, x[i : i + batch_size], training=False)[0]
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.empty((0, spec.num_classes))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @classmethod
    def from_predictions(cls, labels, preds, num_classes: int) -> "ConfusionMatrix":
        labels, preds = np.asarray(labels), np.asarray(preds)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"label out of range for {num_classes} classes")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (labels, preds), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    def to_csv(self, class_names: Optional[Sequence[str]] = None) -> str:
        c = len(self.counts)
        names = list(class_names) if class_names is not None else [str(i) for i in range(c)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, self.counts):
            w.writerow([name, *row.tolist()])
        return buf.getvalue()


@dataclass
class EvalResult:
    accuracy: float
    confusion: ConfusionMatrix
    loss: float
    predictions: np.ndarray
    sequence_accuracy: Optional[float] = None


def majority_vote_accuracy(data: Sequence[WindowTensor], preds) -> float:
    """Per-sequence accuracy from the most frequent window prediction (ties -> lowest id)."""
    votes: dict[int, Counter] = {}
    labels: dict[int, int] = {}
    for w, p in zip(data, preds):
        votes.setdefault(w.sequence_id, Counter())[int(p)] += 1
        labels[w.sequence_id] = w.label
    if not votes:
        return 0.0
    correct = 0
    for sid, c in votes.items():
        top = max(c.values())
        correct += min(k for k, v in c.items() if v == top) == labels[sid]
    return correct / len(votes)


def evaluate_predictor(predict_fn: Callable[[np.ndarray], np.ndarray], data: Sequence[WindowTensor],
                       num_classes: int) -> tuple[float, ConfusionMatrix]:
    """Score any classifier mapping an ``(N, m, nx, ny, nz)`` batch to class ids."""
    if not data:
        raise ValueError("nothing to evaluate")
    x, y = stack_windows(data)
    preds = np.asarray(predict_fn(x))
    cm = ConfusionMatrix.from_predictions(y, preds, num_classes)
    return cm.accuracy, cm


def evaluate(spec: ModelSpec, params: ModelParams, data: Sequence[WindowTensor],
             batch_size: int = 64) -> EvalResult:
    if not data:
        raise ValueError("nothing to evaluate")
    x, y = stack_windows(data, params.dtype)
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"label out of range for {spec.num_classes} classes")
    logits = predict_batches(spec, params, x, batch_size)
    loss, probs, _ = softmax_crossentropy(logits, y)
    preds = probs.argmax(axis=1)
    cm = ConfusionMatrix.from_predictions(y, preds, spec.num_classes)
    seq_acc = majority_vote_accuracy(data, preds) if data[0].sequence_id is not None else None
    return EvalResult(cm.accuracy, cm, loss, preds, seq_acc)


# --------------------------------------------------------------------------
# training


def train(
    spec: ModelSpec,
    data: Sequence[WindowTensor],
    cfg: TrainConfig,
    val_data: Optional[Sequence[WindowTensor]] = None,
    validate: Optional[Callable[[ModelParams, int], tuple[float, float]]] = None,
    params: Optional[ModelParams] = None,
) -> tuple[ModelParams, TrainHistory]:
    """Minibatch Adam training; returns the best-validation-epoch parameters.

    Validation comes from ``validate(params, epoch) -> (loss, accuracy)`` when
    given, else from ``val_data``, else from a sequence-level holdout of
    ``data`` (one fold of ``cfg.folds``).
    """
    if not data:
        raise ValueError("no training data")
    if validate is None and val_data is None:
        ids = sorted({w.sequence_id for w in data})
        if None in ids:
            raise ValueError("windows need sequence ids for an automatic validation split")
        _, val_idx = holdout_split(len(ids), cfg)
        val_ids = {ids[i] for i in val_idx}
        val_data = [w for w in data if w.sequence_id in val_ids]
        data = [w for w in data if w.sequence_id not in val_ids]
    if validate is None:
        vx, vy = stack_windows(val_data)

        def validate(p, epoch):
            logits = predict_batches(spec, p, vx.astype(p.dtype, copy=False))
            loss, probs, _ = softmax_crossentropy(logits, vy)
            return loss, float(np.mean(probs.argmax(axis=1) == vy))

    params = init_params(spec, cfg.seed) if params is None else params.copy()
    params.validate(spec)
    x, y = stack_windows(data, params.dtype)
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ValueError(f"label out of range for {spec.num_classes} classes")
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    history = TrainHistory()
    tracker = PlateauTracker(cfg)
    best = params.copy()
    lr = cfg.lr
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(x))
        losses, weights = [], []
        for b, start in enumerate(range(0, len(x), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            _, cache = forward(spec, params, x[idx], training=True, rng=dropout_rng)
            loss, grads = backward(spec, params, cache, y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}, batch {b} "
                                   f"(window indices {idx.tolist()})")
            adam_step(params.layers, grads, lr)
            losses.append(loss)
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        val_loss, val_acc = validate(params, epoch)
        history.records.append(EpochRecord(epoch, train_loss, float(val_loss), float(val_acc), lr))
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f lr %.3g",
                 epoch, train_loss, val_loss, val_acc, lr)
        improved, reduce, stop = tracker.update(epoch, val_loss)
        if improved:
            best = params.copy()
        if reduce:
            lr *= cfg.lr_factor
            history.lr_events.append((epoch, lr))
        if stop:
            history.stop_reason = "early_stop"
            break
    history.best_epoch = tracker.best_epoch
    return best, history


def fit(spec: ModelSpec, sequences: Sequence[GestureSequence], cfg: TrainConfig,
        pipeline: PipelineConfig, jitter: Optional[JitterConfig] = None):
    """Final training on a training split: hold out one fold of sequences for
    validation, augment only the remaining sequences, train."""
    train_idx, val_idx = holdout_split(len(sequences), cfg)
    train_seqs = [sequences[i] for i in train_idx]
    val_seqs = [sequences[i] for i in val_idx]
    data = pipeline.training_windows(train_seqs, jitter)
    val = pipeline.windows(val_seqs)
    return train(spec, data, cfg, val_data=val)


@dataclass
class CVResult:
    histories: list[TrainHistory]
    accuracies: list[float]
    folds: list[tuple[np.ndarray, np.ndarray]]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def cross_validate(spec: ModelSpec, sequences: Sequence[GestureSequence], cfg: TrainConfig,
                   pipeline: PipelineConfig, jitter: Optional[JitterConfig] = None,
                   on_fold: Optional[Callable[[int, float, TrainHistory], None]] = None) -> CVResult:
    """Sequence-level k-fold CV; augmentation touches training folds only."""
    folds = kfold_split(len(sequences), cfg.folds, cfg.seed)
    result = CVResult([], [], folds)
    for k, (tr, va) in enumerate(folds):
        train_seqs = [sequences[i] for i in tr]
        data = pipeline.training_windows(train_seqs, jitter)
        val = pipeline.windows([sequences[i] for i in va], first_id=2 * len(sequences))
        params, hist = train(spec, data, cfg, val_data=val)
        acc = evaluate(spec, params, val).accuracy
        result.histories.append(hist)
        result.accuracies.append(acc)
        if on_fold is not None:
            on_fold(k, acc, hist)
    return result


# --------------------------------------------------------------------------
# jitter-size study and reporting


@dataclass
class StudyRow:
    alpha: float
    model: str
    accuracy: float
    sequence_accuracy: Optional[float] = None


def jitter_study(
    train_sequences: Sequence[GestureSequence],
    test_sequences: Sequence[GestureSequence],
    pipeline: PipelineConfig,
    alphas: Sequence[float],
    cfg: TrainConfig,
    spec_factories: dict[str, Callable[[], ModelSpec]],
    jitter_seed: int = 0,
    include_zero: bool = False,
) -> list[StudyRow]:
    """Train every model kind at every jitter size and score on the untouched test split.

    Rows come out in ``alphas`` order, one per model kind. ``alpha == 0``
    is the no-augmentation baseline and must be present.
    """
    if not any(a == 0 for a in alphas):
        raise ValueError("alphas must include 0 (the no-augmentation baseline)")
    test = pipeline.windows(test_sequences)
    rows = []
    for alpha in alphas:
        jitter = JitterConfig(alpha, include_zero, jitter_seed) if alpha > 0 else None
        for name, factory in spec_factories.items():
            spec = factory()
            params, _ = fit(spec, train_sequences, cfg, pipeline, jitter)
            res = evaluate(spec, params, test)
            rows.append(StudyRow(float(alpha), name, res.accuracy, res.sequence_accuracy))
            log.info("study alpha=%g model=%s accuracy=%.4f", alpha, name, res.accuracy)
    return rows


def study_csv(rows: Sequence[StudyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "model", "accuracy"])
    for r in rows:
        w.writerow([repr(r.alpha), r.model, repr(r.accuracy)])
    return buf.getvalue()


def format_table(rows: Sequence[tuple[str, float]]) -> str:
    """Two-column accuracy table, e.g. ``3D CNN + Augmentation  84.44%``."""
    width = max((len(name) for name, _ in rows), default=0)
    return "\n".join(f"{name:<{width}}  {acc * 100:.2f}%" for name, acc in rows)
