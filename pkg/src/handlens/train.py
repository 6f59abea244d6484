"""The cross-validated one-cycle training loop and its text log format.

Per fold: standardization stats come from the training folds only, a fresh
model is built from a fold-derived seed, training batches go through
random crop + augmentation, and the held-out fold is scored every epoch
through center crop + standardization alone. All randomness is derived
from (seed, fold, epoch, sample index), so runs are reproducible and
batch-order independent per sample.

A fold whose loss goes non-finite is reported as diverged with a
diagnostic instead of poisoning later epochs; callers decide whether to
exclude it from aggregation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import (
    AugmentationPolicy,
    FoldPlan,
    PixelStats,
    augment,
    compute_stats,
    resize_and_crop,
    standardize,
)
from .nn import Classifier
from .optim import (
    Adam,
    ConstantSchedule,
    OneCycleSchedule,
    SGD,
    cross_entropy,
    log_loss_value,
)
from .tensor import NonFiniteError, Tensor, backward

__all__ = [
    "TrainSettings",
    "EpochRecord",
    "FoldResult",
    "make_optimizer",
    "prepare_eval_images",
    "evaluate_model",
    "fit_fold",
    "fit",
    "format_train_log",
]

OPTIMIZER_KINDS = ("adamw", "adam-l2", "sgd", "sgd-l2")
SCHEDULE_KINDS = ("one_cycle", "constant")


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    batch_size: int = 16
    lr_max: float = 1e-2
    div_factor: float = 25.0
    momentum_high: float = 0.95
    momentum_low: float = 0.85
    optimizer: str = "adamw"
    weight_decay: float = 1e-2
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "one_cycle"
    seed: int = 0
    resize_to: int = 256
    crop_size: int = 224
    augmentation: AugmentationPolicy = AugmentationPolicy()

    def __post_init__(self):
        if self.optimizer not in OPTIMIZER_KINDS:
            raise ValueError(f"optimizer must be one of {OPTIMIZER_KINDS}, "
                             f"got {self.optimizer!r}")
        if self.schedule not in SCHEDULE_KINDS:
            raise ValueError(f"schedule must be one of {SCHEDULE_KINDS}, "
                             f"got {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass(frozen=True)
class EpochRecord:
    fold: int
    epoch: int
    lr_mid: float
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_error_rate: float


@dataclass
class FoldResult:
    fold: int
    initial_val_loss: float = float("nan")
    epochs: list[EpochRecord] = field(default_factory=list)
    model: Classifier | None = None
    stats: PixelStats | None = None
    val_predictions: np.ndarray | None = None
    val_labels: np.ndarray | None = None
    diverged: bool = False
    diagnostic: str = ""


def make_optimizer(kind: str, params, lr: float, weight_decay: float,
                   beta2: float = 0.999, eps: float = 1e-8):
    if kind == "adamw":
        return Adam(params, lr, betas=(0.9, beta2), eps=eps,
                    weight_decay=weight_decay, decay_mode="decoupled")
    if kind == "adam-l2":
        return Adam(params, lr, betas=(0.9, beta2), eps=eps,
                    weight_decay=weight_decay, decay_mode="l2")
    if kind == "sgd":
        return SGD(params, lr, momentum=0.9, weight_decay=weight_decay,
                   decay_mode="decoupled")
    if kind == "sgd-l2":
        return SGD(params, lr, momentum=0.9, weight_decay=weight_decay,
                   decay_mode="l2")
    raise ValueError(f"unknown optimizer kind {kind!r}")


def _make_schedule(settings: TrainSettings, total_steps: int):
    if settings.schedule == "one_cycle":
        return OneCycleSchedule(
            total_steps=total_steps, lr_max=settings.lr_max,
            div_factor=settings.div_factor,
            momentum_high=settings.momentum_high,
            momentum_low=settings.momentum_low)
    return ConstantSchedule(total_steps=total_steps, lr_max=settings.lr_max,
                            momentum_high=settings.momentum_high)


def prepare_eval_images(images, indices, stats: PixelStats,
                        resize_to: int, crop_size: int) -> np.ndarray:
    """Validation/inference pixels: center crop and standardize, nothing else."""
    out = [resize_and_crop(images[i], resize_to, crop_size, mode="center")
           for i in indices]
    return standardize(np.stack(out), stats)


def evaluate_model(model: Classifier, x: np.ndarray, labels: np.ndarray,
                   batch_size: int) -> tuple[float, float, np.ndarray]:
    """(mean loss, error rate, predictions) on prepared images."""
    logit_rows = []
    for start in range(0, len(x), batch_size):
        logit_rows.append(model.logits(x[start:start + batch_size]))
    logits = np.concatenate(logit_rows, axis=0)
    loss = log_loss_value(logits, labels)
    preds = logits.argmax(axis=1)
    error_rate = float((preds != labels).mean())
    return loss, error_rate, preds


def _training_batch(images, indices, labels, stats, settings, fold, epoch):
    batch = []
    for i in indices:
        rng = np.random.default_rng([settings.seed, fold, epoch, int(i)])
        img = resize_and_crop(images[i], settings.resize_to, settings.crop_size,
                              mode="random", rng=rng)
        batch.append(augment(img, settings.augmentation, rng))
    return standardize(np.stack(batch), stats), labels[indices]


def fit_fold(images, labels, plan: FoldPlan, fold: int, model_builder,
             settings: TrainSettings) -> FoldResult:
    """Train one fold on the other k-1 folds and score it every epoch."""
    labels = np.asarray(labels)
    train_idx = plan.train_indices(fold)
    val_idx = plan.val_indices(fold)
    stats = compute_stats([images[i] for i in train_idx],
                          roles=["train"] * len(train_idx))
    model = model_builder(settings.seed + fold)
    result = FoldResult(fold=fold, model=model, stats=stats,
                        val_labels=labels[val_idx])

    steps_per_epoch = math.ceil(len(train_idx) / settings.batch_size)
    total_steps = settings.epochs * steps_per_epoch
    schedule = _make_schedule(settings, total_steps)
    optimizer = make_optimizer(settings.optimizer, model.parameters(),
                               lr=schedule.at(0)[0],
                               weight_decay=settings.weight_decay,
                               beta2=settings.beta2, eps=settings.eps)

    val_x = prepare_eval_images(images, val_idx, stats,
                                settings.resize_to, settings.crop_size)
    val_y = labels[val_idx]
    try:
        result.initial_val_loss, _, _ = evaluate_model(
            model, val_x, val_y, settings.batch_size)
        step = 0
        for epoch in range(1, settings.epochs + 1):
            order = train_idx.copy()
            np.random.default_rng([settings.seed, fold, epoch]).shuffle(order)
            loss_sum = 0.0
            correct = 0
            for b, start in enumerate(range(0, len(order), settings.batch_size)):
                chunk = order[start:start + settings.batch_size]
                x, y = _training_batch(images, chunk, labels, stats,
                                       settings, fold, epoch)
                lr, momentum = schedule.at(step)
                optimizer.set_lr(lr)
                optimizer.set_momentum(momentum)
                drop_rng = np.random.default_rng(
                    [settings.seed, fold, epoch, 999331, b])
                logits = model(Tensor(x), train=True, rng=drop_rng)
                loss = cross_entropy(logits, y)
                model.zero_grad()
                backward(loss)
                optimizer.step()
                step += 1
                loss_sum += loss.item() * len(chunk)
                correct += int((logits.data.argmax(axis=1) == y).sum())
            mid = (epoch - 1) * steps_per_epoch + steps_per_epoch / 2.0
            lr_mid = schedule.at(min(mid, total_steps))[0]
            val_loss, val_err, preds = evaluate_model(
                model, val_x, val_y, settings.batch_size)
            result.val_predictions = preds
            result.epochs.append(EpochRecord(
                fold=fold, epoch=epoch, lr_mid=lr_mid,
                train_loss=loss_sum / len(order),
                train_accuracy=correct / len(order),
                val_loss=val_loss, val_error_rate=val_err))
    except NonFiniteError as exc:
        result.diverged = True
        result.diagnostic = (f"fold {fold} diverged at epoch "
                             f"{len(result.epochs) + 1}: {exc}")
    return result


def fit(images, labels, plan: FoldPlan, folds, model_builder,
        settings: TrainSettings) -> list[FoldResult]:
    """Run ``fit_fold`` for each requested fold index, in order."""
    return [fit_fold(images, labels, plan, fold, model_builder, settings)
            for fold in folds]


def format_train_log(results: list[FoldResult],
                     config_lines: list[str] | None = None) -> str:
    """Deterministic text log: one row per epoch, fold headers with the
    initial (pre-training) validation loss, floats in shortest round-trip
    form so identical runs serialize byte-for-byte."""
    lines = ["# handlens train log v1"]
    for raw in config_lines or []:
        lines.append(f"# config: {raw}")
    lines.append("# columns: fold\tepoch\tlr_mid\ttrain_loss\tval_loss\tval_error_rate")
    for r in results:
        lines.append(f"# fold {r.fold} initial_val_loss {r.initial_val_loss!r}")
        if r.diverged:
            lines.append(f"# fold {r.fold} DIVERGED: {r.diagnostic}")
        for e in r.epochs:
            lines.append(f"{e.fold}\t{e.epoch}\t{e.lr_mid!r}\t{e.train_loss!r}"
                         f"\t{e.val_loss!r}\t{e.val_error_rate!r}")
    return "\n".join(lines) + "\n"
