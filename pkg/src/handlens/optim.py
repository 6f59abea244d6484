"""Softmax/cross-entropy, SGD/Adam/AdamW steppers, one-cycle schedule, LR range test.

Weight decay comes in two deliberately distinct modes. "l2" folds
``decay * theta`` into the gradient before any momentum/adaptive
machinery; "decoupled" shrinks the parameter after the gradient-based
update, outside the adaptive normalization. For momentum-free SGD the two
coincide algebraically; for Adam they do not, which is why the decoupled
variant (AdamW) exists as its own thing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, make_op

__all__ = [
    "softmax",
    "cross_entropy",
    "SGD",
    "Adam",
    "AdamW",
    "OneCycleSchedule",
    "ConstantSchedule",
    "LrRangeResult",
    "lr_range_test",
]


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------


def softmax(x, axis: int = -1):
    """exp(x_i) / sum_j exp(x_j), computed max-shifted; rows sum to 1.

    Accepts a plain array (returns an array) or a Tensor (returns a Tensor
    with the usual backward rule).
    """
    if isinstance(x, Tensor):
        probs = softmax(x.data, axis=axis)

        def rule(g):
            inner = (g * probs).sum(axis=axis, keepdims=True)
            return (probs * (g - inner),)

        return make_op(probs, (x,), rule, "softmax")
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteError("softmax: non-finite input")
    shifted = arr - arr.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_loss_value(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood from raw logits (no graph), max-shifted."""
    labels = np.asarray(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(labels)), labels]
    return float((lse - picked).mean())


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax loss over a batch; gradient is (softmax - onehot) / N.

    Fused log-softmax on the raw logits for stability; equals the explicit
    softmax-then-log composition to high precision on moderate inputs.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N,K) logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must be in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    sums = exps.sum(axis=1, keepdims=True)
    lse = np.log(sums[:, 0])
    losses = lse - shifted[np.arange(n), labels]
    probs = exps / sums

    def rule(g):
        dl = probs.copy()
        dl[np.arange(n), labels] -= 1.0
        return (g.reshape(()) * dl / n,)

    return make_op(np.asarray(losses.mean()), (logits,), rule, "cross_entropy")


# ----------------------------------------------------------------------
# optimizers
# ----------------------------------------------------------------------

_DECAY_MODES = ("decoupled", "l2")


def _check_mode(mode: str) -> str:
    if mode not in _DECAY_MODES:
        raise ValueError(f"decay mode must be one of {_DECAY_MODES}, got {mode!r}")
    return mode


class SGD:
    """Momentum SGD with either l2 or decoupled weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0, decay_mode: str = "decoupled"):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_mode = _check_mode(decay_mode)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        decay = self.weight_decay
        for p, vel in zip(self.params, self._velocity):
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if decay and self.decay_mode == "l2":
                g = g + decay * p.data
            if self.momentum:
                vel *= self.momentum
                vel += g
                update = vel
            else:
                update = g
            if decay and self.decay_mode == "decoupled":
                # shrinkage uses the pre-update value: theta - lr*g - lr*decay*theta
                shrink = self.lr * decay * p.data
                p.data -= self.lr * update
                p.data -= shrink
            else:
                p.data -= self.lr * update

    def set_lr(self, lr: float) -> None:
        self.lr = lr

    def set_momentum(self, momentum: float) -> None:
        self.momentum = momentum


class Adam:
    """Adam with bias correction; weight decay either as l2-in-gradient or decoupled.

    Decoupled mode is AdamW: the shrinkage happens after (and outside) the
    adaptive update, so it is not rescaled by the second-moment estimate.
    With weight_decay 0 both modes reduce to plain Adam, bitwise.
    """

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay_mode: str = "decoupled"):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_mode = _check_mode(decay_mode)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        # bias correction uses the current beta1; the schedule may move it
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        decay = self.weight_decay
        for p, m, v in zip(self.params, self._m, self._v):
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if decay and self.decay_mode == "l2":
                g = g + decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if decay and self.decay_mode == "decoupled":
                shrink = self.lr * decay * p.data  # pre-update value
                p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p.data -= shrink
            else:
                p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def set_lr(self, lr: float) -> None:
        self.lr = lr

    def set_momentum(self, momentum: float) -> None:
        self.beta1 = momentum


def AdamW(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
          weight_decay: float = 1e-2) -> Adam:
    """Adam with decoupled weight decay."""
    return Adam(params, lr, betas=betas, eps=eps, weight_decay=weight_decay,
                decay_mode="decoupled")


# ----------------------------------------------------------------------
# schedules
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class OneCycleSchedule:
    """Two equal linear phases: lr rises lr_max/div_factor -> lr_max, then back;
    momentum mirrors it (high -> low -> high)."""

    total_steps: int
    lr_max: float = 1e-2
    div_factor: float = 25.0
    momentum_high: float = 0.95
    momentum_low: float = 0.85

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.lr_max <= 0:
            raise ValueError("lr_max must be positive")
        if self.div_factor <= 1:
            raise ValueError("div_factor must exceed 1")

    @property
    def lr_low(self) -> float:
        return self.lr_max / self.div_factor

    def at(self, step: float) -> tuple[float, float]:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        half = self.total_steps / 2.0
        if step <= half:
            p = step / half
        else:
            p = (self.total_steps - step) / half
        lr = self.lr_low + (self.lr_max - self.lr_low) * p
        mom = self.momentum_high + (self.momentum_low - self.momentum_high) * p
        return lr, mom


@dataclass(frozen=True)
class ConstantSchedule:
    """Fixed lr/momentum; the ablation counterpart of the one-cycle policy."""

    total_steps: int
    lr_max: float = 1e-2
    momentum_high: float = 0.95

    def at(self, step: float) -> tuple[float, float]:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        return self.lr_max, self.momentum_high


# ----------------------------------------------------------------------
# learning-rate range test
# ----------------------------------------------------------------------


@dataclass
class LrRangeResult:
    lrs: list[float] = field(default_factory=list)
    smoothed_losses: list[float] = field(default_factory=list)
    raw_losses: list[float] = field(default_factory=list)
    suggestion: float = float("nan")
    stopped_early: bool = False
    stop_lr: float = float("nan")


def lr_range_test(step_fn, lr_min: float = 1e-7, lr_max: float = 10.0,
                  steps: int = 100, smoothing: float = 0.98,
                  divergence_factor: float = 4.0) -> LrRangeResult:
    """Sweep a geometric lr grid, one mini-batch update per point.

    ``step_fn(lr)`` must run one update at that rate and return the batch
    loss. The recorded losses are exponentially smoothed (bias-corrected).
    The sweep stops once the smoothed loss exceeds ``divergence_factor``
    times the best seen, or once ``step_fn`` raises NonFiniteError, which
    counts as divergence. The suggested lr sits at the steepest negative
    slope of smoothed loss against log(lr).
    """
    if not lr_min < lr_max:
        raise ValueError(f"need lr_min < lr_max, got {lr_min} >= {lr_max}")
    if steps < 10:
        raise ValueError(f"need at least 10 steps, got {steps}")
    ratio = (lr_max / lr_min) ** (1.0 / steps)
    result = LrRangeResult()
    avg = 0.0
    best = math.inf
    for i in range(steps + 1):
        lr = lr_min * ratio ** i  # closed form avoids cumulative drift
        try:
            loss = float(step_fn(lr))
        except NonFiniteError:
            if not result.lrs:
                raise RuntimeError(
                    "loss was non-finite before any lr could be recorded")
            result.stopped_early = True
            result.stop_lr = lr
            break
        if not math.isfinite(loss):
            raise NonFiniteError(f"step_fn returned non-finite loss {loss} at lr {lr}")
        avg = smoothing * avg + (1.0 - smoothing) * loss
        smoothed = avg / (1.0 - smoothing ** (i + 1))
        result.lrs.append(lr)
        result.raw_losses.append(loss)
        result.smoothed_losses.append(smoothed)
        if smoothed > divergence_factor * best:
            result.stopped_early = True
            result.stop_lr = lr
            break
        best = min(best, smoothed)
    if len(result.lrs) < 2:
        raise RuntimeError("lr range test recorded fewer than 2 points")
    log_lrs = np.log(result.lrs)
    losses = np.asarray(result.smoothed_losses)
    slopes = np.diff(losses) / np.diff(log_lrs)
    steepest = int(np.argmin(slopes))
    # geometric midpoint of the steepest segment: strictly inside the grid
    result.suggestion = math.sqrt(result.lrs[steepest] * result.lrs[steepest + 1])
    return result
