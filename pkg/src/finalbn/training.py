"""Losses, mixup, SGD with momentum and weight decay, learning-rate schedules and the epoch loop."""

from __future__ import annotations

import math

import numpy as np

from .config import OptimConfig, TrainConfig
from .data import Dataset, augment_batch
from .layers import Model, Param
from .metrics import classification_summary, ece, softmax_trace
from .report import RunReport
from .tensor import BatchTooSmallError, NumericError, as_tensor, check_finite


class TrainingError(RuntimeError):
    """A run aborted inside the epoch loop; the message carries the epoch and batch."""


def log_softmax(logits) -> np.ndarray:
    z = check_finite(as_tensor(logits), "logits")
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits) -> np.ndarray:
    z = check_finite(as_tensor(logits), "logits")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels, num_classes: int = 2) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]


def weighted_cross_entropy(logits, targets, weights=(1.0, 1.0)) -> tuple[float, np.ndarray]:
    """Class-weighted cross-entropy normalised by the total sample weight.

    ``targets`` is either integer labels or soft label rows (mixup). A sample's
    weight is ``targets_i . weights``, which for a mixed pair equals
    ``lam * w[y_i] + (1 - lam) * w[y_j]``.

    Returns ``(loss, d loss / d logits)``.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if np.any((targets != 0) & (targets != 1)):
            raise ValueError("labels must be 0 or 1")
        targets = one_hot(targets, logits.shape[1])
    targets = as_tensor(targets)
    if targets.shape != logits.shape:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    logp = log_softmax(logits)
    sample_w = targets @ as_tensor(weights)
    total = sample_w.sum()
    loss = float(np.sum(sample_w * -(targets * logp).sum(axis=1)) / total)
    grad = sample_w[:, None] * (np.exp(logp) - targets) / total
    return loss, grad


def mixup_batch(x, y_onehot, alpha: float, rng: np.random.Generator, lam: float | None = None, perm=None):
    """Convex combination of the batch with a random permutation of itself.

    ``lam`` and ``perm`` are drawn from ``Beta(alpha, alpha)`` and ``rng``
    unless given.
    """
    x = as_tensor(x)
    y_onehot = as_tensor(y_onehot)
    if len(x) < 2:
        raise BatchTooSmallError("mixup needs at least 2 samples")
    draw_lam = rng.beta(alpha, alpha)
    draw_perm = rng.permutation(len(x))
    lam = draw_lam if lam is None else lam
    perm = draw_perm if perm is None else np.asarray(perm)
    return lam * x + (1.0 - lam) * x[perm], lam * y_onehot + (1.0 - lam) * y_onehot[perm]


class SGD:
    """Momentum SGD: ``v = mu*v + g + wd*w`` (weights only), then ``w -= lr*v``."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[int, np.ndarray] = {}

    def step(self, params: list[Param], lr: float) -> None:
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for parameter {p.name}")
            v = self.velocity.get(id(p))
            g = p.grad + self.weight_decay * p.value if p.decay and self.weight_decay else p.grad
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[id(p)] = v
            p.value -= lr * v


def sgd_step(params: list[Param], optimizer: SGD, lr_now: float) -> None:
    optimizer.step(params, lr_now)


def lr_at(schedule: str, base_lr: float, epoch: int, step: int, total_steps: int) -> float:
    """Learning rate for a global step.

    ``one-cycle`` warms up linearly from ``base_lr/25`` over the first 30% of
    steps, then follows a cosine down to ``base_lr/100`` at the last step.
    ``step`` divides by 10 every 4 epochs.
    """
    if schedule == "constant":
        return base_lr
    if schedule == "step":
        return base_lr * 0.1 ** (epoch // 4)
    if schedule == "one-cycle":
        warm = int(0.3 * total_steps)
        if step < warm:
            start = base_lr / 25.0
            return start + (base_lr - start) * step / warm
        span = total_steps - 1 - warm
        t = 1.0 if span <= 0 else (step - warm) / span
        low = base_lr / 100.0
        return low + (base_lr - low) * 0.5 * (1.0 + math.cos(math.pi * t))
    raise ValueError(f"unknown schedule {schedule!r}")


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:  # batch norm cannot train on a single sample
            yield idx


def steps_per_epoch(n: int, batch_size: int) -> int:
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= 2 else 0)


def evaluate(model: Model, data: Dataset) -> tuple[dict, np.ndarray]:
    """Eval-mode metrics for one split; the loss is the unweighted mean cross-entropy."""
    probs = model.predict_proba(data.pixels)
    row = classification_summary(probs, data.labels)
    if len(data):
        row["loss"] = float(-np.mean(np.log(np.clip(probs[np.arange(len(data)), data.labels], 1e-300, None))))
    else:
        row["loss"] = 0.0
    return row, probs


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "dropout", "shuffle", "augment", "mixup")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def train_model(config: TrainConfig, train: Dataset, val: Dataset, test: Dataset, seed: int):
    """Train one model; returns ``(model, RunReport)``.

    Each epoch shuffles the training split, optionally augments and mixes the
    batch, takes one SGD step per batch and then evaluates all three splits
    in eval mode.
    """
    rngs = _streams(seed)
    model = Model(config.model_spec(), rngs["init"], rngs["dropout"])
    optim: OptimConfig = config.optim_config()
    loss_cfg = config.loss_config(train.labels)
    optimizer = SGD(optim.momentum, optim.weight_decay)
    report = RunReport(config=config, seed=seed, class_weights=loss_cfg.class_weights)

    n = len(train)
    per_epoch = steps_per_epoch(n, optim.batch_size)
    total_steps = max(1, optim.epochs * per_epoch)
    targets_all = one_hot(train.labels)
    test_calibration = {}
    step = 0
    for epoch in range(optim.epochs):
        order = rngs["shuffle"].permutation(n)
        for b, idx in enumerate(_batches(n, optim.batch_size, order)):
            try:
                x = train.pixels[idx]
                t = targets_all[idx]
                if config.data_augment:
                    x = augment_batch(x, rngs["augment"])
                if loss_cfg.mixup_enabled:
                    x, t = mixup_batch(x, t, loss_cfg.mixup_alpha, rngs["mixup"])
                logits = model.forward(x, training=True)
                _, grad = weighted_cross_entropy(logits, t, loss_cfg.class_weights)
                model.backward(grad)
                lr = lr_at(optim.schedule, optim.base_lr, epoch, step, total_steps)
                optimizer.step(model.trainable_params(), lr)
            except (ArithmeticError, ValueError) as exc:
                raise TrainingError(f"epoch {epoch + 1}, batch {b}: {exc}") from exc
            step += 1
        for name, split in (("train", train), ("val", val), ("test", test)):
            row, probs = evaluate(model, split)
            report.epochs.append({"epoch": epoch + 1, "split": name, **row})
            if name == "test":
                test_calibration[epoch + 1] = ece(probs, split.labels)
                last_test_probs = probs

    test_rows = report.rows("test")
    if test_rows:
        best = max(test_rows, key=lambda r: (r["f11"], -r["epoch"]))
        report.best_epoch = best["epoch"]
        report.calibration = test_calibration[best["epoch"]]
        report.final_test_trace = softmax_trace(last_test_probs, test.labels)
    return model, report


def train_run(config: TrainConfig, train: Dataset, val: Dataset, test: Dataset, seed: int) -> RunReport:
    return train_model(config, train, val, test, seed)[1]
