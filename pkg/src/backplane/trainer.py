"""Plain gradient-descent training with softmax cross-entropy and L1 kernel decay.

No momentum, no weight averaging: w <- w - lr * (dL/dw + l1 * sign(w)), with
the L1 subgradient taken as 0 at exactly 0. The loss reads the FC
pre-activation logits. Checkpoints are written whenever the periodic
validation pass improves on the best accuracy so far.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, augment, normalize_images
from .network import NetworkGraph, backprop, forward, save_model


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}, step {step}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 100
    lr: float = 2e-4
    lr_drops: tuple = ()  # ((epoch, rate), ...) applied from that epoch on
    l1: float = 1e-4
    subset: int = 5000  # training examples drawn from the train split; 0 = all
    val_subset: int = 0  # validation examples used per eval; 0 = all
    val_every: int = 2
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        rates = [self.lr] + [r for _, r in sorted(self.lr_drops)]
        if any(r <= 0 for r in rates):
            raise ValueError(f"learning rates must be positive: {rates}")
        if any(a < b for a, b in zip(rates, rates[1:])):
            raise ValueError(f"learning rates must be non-increasing over the schedule: {rates}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def rate_at(self, epoch: int) -> float:
        rate = self.lr
        for start, r in sorted(self.lr_drops):
            if epoch >= start:
                rate = r
        return rate


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, lr, train_loss, val_acc or None)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "lr", "train_loss", "val_acc"])
            for epoch, lr, loss, acc in self.rows:
                w.writerow([epoch, repr(lr), repr(loss), "" if acc is None else repr(acc)])


@dataclass
class TrainResult:
    net: NetworkGraph
    log: TrainLog
    best_val_acc: float
    step_losses: list


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its logits gradient for a batch."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    picked = z[np.arange(n), labels]
    loss = float(np.mean(np.log(ez.sum(axis=1)) - picked))
    grad = p
    grad[np.arange(n), labels] -= 1
    return loss, grad / logits.dtype.type(n)


def l1_penalty(net: NetworkGraph) -> float:
    total = 0.0
    for layer in net.layers:
        if layer.kind in ("conv", "fc"):
            total += float(np.abs(layer.kernel).sum())
    return total


def evaluate(net: NetworkGraph, x: np.ndarray, y: np.ndarray, batch_size: int = 100) -> float:
    """Top-1 accuracy on normalized inputs."""
    hits = 0
    for lo in range(0, x.shape[0], batch_size):
        logits, _ = forward(net, x[lo : lo + batch_size])
        hits += int(np.count_nonzero(np.argmax(logits, axis=1) == y[lo : lo + batch_size]))
    return hits / x.shape[0] if x.shape[0] else 0.0


def train(
    net: NetworkGraph,
    dataset: Dataset,
    config: TrainConfig,
    model_path=None,
    log_path=None,
) -> TrainResult:
    """Desk-scale training loop; deterministic given config.seed."""
    rng = np.random.default_rng(config.seed)
    n_train = dataset.train_x.shape[0]
    subset = min(config.subset or n_train, n_train)
    pool = rng.permutation(n_train)[:subset]
    val_x = dataset.val_x
    val_y = dataset.val_y
    if config.val_subset and config.val_subset < val_x.shape[0]:
        pick = rng.permutation(val_x.shape[0])[: config.val_subset]
        val_x, val_y = val_x[pick], val_y[pick]
    val_x = dataset.normalize(val_x.astype(net.dtype))
    log = TrainLog()
    step_losses = []
    best_acc = -1.0
    for epoch in range(config.epochs):
        rate = net.dtype.type(config.rate_at(epoch))
        order = rng.permutation(subset)
        epoch_losses = []
        for step, lo in enumerate(range(0, subset, config.batch_size)):
            idx = pool[order[lo : lo + config.batch_size]]
            batch = dataset.train_x[idx]
            if config.augment:
                batch = np.stack([augment(img, rng) for img in batch])
            batch = normalize_images(batch.astype(net.dtype), dataset.config)
            labels = dataset.train_y[idx]
            logits, _ = forward(net, batch)
            loss, g_logits = softmax_cross_entropy(logits, labels)
            loss += config.l1 * l1_penalty(net)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, step, loss)
            _, grads = backprop(net, batch, g_logits)
            for layer in net.layers:
                if layer.kind in ("conv", "fc"):
                    g = grads[layer.name] + net.dtype.type(config.l1) * np.sign(layer.kernel)
                    layer.kernel -= rate * g
                elif layer.kind == "scalar_rescale":
                    layer.scale -= rate * grads[layer.name]
            epoch_losses.append(loss)
            step_losses.append(loss)
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        val_acc = None
        if (epoch + 1) % config.val_every == 0 or epoch + 1 == config.epochs:
            val_acc = evaluate(net, val_x, val_y, config.batch_size)
            if val_acc > best_acc:
                best_acc = val_acc
                if model_path is not None:
                    save_model(net, model_path)
        log.rows.append((epoch, float(rate), mean_loss, val_acc))
    if model_path is not None and best_acc < 0:
        save_model(net, model_path)  # epochs == 0 or no eval ran; persist as-is
    if log_path is not None:
        log.to_csv(log_path)
    return TrainResult(net=net, log=log, best_val_acc=max(best_acc, 0.0), step_losses=step_losses)
