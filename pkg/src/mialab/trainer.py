"""Mini-batch SGD with Nesterov momentum, warmup + cosine schedule, early stopping."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data_lab import Dataset, SplitPlan, augment_flip
from .tensor_core import Model, NumericalError, run_backward, run_forward, softmax_cross_entropy


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 100
    max_epochs: int = 60
    warmup_epochs: int = 5
    patience: int = 20
    flip: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs <= self.max_epochs:
            raise ValueError("warmup_epochs must lie in [0, max_epochs]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def overfit_preset(seed: int = 0, max_epochs: int = 80) -> TrainConfig:
    """Settings that memorise a small training set (large train/test gap)."""
    return TrainConfig(
        lr=0.05, momentum=0.9, weight_decay=0.0, batch_size=32, max_epochs=max_epochs,
        warmup_epochs=2, patience=max_epochs, flip=False, seed=seed,
    )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate used during ``epoch`` (0-based).

    Linear warmup reaches ``cfg.lr`` on the last warmup epoch; afterwards a
    cosine curve that would hit zero at epoch ``max_epochs``.
    """
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.lr * (epoch + 1) / w
    start = w - 1 if w > 0 else 0
    span = cfg.max_epochs - start
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - start) / span))


def predict(model: Model, x: np.ndarray, batch: int = 512) -> np.ndarray:
    """Argmax labels (ties go to the lowest class index)."""
    out = [run_forward(model, x[i : i + batch])[-1].argmax(axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, ds: Dataset, ids: Optional[Sequence[int]] = None) -> float:
    ids = np.arange(len(ds)) if ids is None else np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("accuracy over an empty id set")
    return float(np.mean(predict(model, ds.x[ids]) == ds.y[ids]))


def mean_loss(model: Model, x: np.ndarray, y: np.ndarray, batch: int = 512) -> float:
    total = 0.0
    for i in range(0, len(x), batch):
        loss, _ = softmax_cross_entropy(run_forward(model, x[i : i + batch])[-1], y[i : i + batch])
        total += loss.sum()
    return total / len(x)


def loss_and_grads(model: Model, x: np.ndarray, y: np.ndarray) -> Tuple[float, Dict]:
    """Mean cross-entropy over the batch and its parameter gradients."""
    acts = run_forward(model, x)
    loss, g = softmax_cross_entropy(acts[-1], y)
    _, grads = run_backward(model, acts, {len(acts) - 2: g / len(y)})
    return float(loss.mean()), grads


def train(
    model: Model, ds: Dataset, split: SplitPlan, cfg: TrainConfig, train_ids=None
) -> Tuple[Model, List[Dict[str, float]]]:
    """Fit on ``split.members`` (or ``train_ids``); returns new params and history."""
    model = model.copy()
    ids = np.asarray(split.members if train_ids is None else train_ids, dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("empty training set")
    if ids.min() < 0 or ids.max() >= len(ds):
        raise IndexError("member ids out of range")
    val_ids = np.asarray(split.validation, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    is_image = ds.x.ndim == 4
    velocity = {l: {n: np.zeros_like(a) for n, a in p.items()} for l, p in model.params.items()}
    history = []
    best_val, since_best = -1.0, 0
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(ids)
        running, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            xb = ds.x[b]
            if cfg.flip and is_image:
                flips = rng.random(len(b)) < 0.5
                xb = np.where(flips[:, None, None, None], augment_flip(xb, True), xb)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = loss_and_grads(model, xb, ds.y[b])
            except NumericalError:
                raise TrainingDiverged(epoch) from None
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            running += loss * len(b)
            seen += len(b)
            _sgd_step(model, grads, velocity, lr, cfg)
        train_loss = running / seen
        if not math.isfinite(train_loss):
            raise TrainingDiverged(epoch)
        train_acc = accuracy(model, ds, ids)
        val_acc = accuracy(model, ds, val_ids) if len(val_ids) else float("nan")
        history.append(
            {"epoch": epoch, "lr": lr, "train_loss": train_loss, "train_acc": train_acc, "val_acc": val_acc}
        )
        if len(val_ids):
            if val_acc > best_val:
                best_val, since_best = val_acc, 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
    return model, history


def _sgd_step(model: Model, grads, velocity, lr: float, cfg: TrainConfig) -> None:
    mu, wd = cfg.momentum, cfg.weight_decay
    for lid, p in model.params.items():
        for name, w in p.items():
            g = grads[lid][name]
            if wd:
                g = g + wd * w
            if mu:
                v = velocity[lid][name]
                v *= mu
                v += g
                g = g + mu * v
            p[name] = w - lr * g


def history_csv(history: List[Dict[str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc"])
    for row in history:
        writer.writerow(
            [row["epoch"], repr(row["lr"]), repr(row["train_loss"]), repr(row["train_acc"]), repr(row["val_acc"])]
        )
    return buf.getvalue()
