"""Optimizers, schedules, metrics and the classification / reconstruction loops."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .tensor import child_seed, rng

DEFAULT_THRESHOLDS = (0.1, 0.3, 0.5, 0.7, 0.9)


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    epochs: int = 20
    lr_schedule: list = field(default_factory=lambda: [(20, 1e-3)])
    batch_size: int = 8
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    seed: int = 0
    dtype: str = "float32"
    threshold: float = 0.3
    # stop early once the epoch metric, re-measured in inference mode, exceeds this
    target_metric: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if sum(span for span, _ in self.lr_schedule) != self.epochs:
            raise ValueError(f"lr schedule spans {self.lr_schedule} do not cover {self.epochs} epochs")
        if any(span < 0 or lr < 0 for span, lr in self.lr_schedule):
            raise ValueError("lr schedule spans and learning rates must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        start = 0
        for span, lr in self.lr_schedule:
            if epoch < start + span:
                return lr
            start += span
        raise IndexError(f"epoch {epoch} outside the schedule")


def constant_schedule(epochs: int, lr: float) -> list:
    return [(epochs, lr)]


PRESETS = {
    # 20 epochs, 1e-5 then 1e-6, batch 8
    "paper-cls": dict(epochs=20, lr_schedule=[(10, 1e-5), (10, 1e-6)], batch_size=8),
    # 120 epochs, 1e-6 then 1e-7, batch 32
    "paper-rec": dict(epochs=120, lr_schedule=[(60, 1e-6), (60, 1e-7)], batch_size=32),
}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        kw = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    kw.update(overrides)
    return TrainConfig(**kw)


# ---------------------------------------------------------------- optimizers

class SGD:
    def __init__(self, params, momentum: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float) -> None:
        for (_, p), v in zip(self.params, self.velocity):
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data -= (lr * v).astype(p.data.dtype, copy=False)
            else:
                p.data -= (lr * p.grad).astype(p.data.dtype, copy=False)


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        step = lr / c1
        for (_, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if lr == 0:
                continue
            p.data -= (step * m / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)


def make_optimizer(network, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(network.parameters(), config.betas, config.eps)
    return SGD(network.parameters(), config.momentum)


# ------------------------------------------------------------------- metrics

def accuracy(logits: np.ndarray, labels) -> float:
    """Fraction of argmax hits; ties resolve to the lowest class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if logits.shape[0] == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def iou(pred: np.ndarray, truth: np.ndarray, t: float = 0.3) -> float:
    """|{p > t} and y| / |{p > t} or y|; two empty sets score 1.0."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if not 0 < t < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    p = pred > t
    y = truth > 0.5
    union = np.count_nonzero(p | y)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & y) / union


def miou(pred: np.ndarray, truth: np.ndarray, t: float = 0.3) -> float:
    """Mean per-sample IoU over a leading batch axis (a single grid is one sample)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.ndim <= 3:
        return iou(pred, truth, t)
    return float(np.mean([iou(p, y, t) for p, y in zip(pred, truth)]))


@dataclass
class EvalResult:
    accuracy: float | None = None
    miou: float | None = None
    per_threshold: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    best_threshold: float | None = None


def threshold_sweep(pred, truth, thresholds=DEFAULT_THRESHOLDS) -> EvalResult:
    thresholds = tuple(thresholds)
    if not thresholds:
        raise ValueError("threshold set is empty")
    table = {t: miou(pred, truth, t) for t in thresholds}
    # first maximum wins on ties
    best = max(thresholds, key=lambda t: (table[t], -thresholds.index(t)))
    return EvalResult(miou=table[best], per_threshold=table, best_threshold=best)


def per_class_miou(pred, truth, labels, t: float = 0.3) -> dict:
    labels = np.asarray(labels)
    return {int(c): miou(pred[labels == c], truth[labels == c], t) for c in np.unique(labels)}


def class_mean(per_class: dict) -> float:
    return float(np.mean(list(per_class.values())))


# --------------------------------------------------------------------- loops

@dataclass
class History:
    rows: list = field(default_factory=list)

    def append(self, epoch: int, lr: float, loss: float, metric: float) -> None:
        self.rows.append({"epoch": epoch, "lr": lr, "loss": loss, "metric": metric})

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    @property
    def metrics(self) -> list[float]:
        return [r["metric"] for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "loss", "metric"], lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({"epoch": r["epoch"], "lr": repr(r["lr"]),
                            "loss": repr(r["loss"]), "metric": repr(r["metric"])})

    @classmethod
    def from_csv(cls, path) -> "History":
        h = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                h.append(int(r["epoch"]), float(r["lr"]), float(r["loss"]), float(r["metric"]))
        return h


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = rng(child_seed(seed, 0xB47C, epoch)).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_loss(loss: float, epoch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} at epoch {epoch}")


def _check_output(out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise TrainingDiverged("network output contains NaN or inf")


def _fit(network, inputs, step_fn, metric_fn, confirm_fn, config: TrainConfig, log=None) -> History:
    if len(inputs) == 0:
        raise ValueError("dataset is empty")
    opt = make_optimizer(network, config)
    hist = History()
    n = len(inputs)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        total, outs = 0.0, [None] * n
        for idx in _batches(n, config.batch_size, config.seed, epoch):
            network.zero_grad()
            loss, out = step_fn(idx)
            _check_loss(loss, epoch)
            total += loss * len(idx)
            for j, i in enumerate(idx):
                outs[i] = out[j]
            opt.step(lr)
        metric = metric_fn(np.stack(outs))
        hist.append(epoch, lr, total / n, metric)
        if log is not None:
            log(epoch, lr, total / n, metric)
        if (config.target_metric is not None and metric > config.target_metric
                and confirm_fn() > config.target_metric):
            break
    return hist


def train_classifier(network, inputs: np.ndarray, labels: np.ndarray, config: TrainConfig,
                     log=None) -> History:
    """Cross-entropy training; the epoch metric is the accuracy of that epoch's forward passes."""
    labels = np.asarray(labels, dtype=np.int64)
    dtype = network.dtype

    def step(idx):
        logits = network.forward(inputs[idx].astype(dtype, copy=False), training=True)
        _check_output(logits)
        loss, g = ops.softmax_cross_entropy(logits, labels[idx])
        network.backward(g.astype(dtype, copy=False))
        return loss, logits

    return _fit(network, inputs, step, lambda out: accuracy(out, labels),
                lambda: accuracy(predict(network, inputs.astype(dtype, copy=False)), labels), config, log)


def train_reconstructor(network, latents: np.ndarray, voxels: np.ndarray, config: TrainConfig,
                        log=None) -> History:
    """Voxel-wise sigmoid cross entropy; the epoch metric is mIoU at ``config.threshold``."""
    dtype = network.dtype

    def step(idx):
        logits = network.forward(latents[idx].astype(dtype, copy=False), training=True)
        _check_output(logits)
        loss, g = ops.voxel_bce(logits, voxels[idx])
        network.backward(g.astype(dtype, copy=False))
        return loss, ops.sigmoid(logits)

    def confirm():
        probs = ops.sigmoid(predict(network, latents.astype(dtype, copy=False)))
        return miou(probs, voxels, config.threshold)

    return _fit(network, latents, step, lambda out: miou(out, voxels, config.threshold), confirm,
                config, log)


def predict(network, inputs: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Inference-mode forward in fixed-size chunks."""
    outs = [network.forward(inputs[i:i + batch_size], training=False)
            for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs)


def evaluate_classifier(network, inputs, labels) -> EvalResult:
    return EvalResult(accuracy=accuracy(predict(network, inputs), labels))


def evaluate_reconstructor(network, latents, voxels, labels=None,
                           thresholds=DEFAULT_THRESHOLDS) -> EvalResult:
    probs = ops.sigmoid(predict(network, latents))
    res = threshold_sweep(probs, voxels, thresholds)
    if labels is not None:
        res.per_class = per_class_miou(probs, voxels, labels, res.best_threshold)
    return res


def save_history(hist: History, path) -> Path:
    p = Path(path)
    hist.to_csv(p)
    return p
