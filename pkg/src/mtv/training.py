"""SGD with momentum under a warmup-cosine schedule.

Training is deterministic under ``Hyperparams.seed``: batch order and
droplayer draws come from separate seeded streams, and per-epoch metrics
are reduced over samples in dataset order.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .config import MTVConfig
from .data import Dataset
from .errors import ConfigError, ContractError, NonFiniteError
from .model import ModelParams, build_model, forward, named_parameters

METRIC_COLUMNS = ("epoch", "step", "lr", "train_loss", "train_acc", "eval_acc")


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    total_epochs: float
    steps_per_epoch: int
    warmup_epochs: float = 2.5

    @property
    def total_steps(self) -> int:
        return int(round(self.total_epochs * self.steps_per_epoch))

    @property
    def warmup_steps(self) -> int:
        return min(self.total_steps, int(round(self.warmup_epochs * self.steps_per_epoch)))


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear ramp from 0 over the warmup, then cosine decay to 0."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    warm = schedule.warmup_steps
    if step < warm:
        return schedule.base_lr * step / warm
    if total == warm:
        return schedule.base_lr
    progress = (step - warm) / (total - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    momentum: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[tn.Tensor]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params])


def sgd_momentum_step(
    params: list[tn.Tensor],
    grads: list[np.ndarray | None],
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
) -> None:
    """``v = momentum * v + g``; ``p = p - lr * v`` (in place)."""
    if len(params) != len(grads) or len(params) != len(state.momentum):
        raise ContractError("params, grads and momentum buffers differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        v = state.momentum[i]
        if v.shape != p.shape:
            raise ContractError(f"momentum buffer {v.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        v = momentum * v + g
        state.momentum[i] = v
        p.data = p.data - lr * v
    state.step += 1


@dataclass(frozen=True)
class Hyperparams:
    epochs: float = 30
    batch_size: int = 8
    base_lr: float = 0.1
    momentum: float = 0.9
    warmup_epochs: float = 2.5
    label_smoothing: float = 0.0
    droplayer_rate: float | None = None
    seed: int = 0
    dtype: str = "float64"
    eval_crops: tuple[int, int] = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "eval_crops", tuple(self.eval_crops))
        if self.epochs < 0 or self.batch_size < 1 or self.base_lr < 0:
            raise ConfigError("epochs and base_lr must be non-negative and batch_size positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ConfigError(f"train: unknown key {key!r}")
        return cls(**d)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)


class CSVMetricsSink:
    """Append metric rows to a CSV file (header written on open)."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)

    def __call__(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def metrics_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in history:
        w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _with_droplayer(config: MTVConfig, rate: float | None) -> MTVConfig:
    if rate is None:
        return config
    views = tuple(
        dataclasses.replace(v, encoder=dataclasses.replace(v.encoder, droplayer_rate=rate)) for v in config.views
    )
    return dataclasses.replace(config, views=views)


def predict(params: ModelParams, clips: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Softmax probabilities ``[N, classes]`` without gradients."""
    dtype = params.head_w.data.dtype
    out = []
    with tn.no_grad(), tn.default_dtype(dtype):
        for start in range(0, len(clips), batch_size):
            x = clips[start : start + batch_size].astype(dtype, copy=False)
            out.append(tn.softmax(forward(params, x), axis=-1).data)
    if not out:
        return np.zeros((0, params.config.num_classes))
    return np.concatenate(out)


def evaluate(params: ModelParams, dataset: Dataset, crops: tuple[int, int] = (1, 1), batch_size: int = 32) -> float:
    """Top-1 accuracy; with more than one crop, probabilities are averaged over crops."""
    if len(dataset) == 0:
        return float("nan")
    if tuple(crops) == (1, 1):
        probs = predict(params, dataset.clips, batch_size)
    else:
        from .model import make_crops, multi_crop_inference

        target = params.config.clip_shape
        probs = np.stack(
            [multi_crop_inference(params, make_crops(c, target, *crops)) for c in dataset.clips]
        )
    return float(np.mean(probs.argmax(axis=1) == dataset.labels))


def train(
    config: MTVConfig,
    dataset: Dataset,
    hyper: Hyperparams = Hyperparams(),
    metrics_sink: Callable[[dict], None] | None = None,
    eval_set: Dataset | None = None,
    params: ModelParams | None = None,
) -> TrainResult:
    """Train from ``params`` (or a fresh model) and return final params plus history."""
    with tn.default_dtype(np.dtype(hyper.dtype)):
        return _train(config, dataset, hyper, metrics_sink, eval_set, params)


def _train(config, dataset, hyper, metrics_sink, eval_set, params) -> TrainResult:
    config = _with_droplayer(config, hyper.droplayer_rate)
    if tuple(dataset.clips.shape[1:]) != config.clip_shape:
        raise ContractError(f"dataset clips {dataset.clips.shape[1:]} do not match model clip {config.clip_shape}")
    if dataset.labels.size and dataset.labels.max() >= config.num_classes:
        raise ContractError(f"labels reach {dataset.labels.max()} but the model has {config.num_classes} classes")
    dtype = np.dtype(hyper.dtype)
    if params is None:
        params = build_model(config, dtype=dtype)
    else:
        params = dataclasses.replace(params, config=config)
    named = list(named_parameters(params))
    plist = [t for _, t in named]
    state = OptimizerState.zeros_like(plist)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / hyper.batch_size) if n else 0
    schedule = Schedule(hyper.base_lr, hyper.epochs, steps_per_epoch, hyper.warmup_epochs)
    order_rng = np.random.default_rng([hyper.seed, 10])
    drop_rng = np.random.default_rng([hyper.seed, 11])
    history: list[dict] = []
    step = 0
    clips = dataset.clips
    labels = dataset.labels
    for epoch in range(int(math.ceil(hyper.epochs))):
        order = order_rng.permutation(n)
        losses = np.zeros(n)
        correct = np.zeros(n, dtype=bool)
        seen = np.zeros(n, dtype=bool)
        lr = 0.0
        for start in range(0, n, hyper.batch_size):
            if step >= schedule.total_steps:
                break
            idx = order[start : start + hyper.batch_size]
            lr = lr_at(schedule, step)
            x = tn.Tensor(clips[idx].astype(dtype, copy=False))
            logits = forward(params, x, training=True, rng=drop_rng)
            loss = tn.cross_entropy(logits, labels[idx], hyper.label_smoothing)
            if not np.isfinite(loss.data):
                raise NonFiniteError(f"non-finite loss at epoch {epoch} step {step} (lr {lr:.3g})")
            for p in plist:
                p.grad = None
            tn.backward(loss)
            sgd_momentum_step(plist, [p.grad for p in plist], state, lr, hyper.momentum)
            z = logits.data - logits.data.max(axis=1, keepdims=True)
            lsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            losses[idx] = -lsm[np.arange(len(idx)), labels[idx]]
            correct[idx] = logits.data.argmax(axis=1) == labels[idx]
            seen[idx] = True
            step += 1
        for p in plist:
            p.grad = None
        eval_acc = evaluate(params, eval_set, hyper.eval_crops) if eval_set is not None else float("nan")
        row = {
            "epoch": epoch + 1,
            "step": step,
            "lr": float(lr),
            "train_loss": float(losses[seen].mean()) if seen.any() else float("nan"),
            "train_acc": float(correct[seen].mean()) if seen.any() else float("nan"),
            "eval_acc": eval_acc,
        }
        history.append(row)
        if metrics_sink is not None:
            metrics_sink(row)
    return TrainResult(params, history)
