"""Optimization recipe and evaluation.

SGD with momentum and weight decay under a linear-warmup cosine
schedule. The base learning rate is quoted per 8-sample share of the
batch, so the effective rate scales linearly with the effective batch
size (batch times accumulation steps). Weight decay applies to conv and
affine weights only; normalization scales/shifts and biases are exempt.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .datapipe import ClipPipeline, PipelineConfig, VideoRecord, multiview_aggregate
from .network import SEVNet, save_checkpoint
from .tensor import Tensor, backward, loss as loss_fn, mul, no_grad


class NonFiniteGradientError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 64
    warmup_epochs: int = 4
    base_lr: float = 0.01  # per 8-sample share of the effective batch
    batch_size: int = 64  # effective batch (micro-batches sum to this)
    accum_steps: int = 1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss: str = "softmax_cross_entropy"
    seed: int = 0
    eval_every: int = 1
    track_train_accuracy: bool = True

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.batch_size < 1 or self.accum_steps < 1:
            raise ValueError("batch_size and accum_steps must be >= 1")
        if self.batch_size % self.accum_steps != 0:
            raise ValueError("accum_steps must divide batch_size")


@dataclass(frozen=True)
class LrSchedule:
    base: float
    warmup_steps: int
    total_steps: int

    def at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base * (step + 1) / self.warmup_steps
        q = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.base * 0.5 * (1.0 + math.cos(math.pi * q))


def lr_at(step: int, schedule: LrSchedule) -> float:
    return schedule.at(step)


def make_schedule(config: TrainConfig, steps_per_epoch: int) -> LrSchedule:
    effective_batch = config.batch_size
    return LrSchedule(
        base=config.base_lr * effective_batch / 8.0,
        warmup_steps=config.warmup_epochs * steps_per_epoch,
        total_steps=config.epochs * steps_per_epoch,
    )


def _decays(name: str) -> bool:
    return name.endswith("weight")


class SGD:
    """Momentum SGD: v <- m*v + (g + wd*w); w <- w - lr*v."""

    def __init__(self, named_params, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for (name, p), v in zip(self.params, self.velocity):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in {name}")
            if self.weight_decay and _decays(name):
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


def sgd_step(params, lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4, state: SGD | None = None) -> SGD:
    """One optimizer step over [(name, tensor)] pairs; returns the state."""
    if state is None:
        state = SGD(params, momentum, weight_decay)
    state.step(lr)
    return state


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def topk_correct(scores: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Per-sample flags: true label among the k highest scores."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return (order == labels.reshape(-1, 1)).any(axis=1)


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    return float(topk_correct(scores, labels, k).mean())


def mean_class_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average of per-class accuracies over the classes present."""
    correct = topk_correct(scores, labels, 1)
    accs = []
    for c in np.unique(labels):
        sel = labels == c
        accs.append(correct[sel].mean())
    return float(np.mean(accs))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Rank-based, interpolation-free AP of one class."""
    order = np.argsort(-scores, kind="stable")
    pos = np.asarray(positives, dtype=bool)[order]
    total = pos.sum()
    if total == 0:
        return float("nan")
    hits = np.cumsum(pos)
    precision = hits / np.arange(1, len(pos) + 1)
    return float(precision[pos].sum() / total)


def mean_average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mean AP over classes that have at least one positive."""
    aps = []
    for c in range(scores.shape[1]):
        if targets[:, c].sum() > 0:
            aps.append(average_precision(scores[:, c], targets[:, c]))
    if not aps:
        return float("nan")
    return float(np.mean(aps))


def _softmax(z: np.ndarray) -> np.ndarray:
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    top1: float
    top5: float
    mean_class_acc: float
    map: float | None = None

    def as_dict(self) -> dict:
        d = {
            "top1": self.top1,
            "top5": self.top5,
            "mean_class_acc": self.mean_class_acc,
        }
        if self.map is not None:
            d["map"] = self.map
        return d


def predict_scores(
    model: SEVNet,
    videos: list[VideoRecord],
    pipeline: ClipPipeline,
    multilabel: bool = False,
    batch_size: int = 16,
) -> np.ndarray:
    """Per-video class scores under the pipeline's test protocol.

    Views of one video run as a single batch; their probabilities are
    averaged into the video's score vector.
    """
    scores = []
    with no_grad():
        queue: list[np.ndarray] = []
        owners: list[int] = []

        def flush():
            if not queue:
                return
            x = Tensor(np.stack(queue).astype(model.dtype))
            logits = model.forward(x, training=False).data
            probs = _sigmoid(logits) if multilabel else _softmax(logits)
            for owner, row in zip(owners, probs):
                per_video[owner].append(row)
            queue.clear()
            owners.clear()

        per_video: list[list[np.ndarray]] = [[] for _ in videos]
        for vi, video in enumerate(videos):
            for view in pipeline.test_views(video):
                queue.append(view)
                owners.append(vi)
                if len(queue) >= batch_size:
                    flush()
        flush()
        for views in per_video:
            scores.append(multiview_aggregate(views))
    return np.stack(scores)


def evaluate(
    model: SEVNet,
    videos: list[VideoRecord],
    pipeline: ClipPipeline,
    multilabel: bool = False,
    batch_size: int = 16,
) -> EvalResult:
    scores = predict_scores(model, videos, pipeline, multilabel, batch_size)
    k = scores.shape[1]
    if multilabel:
        targets = np.stack([np.asarray(v.label) for v in videos])
        return EvalResult(
            top1=float("nan"),
            top5=float("nan"),
            mean_class_acc=float("nan"),
            map=mean_average_precision(scores, targets),
        )
    labels = np.asarray([int(v.label) for v in videos])
    return EvalResult(
        top1=topk_accuracy(scores, labels, 1),
        top5=topk_accuracy(scores, labels, min(5, k)),
        mean_class_acc=mean_class_accuracy(scores, labels),
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_top1: float | None = None
    eval_top1: float | None = None
    eval_top5: float | None = None
    eval_mean_class_acc: float | None = None
    eval_map: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class RunMetrics:
    epochs: list[EpochRecord] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def best(self) -> EpochRecord | None:
        if self.best_epoch is None:
            return None
        return self.epochs[self.best_epoch - 1]

    def to_json_lines(self) -> str:
        return "\n".join(json.dumps(r.as_dict()) for r in self.epochs)

    def summary(self) -> dict:
        out = {"epochs": len(self.epochs), "steps": len(self.lr_trace)}
        if self.epochs:
            out["final"] = self.epochs[-1].as_dict()
        if self.best_epoch is not None:
            out["best_epoch"] = self.best_epoch
            out["best"] = self.epochs[self.best_epoch - 1].as_dict()
        return out


def _validate_labels(videos: list[VideoRecord], num_classes: int,
                     multilabel: bool) -> None:
    for v in videos:
        if multilabel:
            vec = np.asarray(v.label)
            if vec.shape != (num_classes,):
                raise ValueError(
                    f"video {v.identifier!r}: label vector shape {vec.shape} "
                    f"does not match {num_classes} model classes"
                )
        else:
            if not 0 <= int(v.label) < num_classes:
                raise ValueError(
                    f"video {v.identifier!r}: label {v.label} outside the "
                    f"model's {num_classes} classes"
                )


def fit(
    model: SEVNet,
    train_videos: list[VideoRecord],
    eval_videos: list[VideoRecord] | None,
    config: TrainConfig,
    pipeline: ClipPipeline,
    out_dir: str | None = None,
    log_fn=None,
) -> RunMetrics:
    """Train under the warmup + cosine recipe; returns per-epoch metrics.

    Deterministic for a fixed config seed: sample order, augmentation,
    and dropout all derive from it. When ``out_dir`` is given, epoch
    records stream to ``metrics.jsonl`` and the best and final models are
    saved as checkpoints (best by eval top-1 when an eval set is present,
    else by train top-1, else by train loss).
    """
    multilabel = config.loss == "multilabel_bce"
    num_classes = model.config.num_classes
    _validate_labels(train_videos, num_classes, multilabel)
    if eval_videos:
        _validate_labels(eval_videos, num_classes, multilabel)

    n = len(train_videos)
    steps_per_epoch = max((n + config.batch_size - 1) // config.batch_size, 1)
    schedule = make_schedule(config, steps_per_epoch)
    sgd = SGD(model.named_parameters(), config.momentum, config.weight_decay)
    micro_size = config.batch_size // config.accum_steps
    metrics = RunMetrics()
    best_key = -math.inf

    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    try:
        global_step = 0
        for epoch in range(1, config.epochs + 1):
            epoch_rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, epoch, 0])
            )
            order = epoch_rng.permutation(n)
            loss_sum = 0.0
            for step_in_epoch in range(steps_per_epoch):
                batch = order[
                    step_in_epoch * config.batch_size :
                    (step_in_epoch + 1) * config.batch_size
                ]
                if batch.size == 0:
                    continue
                lr = schedule.at(global_step)
                sgd.zero_grad()
                drop_rng = np.random.default_rng(
                    np.random.SeedSequence([config.seed, epoch, step_in_epoch, 1])
                )
                n_micro = (batch.size + micro_size - 1) // micro_size
                for mi in range(n_micro):
                    micro = batch[mi * micro_size : (mi + 1) * micro_size]
                    clips, labels = [], []
                    for vi in micro:
                        video = train_videos[int(vi)]
                        sample_rng = np.random.default_rng(
                            np.random.SeedSequence(
                                [config.seed, epoch, int(vi), 2]
                            )
                        )
                        clips.append(pipeline.train_clip(video, sample_rng))
                        labels.append(video.label)
                    x = Tensor(np.stack(clips).astype(model.dtype))
                    if multilabel:
                        targets = np.stack(labels)
                    else:
                        targets = np.asarray(labels, dtype=np.int64)
                    logits = model.forward(x, training=True, rng=drop_rng)
                    l = loss_fn(config.loss, logits, targets)
                    loss_sum += l.item() * micro.size
                    if n_micro > 1:
                        l = mul(l, micro.size / batch.size)
                    backward(l)
                sgd.step(lr)
                metrics.lr_trace.append(lr)
                global_step += 1

            record = EpochRecord(epoch=epoch, train_loss=loss_sum / n)
            if config.track_train_accuracy and not multilabel:
                train_eval = evaluate(model, train_videos, pipeline, multilabel)
                record.train_top1 = train_eval.top1
            if eval_videos and (
                epoch % config.eval_every == 0 or epoch == config.epochs
            ):
                ev = evaluate(model, eval_videos, pipeline, multilabel)
                if multilabel:
                    record.eval_map = ev.map
                else:
                    record.eval_top1 = ev.top1
                    record.eval_top5 = ev.top5
                    record.eval_mean_class_acc = ev.mean_class_acc
            metrics.epochs.append(record)

            if record.eval_top1 is not None:
                key = record.eval_top1
            elif record.eval_map is not None:
                key = record.eval_map
            elif record.train_top1 is not None:
                key = record.train_top1
            else:
                key = -record.train_loss
            if key > best_key:
                best_key = key
                metrics.best_epoch = epoch
                if out_dir is not None:
                    save_checkpoint(model, os.path.join(out_dir, "best.ckpt"))

            if log_file is not None:
                log_file.write(json.dumps(record.as_dict()) + "\n")
                log_file.flush()
            if log_fn is not None:
                log_fn(record)

        if out_dir is not None:
            save_checkpoint(model, os.path.join(out_dir, "final.ckpt"))
            with open(os.path.join(out_dir, "summary.json"), "w") as f:
                json.dump(metrics.summary(), f, indent=2)
    finally:
        if log_file is not None:
            log_file.close()
    return metrics
