"""Minibatching, the training loop and close-talking warm starts."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from dsrlab.nn.losses import frame_accuracy, mse_loss, nll_loss
from dsrlab.nn.optim import LrSchedule


@dataclass
class Batch:
    """Model input ``x`` with targets; sequence batches are time-major (T, B, ...)."""

    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray | None = None
    lengths: np.ndarray | None = None


class FrameDataset:
    """Independent frames: ``x`` (N, d) with integer labels or real targets."""

    def __init__(self, x, y):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y)
        if len(self.x) != len(self.y):
            raise ValueError("inputs and targets differ in length")

    def __len__(self):
        return len(self.x)

    def batches(self, batch_size: int, rng=None, sort_by_length: bool = True):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield Batch(self.x[idx], self.y[idx])


class SequenceDataset:
    """Variable-length utterances ``(T_i, d)`` with per-frame targets."""

    def __init__(self, xs, ys):
        self.xs = [np.asarray(x, dtype=np.float64) for x in xs]
        self.ys = [np.asarray(y) for y in ys]
        if len(self.xs) != len(self.ys):
            raise ValueError("inputs and targets differ in count")
        for x, y in zip(self.xs, self.ys):
            if len(x) != len(y) or len(x) == 0:
                raise ValueError("each utterance needs one target per frame")

    def __len__(self):
        return len(self.xs)

    def batches(self, batch_size: int, rng=None, sort_by_length: bool = True):
        """Padded time-major batches; ascending length order when sorting."""
        if sort_by_length:
            order = np.argsort([len(x) for x in self.xs], kind="stable")
        elif rng is not None:
            order = rng.permutation(len(self))
        else:
            order = np.arange(len(self))
        for start in range(0, len(self), batch_size):
            yield collate([self.xs[i] for i in order[start : start + batch_size]],
                          [self.ys[i] for i in order[start : start + batch_size]])


def collate(xs, ys) -> Batch:
    lengths = np.array([len(x) for x in xs])
    t, b = lengths.max(), len(xs)
    x = np.zeros((t, b) + xs[0].shape[1:])
    y = np.zeros((t, b) + ys[0].shape[1:], dtype=ys[0].dtype)
    mask = np.zeros((t, b))
    for j, (xi, yi) in enumerate(zip(xs, ys)):
        x[: len(xi), j] = xi
        y[: len(yi), j] = yi
        mask[: len(xi), j] = 1.0
    return Batch(x, y, mask, lengths)


def forward_batch(model, batch: Batch, train: bool):
    if hasattr(model, "forward_batch"):
        return model.forward_batch(batch, train)
    return model.forward(batch.x, train)


def batch_loss(objective: str, out, batch: Batch):
    if objective == "nll":
        return nll_loss(out, batch.y, batch.mask)
    if objective == "mse":
        return mse_loss(out, batch.y, batch.mask)
    raise ValueError(f"unknown objective {objective!r}")


def evaluate(model, data, objective: str = "nll", batch_size: int = 128):
    """Frame-weighted loss and (for classification) frame accuracy."""
    total, frames, correct = 0.0, 0.0, 0.0
    for batch in data.batches(batch_size, None, sort_by_length=True):
        out = forward_batch(model, batch, train=False)
        loss, _ = batch_loss(objective, out, batch)
        n = batch.mask.sum() if batch.mask is not None else len(batch.x)
        total += loss * n
        frames += n
        if objective == "nll":
            correct += frame_accuracy(out, batch.y, batch.mask) * n
    acc = correct / frames if objective == "nll" else float("nan")
    return float(total / frames), float(acc)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def as_dicts(self):
        return [dict(r) for r in self.records]

    @property
    def final(self) -> dict:
        return self.records[-1]


def train(
    model,
    data,
    optimizer,
    schedule: LrSchedule | None = None,
    epochs: int = 10,
    batch_size: int = 128,
    objective: str = "nll",
    dev=None,
    seed: int = 0,
    sort_by_length: bool = True,
) -> TrainLog:
    """Minibatch training with per-epoch dev monitoring.

    Sequence data is visited in ascending length order (curriculum); frame
    data is reshuffled every epoch from ``seed``. With a schedule, the dev
    frame accuracy (or the relative dev-loss decrease for regression) drives
    learning-rate halving and early stopping.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    log = TrainLog()
    prev = None
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for batch in data.batches(batch_size, rng, sort_by_length):
            model.zero_grad()
            out = forward_batch(model, batch, train=True)
            loss, grad = batch_loss(objective, out, batch)
            model.backward(grad)
            optimizer.step(model.parameters(), model.gradients())
            total += loss
            count += 1
        record = {"epoch": epoch, "train_loss": total / count, "lr": optimizer.lr}
        if dev is not None:
            dev_loss, dev_acc = evaluate(model, dev, objective, batch_size)
            record["dev_loss"] = dev_loss
            if objective == "nll":
                record["dev_acc"] = dev_acc
            if schedule is not None:
                if objective == "nll":
                    score = dev_acc
                    improvement = score - prev if prev is not None else np.inf
                else:
                    score = dev_loss
                    improvement = (prev - score) / prev if prev else np.inf
                prev = score
                optimizer.lr = schedule.update(improvement)
                record["next_lr"] = optimizer.lr
        log.records.append(record)
        if schedule is not None and schedule.stopped:
            break
    return log


def warm_start_finetune(model_clean, data, make_optimizer, lr: float, reduced_lr_factor: float = 0.5,
                        **train_kwargs):
    """Copy a close-talking model and continue training on contaminated data.

    ``make_optimizer(lr)`` builds a fresh optimizer; the starting rate is
    ``lr * reduced_lr_factor``. Returns the fine-tuned copy and its log.
    """
    if reduced_lr_factor <= 0:
        raise ValueError("reduced_lr_factor must be positive")
    model = copy.deepcopy(model_clean)
    optimizer = make_optimizer(lr * reduced_lr_factor)
    schedule = train_kwargs.pop("schedule", None)
    if schedule is not None:
        schedule = LrSchedule(lr * reduced_lr_factor, schedule.start_threshold, schedule.stop_threshold)
    log = train(model, data, optimizer, schedule, **train_kwargs)
    return model, log
