"""Cross-entropy loss, Adam, the epoch loop and accuracy evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .autograd import Tensor, get_dtype, no_grad
from .autograd.tensor import make_result
from .data import LabeledPatch, stack


class Model(Protocol):
    def forward(self, images: np.ndarray, rng=None, training: bool = False) -> Tensor: ...

    def parameters(self) -> list[Tensor]: ...


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    num_epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.num_epochs < 0:
            raise ValueError(f"num_epochs must be non-negative, got {self.num_epochs}")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


@dataclass
class EpochLog:
    epoch: int
    batch_size: int
    loss: float
    val_accuracy: Optional[float] = None

    def line(self) -> str:
        return f"[Epoch {self.epoch}, Batch of: {self.batch_size}] loss: {self.loss:.3f}"


@dataclass
class EvalResult:
    accuracy: float
    records: list[tuple[int, int]] = field(default_factory=list)  # (label, prediction)

    @property
    def correct(self) -> int:
        return sum(label == pred for label, pred in self.records)

    @property
    def total(self) -> int:
        return len(self.records)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    b, c = logits.shape
    if b == 0:
        raise ValueError("cross_entropy_loss needs a non-empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got {labels.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = (log_norm - z[rows, labels]).mean()

    def backward(g):
        probs = np.exp(z - log_norm[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (g / b),)

    return make_result(np.asarray(loss), (logits,), backward, "cross_entropy")


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data = (p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.data.dtype, copy=False)
    return state


def _batch_arrays(patches: Sequence[LabeledPatch]) -> tuple[np.ndarray, np.ndarray]:
    images, labels = stack(patches)
    return images.astype(get_dtype(), copy=False), labels


def predict_batch(model: Model, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted classes and softmax probabilities, inference mode."""
    with no_grad():
        logits = model.forward(images.astype(get_dtype(), copy=False), None, False).data.astype(np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return logits.argmax(axis=1), probs


def evaluate(model: Model, patches: Sequence[LabeledPatch], batch_size: int = 64) -> EvalResult:
    """Accuracy = 100 * correct / total, plus every (label, prediction) pair."""
    if not patches:
        raise ValueError("cannot evaluate on an empty split")
    records = []
    for start in range(0, len(patches), batch_size):
        images, labels = _batch_arrays(patches[start : start + batch_size])
        preds, _ = predict_batch(model, images)
        records += [(int(l), int(p)) for l, p in zip(labels, preds)]
    correct = sum(l == p for l, p in records)
    return EvalResult(100.0 * correct / len(records), records)


def train(
    model: Model,
    train_set: Sequence[LabeledPatch],
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    validation: Sequence[LabeledPatch] = (),
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> tuple[Model, list[EpochLog]]:
    """Mini-batch Adam training; one :class:`EpochLog` per epoch.

    Each epoch shuffles ``train_set`` with ``rng`` (which also drives
    dropout), keeps the final partial batch, and records the
    sample-weighted mean training loss.
    """
    if not train_set:
        raise TrainingError("training split is empty")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    params = model.parameters()
    state = AdamState.zeros_like(params)
    logs: list[EpochLog] = []
    n = len(train_set)
    for epoch in range(1, cfg.num_epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size), 1):
            batch = [train_set[i] for i in order[start : start + cfg.batch_size]]
            images, labels = _batch_arrays(batch)
            for p in params:
                p.zero_grad()
            loss = cross_entropy_loss(model.forward(images, rng, True), labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {batch_no}")
            loss.backward()
            adam_step(params, [p.grad for p in params], state, cfg)
            loss_sum += value * len(batch)
        log = EpochLog(epoch, cfg.batch_size, loss_sum / n)
        if validation:
            log.val_accuracy = evaluate(model, validation).accuracy
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
    return model, logs
