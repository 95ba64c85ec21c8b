"""Task-specific output layers, cross-entropy, and the weighted joint objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import INIT_STD, ConfigError, truncated_normal
from .rng import STREAM_HEAD_INIT, numpy_stream
from .tensor import ShapeError, Tensor, add, getitem, log_softmax, matmul, neg, scale, tensor_mean


@dataclass(frozen=True)
class LabelSpace:
    task_name: str
    labels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) < 2:
            raise ValueError(f"{self.task_name}: a label space needs at least 2 labels")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"{self.task_name}: labels must be unique")

    @property
    def K(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"{label!r} is not a label of {self.task_name}") from None


class TaskHead:
    """A single dense layer mapping the pooled vector to class logits."""

    def __init__(self, W: Tensor, b: Tensor, label_space: LabelSpace):
        if W.ndim != 2 or W.shape[1] != label_space.K or b.shape != (label_space.K,):
            raise ShapeError(f"head shapes W={W.shape}, b={b.shape} do not fit K={label_space.K}")
        self.W = W
        self.b = b
        self.label_space = label_space

    @property
    def name(self) -> str:
        return self.label_space.task_name

    def named(self) -> list[tuple[str, Tensor]]:
        return [(f"head.{self.name}.W", self.W), (f"head.{self.name}.b", self.b)]

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


def init_head(label_space: LabelSpace, d_model: int, seed: int, slot: int = 0) -> TaskHead:
    """Seeded head init; ``slot`` keeps heads of different tasks on separate streams."""
    rng = numpy_stream(seed, STREAM_HEAD_INIT, slot)
    W = Tensor(truncated_normal(rng, (d_model, label_space.K), INIT_STD), requires_grad=True)
    b = Tensor(np.zeros(label_space.K), requires_grad=True)
    return TaskHead(W, b, label_space)


def head_forward(head: TaskHead, pooled: Tensor) -> Tensor:
    if pooled.ndim != 2 or pooled.shape[1] != head.W.shape[0]:
        raise ShapeError(f"pooled {pooled.shape} does not match head input width {head.W.shape[0]}")
    return add(matmul(pooled, head.W), head.b)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Batch mean of ``-log softmax(logits)[target]`` via log-sum-exp."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} disagree")
    K = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        raise ValueError(f"target index out of range [0, {K})")
    picked = getitem(log_softmax(logits), (np.arange(len(targets)), targets))
    return neg(tensor_mean(picked))


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    return lam


def combined_loss(l1: Tensor, l2: Tensor, lam: float) -> Tensor:
    """``lam * l1 + (1 - lam) * l2``; ``l1`` is the primary task loss."""
    lam = check_lambda(lam)
    return add(scale(l1, lam), scale(l2, 1.0 - lam))


def predict(head: TaskHead, pooled: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels (ties go to the lowest index) and softmax probabilities."""
    logits = head_forward(head, pooled).data
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    return np.argmax(logits, axis=1), probs
