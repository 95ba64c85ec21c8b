"""Single-task and hard-parameter-sharing multitask training loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .encoder import (
    ConfigError,
    EncoderConfig,
    EncoderParams,
    TokenBatch,
    encode_batch,
    init_params,
    pool_cls,
)
from .heads import TaskHead, check_lambda, combined_loss, cross_entropy, head_forward, init_head
from .metrics import ConfusionMatrix, macro_f1, per_class_prf
from .rng import STREAM_BATCHES, STREAM_DROPOUT, STREAM_SCHEDULE, Xoshiro256, numpy_stream
from .tensor import NumericError, Tape, Tensor, backward, dropout, scale
from .tokenizer import Vocabulary, encode_texts

logger = logging.getLogger(__name__)

BATCH_SIZES = (32, 64, 128)
LR_RANGE = (1e-6, 1e-3)
MODES = ("stl", "mtl")
SCHEDULES = ("proportional", "primary_only", "joint")


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "stl"
    batch_size: int = 32
    learning_rate: float = 1e-3
    dropout_p: float = 0.1
    lam: float = 0.7
    max_epochs: int = 50
    patience: int = 5
    seed: int = 69556
    schedule: str = "proportional"
    aux_cap: float = 3.0
    grad_clip: float = 1.0
    eval_train: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size not in BATCH_SIZES:
            raise ConfigError(f"batch_size must be one of {BATCH_SIZES}, got {self.batch_size}")
        if not LR_RANGE[0] <= self.learning_rate <= LR_RANGE[1]:
            raise ConfigError(f"learning_rate must lie in [1e-6, 1e-3], got {self.learning_rate}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1], got {self.dropout_p}")
        check_lambda(self.lam)
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("max_epochs must be >= 1 and patience >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.aux_cap <= 0 or self.grad_clip <= 0:
            raise ConfigError("aux_cap and grad_clip must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TaskSplits:
    train: Dataset
    val: Dataset
    test: Dataset

    @property
    def name(self) -> str:
        return self.train.label_space.task_name


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # Heads are stepped only on their own task's batches, so bias correction
    # uses a per-tensor step count.
    steps: dict[str, int] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of ``params[name]`` for every name in ``grads``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        k = state.steps.get(name, 0) + 1
        state.steps[name] = k
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**k)
        v_hat = v / (1 - b2**k)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for k in grads:
            grads[k] = grads[k] * factor
    return total


# ---------------------------------------------------------------------------
# Reports


@dataclass
class RunReport:
    config: dict
    encoder_config: dict
    tasks: list[dict]
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_macro_f1: float = float("-inf")
    test_macro_f1: dict[str, float] = field(default_factory=dict)
    test_per_class: dict[str, list[dict]] = field(default_factory=dict)
    decisions: dict[str, str] = field(default_factory=dict)
    vocab_hash: str = ""
    name: str = ""
    wall_time_s: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.epochs)

    @property
    def primary_test_macro_f1(self) -> float:
        return self.test_macro_f1[self.tasks[0]["name"]]

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        d["epochs_run"] = self.epochs_run
        if not include_timing:
            d.pop("wall_time_s")
        return d

    def to_json(self) -> str:
        # Wall time is kept out so reruns serialise byte-identically.
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        timing = path.with_name(path.stem + ".timing.json")
        timing.write_text(json.dumps({"wall_time_s": self.wall_time_s}) + "\n", encoding="utf-8")


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


DECISIONS = {
    "loss_reduction": "cross-entropy averaged over the batch",
    "pooling": "raw final-layer [CLS] vector, no tanh pooler",
    "preprocessing": "whitespace splitting only; no deduplication",
    "optimizer": "Adam (0.9, 0.999, 1e-8), constant learning rate",
    "grad_clip": "global L2 norm clipped to grad_clip",
    "model_selection": "best primary-task validation macro-F1",
}

SCHEDULE_NOTES = {
    "proportional": "alternating single-task batches; per epoch one full primary pass plus "
    "min(aux batches, aux_cap * primary batches) auxiliary batches in seeded shuffled order; "
    "primary batches weighted by lambda, auxiliary by 1 - lambda",
    "primary_only": "primary batches only (auxiliary head never stepped)",
    "joint": "every step one primary and one auxiliary batch, single backward on "
    "lambda * l1 + (1 - lambda) * l2",
}


# ---------------------------------------------------------------------------
# Training


@dataclass
class _Encoded:
    ids: np.ndarray
    mask: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def batch(self, idx) -> tuple[TokenBatch, np.ndarray]:
        return TokenBatch(self.ids[idx], self.mask[idx]), self.y[idx]


def _encode(ds: Dataset, vocab: Vocabulary, max_len: int) -> _Encoded:
    ids, mask = encode_texts(vocab, ds.texts, max_len)
    return _Encoded(ids, mask, np.asarray(ds.targets, dtype=np.int64))


class _BatchStream:
    """Seeded epoch-wise shuffles chopped into batches; the last batch may be short."""

    def __init__(self, n: int, batch_size: int, seed: int, slot: int):
        self.n = n
        self.batch_size = batch_size
        self.rng = Xoshiro256(seed, STREAM_BATCHES * 1000 + slot)
        self._queue: list[np.ndarray] = []

    def epoch(self) -> list[np.ndarray]:
        order = np.asarray(self.rng.permutation(self.n), dtype=np.int64)
        return [order[i : i + self.batch_size] for i in range(0, self.n, self.batch_size)]

    def next(self) -> np.ndarray:
        if not self._queue:
            self._queue = self.epoch()
        return self._queue.pop(0)


def evaluate(
    params: EncoderParams, head: TaskHead, data: _Encoded, batch_size: int = 256
) -> tuple[float, np.ndarray, np.ndarray]:
    """Eval-mode mean loss, predicted indices and probabilities."""
    losses, preds, probs = [], [], []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        tb, y = data.batch(idx)
        logits = head_forward(head, pool_cls(encode_batch(params, tb, train_mode=False)))
        losses.append(cross_entropy(logits, y).item() * len(idx))
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        pr = np.exp(z)
        pr /= pr.sum(axis=1, keepdims=True)
        preds.append(np.argmax(logits.data, axis=1))
        probs.append(pr)
    if not losses:
        return float("nan"), np.zeros(0, dtype=np.int64), np.zeros((0, head.label_space.K))
    return sum(losses) / len(data), np.concatenate(preds), np.concatenate(probs)


def score(params: EncoderParams, head: TaskHead, data: _Encoded) -> tuple[float, float, ConfusionMatrix]:
    loss, pred, _ = evaluate(params, head, data)
    cm = ConfusionMatrix.from_predictions(data.y, pred, head.label_space.K, head.label_space.labels)
    return loss, macro_f1(cm), cm


def _snapshot(params: EncoderParams, heads: Sequence[TaskHead]) -> list[np.ndarray]:
    return [t.data.copy() for t in _all_tensors(params, heads)]


def _restore(params: EncoderParams, heads: Sequence[TaskHead], snap: list[np.ndarray]) -> None:
    for t, arr in zip(_all_tensors(params, heads), snap):
        t.data = arr.copy()


def _all_tensors(params: EncoderParams, heads: Sequence[TaskHead]) -> list[Tensor]:
    return params.parameters() + [t for h in heads for t in h.parameters()]


def _train(
    tasks: Sequence[TaskSplits],
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    vocab: Vocabulary,
) -> tuple[Checkpoint, RunReport]:
    t0 = time.perf_counter()
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ConfigError(f"task names must be distinct, got {names}")
    for t in tasks:
        if not len(t.train) or not len(t.val):
            raise ValueError(f"task {t.name}: train and validation splits must be non-empty")
    enc_cfg = replace(enc_cfg, dropout_p=cfg.dropout_p, vocab_size=len(vocab))
    mtl = len(tasks) > 1
    schedule = cfg.schedule if mtl else "primary_only"

    params = init_params(enc_cfg, cfg.seed)
    heads = [init_head(t.train.label_space, enc_cfg.d_model, cfg.seed, slot=i) for i, t in enumerate(tasks)]
    enc = [
        {part: _encode(getattr(t, part), vocab, enc_cfg.max_len) for part in ("train", "val", "test")}
        for t in tasks
    ]
    streams = [_BatchStream(len(e["train"]), cfg.batch_size, cfg.seed, slot=i) for i, e in enumerate(enc)]
    sched_rng = Xoshiro256(cfg.seed, STREAM_SCHEDULE)
    drop_rng = numpy_stream(cfg.seed, STREAM_DROPOUT)
    adam = AdamState()
    enc_named = {f"encoder.{n}": t for n, t in params.named()}
    weights = [cfg.lam, 1.0 - cfg.lam] if mtl else [1.0]

    report = RunReport(
        config=cfg.to_dict(),
        encoder_config=enc_cfg.to_dict(),
        tasks=[
            {"name": t.name, "labels": list(t.train.label_space.labels),
             "sizes": [len(t.train), len(t.val), len(t.test)]}
            for t in tasks
        ],
        decisions={**DECISIONS, "schedule": SCHEDULE_NOTES[schedule]},
        vocab_hash=vocab.sha256,
    )

    def task_loss(slot: int, idx: np.ndarray) -> Tensor:
        tb, y = enc[slot]["train"].batch(idx)
        hidden = encode_batch(params, tb, train_mode=True, rng=drop_rng)
        pooled = dropout(pool_cls(hidden), cfg.dropout_p, drop_rng, True)
        return cross_entropy(head_forward(heads[slot], pooled), y)

    def step(loss: Tensor, tape: Tape, slots: Sequence[int]) -> None:
        if not np.isfinite(loss.data).all():
            raise DivergenceError(f"non-finite training loss at epoch {epoch}")
        backward(loss, tape)
        named = dict(enc_named)
        for s in slots:
            named.update(heads[s].named())
        grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in named.items()}
        clip_grad_norm(grads, cfg.grad_clip)
        adam_step(named, grads, adam, cfg.learning_rate)
        for t in named.values():
            t.grad = None

    best_f1, best_snap, since_best = float("-inf"), None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        primary_batches = streams[0].epoch()
        sums = [0.0] * len(tasks)
        counts = [0] * len(tasks)
        if schedule == "joint":
            for idx in primary_batches:
                aux_idx = streams[1].next()
                with Tape() as tape:
                    l1 = task_loss(0, idx)
                    l2 = task_loss(1, aux_idx)
                    loss = combined_loss(l1, l2, cfg.lam)
                step(loss, tape, (0, 1))
                for s, l in ((0, l1), (1, l2)):
                    sums[s] += l.item()
                    counts[s] += 1
        else:
            plan = [0] * len(primary_batches)
            if schedule == "proportional":
                n_aux = math.ceil(len(enc[1]["train"]) / cfg.batch_size)
                plan += [1] * min(n_aux, int(cfg.aux_cap * len(primary_batches)))
                sched_rng.shuffle(plan)
            it = iter(primary_batches)
            for slot in plan:
                idx = next(it) if slot == 0 else streams[slot].next()
                with Tape() as tape:
                    raw = task_loss(slot, idx)
                    loss = scale(raw, weights[slot])
                step(loss, tape, (slot,))
                sums[slot] += raw.item()
                counts[slot] += 1

        record: dict = {"epoch": epoch, "train_loss": {}, "val_loss": {}, "val_macro_f1": {}}
        for s, t in enumerate(tasks):
            if counts[s]:
                record["train_loss"][t.name] = sums[s] / counts[s]
            v_loss, v_f1, _ = score(params, heads[s], enc[s]["val"])
            record["val_loss"][t.name] = v_loss
            record["val_macro_f1"][t.name] = v_f1
            if cfg.eval_train:
                record.setdefault("train_macro_f1", {})[t.name] = score(params, heads[s], enc[s]["train"])[1]
        report.epochs.append(record)
        primary_f1 = record["val_macro_f1"][tasks[0].name]
        logger.info("epoch %d: primary val macro-F1 %.4f", epoch, primary_f1)
        if primary_f1 > best_f1:
            best_f1, best_snap, since_best = primary_f1, _snapshot(params, heads), 0
            report.best_epoch = epoch
        else:
            since_best += 1
        if since_best >= cfg.patience:
            break

    _restore(params, heads, best_snap)
    report.best_val_macro_f1 = best_f1
    for s, t in enumerate(tasks):
        if len(enc[s]["test"]):
            _, f1, cm = score(params, heads[s], enc[s]["test"])
            report.test_macro_f1[t.name] = f1
            report.test_per_class[t.name] = per_class_prf(cm)
    report.wall_time_s = time.perf_counter() - t0

    ckpt = Checkpoint(
        params,
        {h.name: h for h in heads},
        vocab,
        {"primary_task": tasks[0].name, "seed": str(cfg.seed), "mode": cfg.mode},
    )
    return ckpt, report


def train_stl(task: TaskSplits, cfg: TrainConfig, enc_cfg: EncoderConfig, vocab: Vocabulary):
    """Encoder plus one head on a single task."""
    if cfg.mode != "stl":
        raise ConfigError("train_stl needs mode='stl'")
    return _train([task], cfg, enc_cfg, vocab)


def train_mtl(
    primary: TaskSplits, auxiliary: TaskSplits, cfg: TrainConfig, enc_cfg: EncoderConfig, vocab: Vocabulary
):
    """One shared encoder, a primary and an auxiliary head, weighted by ``cfg.lam``."""
    if cfg.mode != "mtl":
        raise ConfigError("train_mtl needs mode='mtl'")
    return _train([primary, auxiliary], cfg, enc_cfg, vocab)
