"""scikit-learn style wrapper around the trainer.

``MultitaskTextClassifier`` fits on lists of strings. Passing ``X_aux`` and
``y_aux`` to ``fit`` switches to multitask training with a shared encoder;
predictions always come from the primary head.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, Example
from .encoder import PRESETS, encode_batch, pool_cls
from .heads import LabelSpace
from .rng import STREAM_SPLIT, Xoshiro256
from .tensor import Tensor
from .tokenizer import build_vocab, encode_texts
from .trainer import TaskSplits, TrainConfig, _Encoded, evaluate, train_mtl, train_stl


def check_texts(X, name: str = "X") -> list[str]:
    """Validate a 1-d collection of non-empty strings."""
    if isinstance(X, str):
        raise TypeError(f"{name} must be a sequence of strings, not a single string")
    arr = np.asarray(X, dtype=object)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not len(arr):
        raise ValueError(f"{name} is empty")
    out = []
    for i, t in enumerate(arr):
        if not isinstance(t, str):
            raise TypeError(f"{name}[{i}] is {type(t).__name__}, expected str")
        if not t.strip():
            raise ValueError(f"{name}[{i}] is blank")
        out.append(t)
    return out


def _labels(y, n: int, name: str) -> tuple[list[str], np.ndarray]:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"{name} must be one-dimensional with {n} entries, got shape {y.shape}")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError(f"{name} needs at least two classes")
    return classes, y


def _dataset(task: str, classes, texts, y, prefix: str) -> Dataset:
    space = LabelSpace(task, tuple(str(c) for c in classes))
    examples = [Example(f"{prefix}{i}", t, str(lab)) for i, (t, lab) in enumerate(zip(texts, y))]
    return Dataset(task, space, examples)


class MultitaskTextClassifier(BaseEstimator, ClassifierMixin):
    """Transformer text classifier with an optional auxiliary task.

    Parameters mirror the training options; ``preset`` picks the encoder
    size and ``max_len``/``vocab_size`` override it. When no validation set
    is given, ``validation_fraction`` of the training data is held out for
    early stopping.
    """

    def __init__(
        self,
        preset: str = "desk",
        max_len: Optional[int] = None,
        vocab_size: Optional[int] = None,
        min_freq: int = 2,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        dropout: float = 0.1,
        lam: float = 0.7,
        max_epochs: int = 50,
        patience: int = 5,
        schedule: str = "proportional",
        validation_fraction: float = 0.1,
        random_state: int = 69556,
    ):
        self.preset = preset
        self.max_len = max_len
        self.vocab_size = vocab_size
        self.min_freq = min_freq
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dropout = dropout
        self.lam = lam
        self.max_epochs = max_epochs
        self.patience = patience
        self.schedule = schedule
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _encoder_config(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        cfg = PRESETS[self.preset]
        if self.max_len is not None:
            cfg = replace(cfg, max_len=self.max_len)
        if self.vocab_size is not None:
            cfg = replace(cfg, vocab_size=self.vocab_size)
        return cfg

    def _holdout(self, ds: Dataset, tag: str) -> tuple[Dataset, Dataset]:
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1) when no validation data is given")
        n_val = max(1, int(round(self.validation_fraction * len(ds))))
        if n_val >= len(ds):
            raise ValueError(f"too few {tag} examples to hold out a validation set")
        order = Xoshiro256(self.random_state, STREAM_SPLIT * 1000 + 1).permutation(len(ds))
        return ds.subset(sorted(order[n_val:])), ds.subset(sorted(order[:n_val]))

    def fit(self, X, y, X_aux=None, y_aux=None, X_val=None, y_val=None):
        texts = check_texts(X)
        self.classes_, y = _labels(y, len(texts), "y")
        primary = _dataset("primary", self.classes_, texts, y, "p")
        if X_val is not None:
            val_texts = check_texts(X_val, "X_val")
            y_val = np.asarray(y_val)
            unknown = set(y_val.tolist()) - set(self.classes_.tolist())
            if len(y_val) != len(val_texts) or unknown:
                raise ValueError("y_val must match X_val in length and use the classes of y")
            train, val = primary, _dataset("primary", self.classes_, val_texts, y_val, "v")
        else:
            train, val = self._holdout(primary, "primary")
        empty = Dataset("primary", train.label_space, [])
        tasks = [TaskSplits(train, val, empty)]

        multitask = X_aux is not None or y_aux is not None
        if multitask:
            aux_texts = check_texts(X_aux, "X_aux")
            self.aux_classes_, y_aux = _labels(y_aux, len(aux_texts), "y_aux")
            aux_train, aux_val = self._holdout(
                _dataset("auxiliary", self.aux_classes_, aux_texts, y_aux, "a"), "auxiliary"
            )
            tasks.append(TaskSplits(aux_train, aux_val, Dataset("auxiliary", aux_train.label_space, [])))

        enc_cfg = self._encoder_config()
        corpus = [t for task in tasks for t in task.train.texts]
        self.vocab_ = build_vocab(corpus, enc_cfg.vocab_size, self.min_freq)
        cfg = TrainConfig(
            mode="mtl" if multitask else "stl",
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            dropout_p=self.dropout,
            lam=self.lam,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.random_state,
            schedule=self.schedule,
        )
        if multitask:
            self.checkpoint_, self.report_ = train_mtl(tasks[0], tasks[1], cfg, enc_cfg, self.vocab_)
        else:
            self.checkpoint_, self.report_ = train_stl(tasks[0], cfg, enc_cfg, self.vocab_)
        self.n_epochs_ = self.report_.epochs_run
        return self

    def _encoded(self, X) -> _Encoded:
        texts = check_texts(X)
        ids, mask = encode_texts(self.vocab_, texts, self.checkpoint_.params.config.max_len)
        return _Encoded(ids, mask, np.zeros(len(texts), dtype=np.int64))

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        _, _, probs = evaluate(self.checkpoint_.params, self.checkpoint_.heads["primary"], self._encoded(X))
        return probs

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        # argmax picks the lowest class index on ties, like the trainer
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X) -> np.ndarray:
        """Pooled [CLS] representations, one row per text."""
        check_is_fitted(self, "checkpoint_")
        data = self._encoded(X)
        rows = []
        for start in range(0, len(data), 256):
            tb, _ = data.batch(np.arange(start, min(start + 256, len(data))))
            pooled: Tensor = pool_cls(encode_batch(self.checkpoint_.params, tb, train_mode=False))
            rows.append(pooled.data)
        return np.concatenate(rows)
