"""Multitask transformer text classification on a small numpy autodiff engine."""

from .data import REPORTING_SEEDS, Dataset, Example, load_dataset, split, synth_generate
from .encoder import EncoderConfig, PRESETS
from .estimator import MultitaskTextClassifier
from .metrics import ConfusionMatrix, macro_f1, wilcoxon_signed_rank
from .tokenizer import Vocabulary, build_vocab
from .trainer import TaskSplits, TrainConfig, train_mtl, train_stl

__version__ = "0.1.0"

__all__ = [
    "REPORTING_SEEDS",
    "PRESETS",
    "ConfusionMatrix",
    "Dataset",
    "EncoderConfig",
    "Example",
    "MultitaskTextClassifier",
    "TaskSplits",
    "TrainConfig",
    "Vocabulary",
    "build_vocab",
    "load_dataset",
    "macro_f1",
    "split",
    "synth_generate",
    "train_mtl",
    "train_stl",
    "wilcoxon_signed_rank",
]
