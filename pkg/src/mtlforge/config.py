"""Experiment configuration files (INI sections of key = value) and run orchestration."""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .checkpoint import Checkpoint, save_checkpoint
from .data import SplitSpec, get_schema, load_dataset, save_dataset, split, subsample
from .encoder import ConfigError, EncoderConfig
from .tokenizer import Vocabulary, build_vocab
from .trainer import RunReport, TaskSplits, TrainConfig, train_mtl, train_stl

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataConfig:
    primary: str = ""
    primary_schema: str = "phm2017"
    auxiliary: str = ""
    auxiliary_schema: str = "goemotions"
    # Official auxiliary validation/test files; when both are set the
    # auxiliary file is used as the train split without reshuffling.
    auxiliary_val: str = ""
    auxiliary_test: str = ""
    primary_train_limit: int = 0
    vocab: str = ""
    min_freq: int = 2
    name: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split_train_frac: float = 0.8
    split_val_frac: float = 0.1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"

    @property
    def name(self) -> str:
        return self.data.name or self.data.primary_schema


_TRAIN_KEYS = {"lambda": "lam"}


def _coerce(value: str, like):
    if isinstance(like, bool):
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value.strip()


def _section(parser, name: str, cls, rename: Optional[dict] = None, base=None) -> dict:
    rename = rename or {}
    defaults = base or cls()
    known = {f.name for f in fields(cls)}
    out = {}
    if not parser.has_section(name):
        return out
    for key, raw in parser.items(name):
        attr = rename.get(key, key)
        if attr not in known:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        try:
            out[attr] = _coerce(raw, getattr(defaults, attr))
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from None
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a config file; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path, encoding="utf-8")
    allowed = {"data", "split", "encoder", "train", "output"}
    unknown = set(parser.sections()) - allowed
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    data_kw = _section(parser, "data", DataConfig)
    for key in ("primary", "auxiliary", "auxiliary_val", "auxiliary_test", "vocab"):
        if data_kw.get(key):
            data_kw[key] = str((path.parent / data_kw[key]).resolve())

    split_kw = {}
    if parser.has_section("split"):
        for key, raw in parser.items("split"):
            if key not in ("train_frac", "val_frac"):
                raise ConfigError(f"unknown key {key!r} in section [split]")
            split_kw[f"split_{key}"] = float(raw)

    enc_kw = _section(parser, "encoder", EncoderConfig)
    train_kw = _section(parser, "train", TrainConfig, _TRAIN_KEYS)
    out_dir = "runs/default"
    if parser.has_section("output"):
        for key, raw in parser.items("output"):
            if key != "dir":
                raise ConfigError(f"unknown key {key!r} in section [output]")
            out_dir = str((path.parent / raw.strip()).resolve())
    return ExperimentConfig(
        data=DataConfig(**data_kw),
        encoder=EncoderConfig(**enc_kw),
        train=TrainConfig(**train_kw),
        output_dir=out_dir,
        **split_kw,
    )


def dump_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["data"] = {f.name: str(getattr(cfg.data, f.name)) for f in fields(DataConfig)}
    parser["split"] = {"train_frac": repr(cfg.split_train_frac), "val_frac": repr(cfg.split_val_frac)}
    parser["encoder"] = {k: repr(v) for k, v in cfg.encoder.to_dict().items()}
    inv = {v: k for k, v in _TRAIN_KEYS.items()}
    parser["train"] = {inv.get(k, k): (repr(v) if not isinstance(v, str) else v) for k, v in cfg.train.to_dict().items()}
    parser["output"] = {"dir": cfg.output_dir}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def with_overrides(cfg: ExperimentConfig, **train_overrides) -> ExperimentConfig:
    train_overrides = {k: v for k, v in train_overrides.items() if v is not None}
    out_dir = train_overrides.pop("output_dir", None)
    limit = train_overrides.pop("primary_train_limit", None)
    new = replace(cfg, train=replace(cfg.train, **train_overrides))
    if out_dir:
        new = replace(new, output_dir=out_dir)
    if limit is not None:
        new = replace(new, data=replace(new.data, primary_train_limit=limit))
    return new


# ---------------------------------------------------------------------------
# Running one configured experiment


@dataclass
class PreparedData:
    primary: TaskSplits
    auxiliary: Optional[TaskSplits]
    vocab: Vocabulary


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    d = cfg.data
    if not d.primary:
        raise ConfigError("[data] primary is required")
    seed = cfg.train.seed
    spec = SplitSpec(seed=seed, train_frac=cfg.split_train_frac, val_frac=cfg.split_val_frac)
    p_train, p_val, p_test = split(load_dataset(d.primary, get_schema(d.primary_schema)), spec)
    if d.primary_train_limit:
        p_train = subsample(p_train, d.primary_train_limit, seed)
    primary = TaskSplits(p_train, p_val, p_test)

    auxiliary = None
    if d.auxiliary:
        schema = get_schema(d.auxiliary_schema)
        if d.auxiliary_val and d.auxiliary_test:
            parts = [load_dataset(p, schema, f"{schema.task_name}-{n}")
                     for n, p in (("train", d.auxiliary), ("val", d.auxiliary_val), ("test", d.auxiliary_test))]
        else:
            parts = split(load_dataset(d.auxiliary, schema), spec)
        auxiliary = TaskSplits(*parts)

    if d.vocab:
        vocab = Vocabulary.load(d.vocab)
    else:
        corpus = primary.train.texts + (auxiliary.train.texts if auxiliary else [])
        vocab = build_vocab(corpus, cfg.encoder.vocab_size, d.min_freq)
    return PreparedData(primary, auxiliary, vocab)


def run_experiment(cfg: ExperimentConfig, data: Optional[PreparedData] = None) -> tuple[Checkpoint, RunReport, Path]:
    """Train per ``cfg`` and write checkpoint, report, splits and resolved config."""
    data = data or prepare_data(cfg)
    if cfg.train.mode == "mtl":
        if data.auxiliary is None:
            raise ConfigError("mode=mtl needs an [data] auxiliary dataset")
        ckpt, report = train_mtl(data.primary, data.auxiliary, cfg.train, cfg.encoder, data.vocab)
    else:
        ckpt, report = train_stl(data.primary, cfg.train, cfg.encoder, data.vocab)
    report.name = cfg.name

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "checkpoint")
    report.save(out / "report.json")
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    splits_dir = out / "splits"
    splits_dir.mkdir(exist_ok=True)
    tasks = [("primary", data.primary)] + ([("auxiliary", data.auxiliary)] if data.auxiliary else [])
    for role, t in tasks:
        for part in ("train", "val", "test"):
            save_dataset(getattr(t, part), splits_dir / f"{role}_{part}.jsonl")
    return ckpt, report, out
