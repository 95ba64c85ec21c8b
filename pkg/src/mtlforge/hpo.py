"""Hyperparameter search with a tree-structured Parzen estimator.

The first ``n_init`` trials are drawn uniformly (learning rate log-uniformly).
After that, completed trials are split at the top quartile of the objective,
each dimension gets a Parzen density for the good and the bad group, and the
best of ``n_candidates`` draws from the good density by ``l(x) / g(x)`` is
proposed.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .encoder import EncoderConfig
from .rng import STREAM_HPO, numpy_stream
from .tensor import NumericError
from .tokenizer import Vocabulary
from .trainer import BATCH_SIZES, LR_RANGE, TaskSplits, TrainConfig, train_mtl, train_stl

logger = logging.getLogger(__name__)

N_INIT = 8
N_CANDIDATES = 24
GAMMA = 0.25
MIN_BANDWIDTH = 0.05
DEFAULT_BUDGET = 25
_TUNED = ("batch_size", "learning_rate", "dropout_p", "lam")


@dataclass(frozen=True)
class SearchSpace:
    batch_sizes: tuple[int, ...] = BATCH_SIZES
    lr_bounds: tuple[float, float] = LR_RANGE
    dropout_bounds: tuple[float, float] = (0.0, 1.0)
    lambda_bounds: tuple[float, float] = (0.0, 1.0)
    include_lambda: bool = False

    @classmethod
    def for_mode(cls, mode: str) -> "SearchSpace":
        return cls(include_lambda=(mode == "mtl"))

    def dims(self) -> list[str]:
        names = ["learning_rate", "dropout_p"]
        if self.include_lambda:
            names.append("lam")
        return names

    def to_unit(self, name: str, value: float) -> float:
        if name == "learning_rate":
            lo, hi = (math.log10(b) for b in self.lr_bounds)
            return (math.log10(value) - lo) / (hi - lo)
        lo, hi = self._bounds(name)
        return (value - lo) / (hi - lo) if hi > lo else 0.0

    def from_unit(self, name: str, u: float) -> float:
        u = min(1.0, max(0.0, u))
        if name == "learning_rate":
            lo, hi = (math.log10(b) for b in self.lr_bounds)
            value = 10.0 ** (lo + u * (hi - lo))
            return min(self.lr_bounds[1], max(self.lr_bounds[0], value))
        lo, hi = self._bounds(name)
        return lo + u * (hi - lo)

    def _bounds(self, name: str) -> tuple[float, float]:
        return {"dropout_p": self.dropout_bounds, "lam": self.lambda_bounds}[name]

    def contains(self, cfg: TrainConfig) -> bool:
        ok = (
            cfg.batch_size in self.batch_sizes
            and self.lr_bounds[0] <= cfg.learning_rate <= self.lr_bounds[1]
            and self.dropout_bounds[0] <= cfg.dropout_p <= self.dropout_bounds[1]
        )
        if self.include_lambda:
            ok = ok and self.lambda_bounds[0] <= cfg.lam <= self.lambda_bounds[1]
        return ok


@dataclass
class TrialRecord:
    trial_id: int
    config: dict
    seed: int
    objective: Optional[float]
    status: str
    wall_time_s: float = 0.0
    error: str = ""

    @property
    def value(self) -> float:
        """Objective for ranking; failed trials rank at minus infinity."""
        if self.status != "done" or self.objective is None:
            return float("-inf")
        return self.objective

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        return cls(**json.loads(line))


def _trial_seed(rng_seed: int, trial_id: int) -> int:
    return rng_seed * 1_000_003 + trial_id


# ---------------------------------------------------------------------------
# Parzen densities on the unit interval


def _bandwidth(points: np.ndarray) -> float:
    if len(points) < 2:
        return max(MIN_BANDWIDTH, 0.25)
    scott = 1.06 * float(np.std(points)) * len(points) ** (-0.2)
    return min(1.0, max(MIN_BANDWIDTH, scott))


def _normal_cdf(x):
    return 0.5 * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def _parzen_logpdf(x: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Mixture of truncated Gaussians on [0, 1] plus one uniform prior component."""
    bw = _bandwidth(points)
    if len(points):
        z = (x[:, None] - points[None, :]) / bw
        mass = _normal_cdf((1.0 - points) / bw) - _normal_cdf((0.0 - points) / bw)
        k = np.exp(-0.5 * z * z) / (bw * math.sqrt(2 * math.pi)) / mass[None, :]
        dens = (k.sum(axis=1) + 1.0) / (len(points) + 1)
    else:
        dens = np.ones_like(x)
    return np.log(dens)


def _sample_parzen(rng: np.random.Generator, points: np.ndarray, n: int) -> np.ndarray:
    bw = _bandwidth(points)
    out = np.empty(n)
    for i in range(n):
        j = rng.integers(len(points) + 1)
        if j == len(points):
            out[i] = rng.random()
            continue
        for _ in range(100):
            v = rng.normal(points[j], bw)
            if 0.0 <= v <= 1.0:
                break
        out[i] = min(1.0, max(0.0, v))
    return out


def _categorical_probs(values: Sequence[int], choices: Sequence[int]) -> np.ndarray:
    counts = np.array([sum(1 for v in values if v == c) for c in choices], dtype=float) + 1.0
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# Sampling


def sample_config(
    space: SearchSpace,
    history: Sequence[TrialRecord],
    rng_seed: int,
    base: Optional[TrainConfig] = None,
    n_init: int = N_INIT,
) -> TrainConfig:
    """Propose the next configuration given the trials so far."""
    base = base or TrainConfig(mode="mtl" if space.include_lambda else "stl")
    rng = numpy_stream(rng_seed, STREAM_HPO, len(history))
    dims = space.dims()

    if len(history) < n_init:
        values = {d: space.from_unit(d, rng.random()) for d in dims}
        bs = int(space.batch_sizes[rng.integers(len(space.batch_sizes))])
        return _make(base, space, bs, values)

    ranked = sorted(history, key=lambda r: (-r.value, r.trial_id))
    n_good = max(1, math.ceil(GAMMA * len(ranked)))
    good = [r for r in ranked[:n_good] if r.status == "done"] or ranked[:1]
    bad = ranked[n_good:]

    def unit(records, d):
        return np.array([space.to_unit(d, r.config[d]) for r in records])

    cands = {d: _sample_parzen(rng, unit(good, d), N_CANDIDATES) for d in dims}
    score = np.zeros(N_CANDIDATES)
    for d in dims:
        score += _parzen_logpdf(cands[d], unit(good, d)) - _parzen_logpdf(cands[d], unit(bad, d))

    choices = list(space.batch_sizes)
    p_good = _categorical_probs([r.config["batch_size"] for r in good], choices)
    p_bad = _categorical_probs([r.config["batch_size"] for r in bad], choices)
    bs_idx = rng.choice(len(choices), size=N_CANDIDATES, p=p_good)
    score += np.log(p_good[bs_idx]) - np.log(p_bad[bs_idx])

    best = int(np.argmax(score))
    values = {d: space.from_unit(d, float(cands[d][best])) for d in dims}
    return _make(base, space, int(choices[bs_idx[best]]), values)


def _make(base: TrainConfig, space: SearchSpace, batch_size: int, values: dict) -> TrainConfig:
    kw = {"batch_size": batch_size, "learning_rate": values["learning_rate"], "dropout_p": values["dropout_p"]}
    if space.include_lambda:
        kw["lam"] = values["lam"]
    return replace(base, **kw)


# ---------------------------------------------------------------------------
# Search loop


def read_ledger(path: str | Path) -> list[TrialRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [TrialRecord.from_json(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def run_search(
    space: SearchSpace,
    budget: int,
    objective: Callable[[TrainConfig], float],
    fixed_seed: int,
    base: Optional[TrainConfig] = None,
    ledger_path: Optional[str | Path] = None,
    workers: int = 1,
) -> tuple[TrainConfig, list[TrialRecord]]:
    """Run ``budget`` trials (resuming from ``ledger_path``) and return the best config.

    Every trial trains with ``fixed_seed``. With ``workers > 1`` trials are
    proposed in blocks of ``workers`` from the ledger state at the start of
    the block, so results do not depend on completion order.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    workers = max(1, int(workers))
    base = replace(base or TrainConfig(mode="mtl" if space.include_lambda else "stl"), seed=fixed_seed)
    records = read_ledger(ledger_path) if ledger_path else []
    if len(records) > budget:
        records = records[:budget]

    def run_one(trial_id: int, cfg: TrainConfig) -> TrialRecord:
        t0 = time.perf_counter()
        try:
            value = float(objective(cfg))
            if not math.isfinite(value):
                raise NumericError(f"objective is {value}")
            rec = TrialRecord(trial_id, _cfg_dict(cfg), fixed_seed, value, "done")
        except NumericError as exc:
            logger.warning("trial %d failed: %s", trial_id, exc)
            rec = TrialRecord(trial_id, _cfg_dict(cfg), fixed_seed, None, "failed", error=str(exc))
        rec.wall_time_s = time.perf_counter() - t0
        return rec

    while len(records) < budget:
        start = len(records)
        block_start = (start // workers) * workers
        history = records[:block_start]
        ids = list(range(start, min(block_start + workers, budget)))
        cfgs = [sample_config(space, history, _trial_seed(fixed_seed, i), base) for i in ids]
        if workers == 1 or len(ids) == 1:
            new = [run_one(i, c) for i, c in zip(ids, cfgs)]
        else:
            with ThreadPoolExecutor(max_workers=len(ids)) as pool:
                new = list(pool.map(run_one, ids, cfgs))
        for rec in new:
            records.append(rec)
            if ledger_path:
                with Path(ledger_path).open("a", encoding="utf-8") as fh:
                    fh.write(rec.to_json() + "\n")

    best = max(records, key=lambda r: (r.value, -r.trial_id))
    tuned = {k: v for k, v in best.config.items() if k in _TUNED}
    return replace(base, **tuned), records



def _cfg_dict(cfg: TrainConfig) -> dict:
    return {"batch_size": cfg.batch_size, "learning_rate": cfg.learning_rate, "dropout_p": cfg.dropout_p, "lam": cfg.lam}


def training_objective(
    primary: TaskSplits,
    auxiliary: Optional[TaskSplits],
    enc_cfg: EncoderConfig,
    vocab: Vocabulary,
) -> Callable[[TrainConfig], float]:
    """Objective that trains one model and returns its best primary validation macro-F1."""

    def objective(cfg: TrainConfig) -> float:
        if cfg.mode == "mtl":
            if auxiliary is None:
                raise ValueError("mode=mtl needs an auxiliary task")
            _, report = train_mtl(primary, auxiliary, cfg, enc_cfg, vocab)
        else:
            _, report = train_stl(primary, cfg, enc_cfg, vocab)
        return report.best_val_macro_f1

    return objective


def running_best(records: Sequence[TrialRecord]) -> list[float]:
    out, best = [], float("-inf")
    for r in records:
        best = max(best, r.value)
        out.append(best)
    return out
