"""Macro-F1, multi-seed aggregation and the Wilcoxon signed-rank test."""

from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

EXACT_MAX_N = 25
SIGNIFICANCE_LEVEL = 0.05


class ConfusionMatrix:
    """K x K counts with gold labels on rows and predictions on columns."""

    def __init__(self, counts, labels: Optional[Sequence[str]] = None):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if (counts < 0).any() or not np.all(np.equal(np.mod(counts, 1), 0)):
            raise ValueError("confusion matrix entries must be non-negative integers")
        self.counts = counts.astype(np.int64)
        self.labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(len(counts)))

    @classmethod
    def from_predictions(cls, gold: Iterable[int], pred: Iterable[int], K: int, labels=None) -> "ConfusionMatrix":
        counts = np.zeros((K, K), dtype=np.int64)
        for g, p in zip(gold, pred):
            counts[g, p] += 1
        return cls(counts, labels)

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list[list[int]]:
        return self.counts.tolist()


def per_class_prf(cm: ConfusionMatrix) -> list[dict]:
    """Precision, recall and F1 per class; undefined ratios count as 0."""
    rows = []
    for k in range(cm.K):
        tp = int(cm.counts[k, k])
        fp = int(cm.counts[:, k].sum()) - tp
        fn = int(cm.counts[k, :].sum()) - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = float(_f1_fraction(cm, k))
        rows.append(
            {"label": cm.labels[k], "precision": precision, "recall": recall, "f1": f1, "support": tp + fn}
        )
    return rows


def _f1_fraction(cm: ConfusionMatrix, k: int) -> Fraction:
    tp = int(cm.counts[k, k])
    wrong = int(cm.counts[:, k].sum()) + int(cm.counts[k, :].sum()) - 2 * tp
    return Fraction(2 * tp, 2 * tp + wrong) if tp else Fraction(0)


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class F1, computed exactly and rounded once."""
    if cm.total <= 0:
        raise ValueError("macro_f1 of an empty confusion matrix")
    return float(sum(_f1_fraction(cm, k) for k in range(cm.K)) / cm.K)


@dataclass(frozen=True)
class SeedRunSet:
    """One system's metric on one dataset, one value per seed."""

    runs: tuple[tuple[int, float], ...]
    name: str = ""

    def __post_init__(self):
        runs = tuple((int(s), float(v)) for s, v in self.runs)
        object.__setattr__(self, "runs", runs)
        seeds = [s for s, _ in runs]
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds in a run set must be unique")

    @property
    def seeds(self) -> list[int]:
        return [s for s, _ in self.runs]

    @property
    def values(self) -> list[float]:
        return [v for _, v in self.runs]

    def by_seed(self) -> dict[int, float]:
        return dict(self.runs)


def aggregate(runs: SeedRunSet | Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single run)."""
    values = runs.values if isinstance(runs, SeedRunSet) else [float(v) for v in runs]
    if not values:
        raise ValueError("aggregate needs at least one run")
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def format_percent(value: float) -> str:
    """A [0, 1] score as a two-decimal percentage, e.g. ``81.82``."""
    return f"{100.0 * value:.2f}"


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass(frozen=True)
class WilcoxonResult:
    W: float
    p_two_sided: float
    n: int
    exact: bool
    degenerate: bool


def midranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = rank
        i = j + 1
    return ranks


def _exact_p(doubled_ranks: list[int], w2: int) -> float:
    """P(min(T+, T-) <= W) over all 2^n equally likely sign assignments.

    Ranks are doubled so midranks become integers; the count of assignments
    reaching each doubled T+ is accumulated rank by rank.
    """
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        for t in range(total, r - 1, -1):
            counts[t] += counts[t - r]
    hits = sum(c for t, c in enumerate(counts) if min(t, total - t) <= w2)
    return hits / 2 ** len(doubled_ranks)


def wilcoxon_signed_rank(pairs: Sequence[tuple[float, float]]) -> WilcoxonResult:
    """Two-sided signed-rank test on paired samples.

    Zero differences are dropped, tied magnitudes get midranks, and
    ``W = min(W+, W-)``. The p-value is exact for up to 25 non-zero
    differences and uses the tie-corrected normal approximation beyond.
    """
    if not pairs:
        raise ValueError("wilcoxon_signed_rank needs at least one pair")
    diffs = [float(a) - float(b) for a, b in pairs]
    diffs = [d for d in diffs if d != 0.0]
    n = len(diffs)
    if n == 0:
        return WilcoxonResult(W=0.0, p_two_sided=1.0, n=0, exact=True, degenerate=True)
    ranks = midranks([abs(d) for d in diffs])
    w_plus = sum(r for r, d in zip(ranks, diffs) if d > 0)
    w_minus = sum(r for r, d in zip(ranks, diffs) if d < 0)
    W = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        p = _exact_p([int(round(2 * r)) for r in ranks], int(round(2 * W)))
        return WilcoxonResult(W=W, p_two_sided=min(1.0, p), n=n, exact=True, degenerate=False)

    mean = n * (n + 1) / 4
    tie_sizes: dict[float, int] = {}
    for r in ranks:
        tie_sizes[r] = tie_sizes.get(r, 0) + 1
    var = n * (n + 1) * (2 * n + 1) / 24 - sum(t**3 - t for t in tie_sizes.values()) / 48
    z = (W - mean) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2))
    return WilcoxonResult(W=W, p_two_sided=min(1.0, p), n=n, exact=False, degenerate=False)


def min_attainable_p(n: int) -> float:
    """Smallest exact two-sided p for ``n`` untied non-zero differences."""
    return min(1.0, 2.0 / 2**n) if n else 1.0


# ---------------------------------------------------------------------------
# STL vs MTL comparison


@dataclass(frozen=True)
class Comparison:
    name: str
    seeds: tuple[int, ...]
    stl_mean: float
    stl_std: float
    mtl_mean: float
    mtl_std: float
    delta: float
    direction: str
    W: float
    p_value: float
    significant: bool
    degenerate: bool
    n_pairs: int
    min_attainable_p: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


def _direction(delta: float) -> str:
    if delta > 0:
        return "↑"
    if delta < 0:
        return "↓"
    return ""


def compare_systems(stl: SeedRunSet, mtl: SeedRunSet, name: str = "") -> Comparison:
    """Pair per-seed scores and test MTL against STL."""
    if sorted(stl.seeds) != sorted(mtl.seeds):
        raise ValueError(f"seed mismatch: STL {sorted(stl.seeds)} vs MTL {sorted(mtl.seeds)}")
    seeds = tuple(sorted(stl.seeds))
    a, b = stl.by_seed(), mtl.by_seed()
    return _compare(name or mtl.name or stl.name, seeds, [(a[s], b[s]) for s in seeds])


def compare_pooled(cells: Sequence[tuple[SeedRunSet, SeedRunSet]], name: str = "pooled") -> Comparison:
    """One test over all seed pairs of several dataset/model cells."""
    pairs, seeds = [], []
    for stl, mtl in cells:
        if sorted(stl.seeds) != sorted(mtl.seeds):
            raise ValueError(f"seed mismatch in cell {stl.name or mtl.name!r}")
        a, b = stl.by_seed(), mtl.by_seed()
        for s in sorted(stl.seeds):
            pairs.append((a[s], b[s]))
            seeds.append(s)
    return _compare(name, tuple(seeds), pairs)


def _compare(name: str, seeds: tuple[int, ...], pairs: list[tuple[float, float]]) -> Comparison:
    stl_mean, stl_std = aggregate([p[0] for p in pairs])
    mtl_mean, mtl_std = aggregate([p[1] for p in pairs])
    # MTL minus STL, so W+ counts MTL wins.
    test = wilcoxon_signed_rank([(m, s) for s, m in pairs])
    delta = mtl_mean - stl_mean
    return Comparison(
        name=name,
        seeds=seeds,
        stl_mean=stl_mean,
        stl_std=stl_std,
        mtl_mean=mtl_mean,
        mtl_std=mtl_std,
        delta=delta,
        direction=_direction(delta),
        W=test.W,
        p_value=test.p_two_sided,
        significant=(not test.degenerate) and test.p_two_sided < SIGNIFICANCE_LEVEL,
        degenerate=test.degenerate,
        n_pairs=len(pairs),
        min_attainable_p=min_attainable_p(len(pairs)),
    )


def format_table(rows: Sequence[Comparison]) -> str:
    """Percent-scaled STL/MTL table with arrows and p-values."""
    header = f"{'System':<24} {'STL':>7} {'MTL':>9} {'Delta':>7} {'p':>8}  notes"
    lines = [header, "-" * len(header)]
    for c in rows:
        mtl = f"{format_percent(c.mtl_mean)} {c.direction}".rstrip()
        notes = []
        if c.degenerate:
            notes.append("degenerate (all differences zero)")
        elif c.significant:
            notes.append("p<0.05")
        if c.min_attainable_p >= SIGNIFICANCE_LEVEL and not c.degenerate:
            notes.append(f"n={c.n_pairs} cannot reach p<0.05 (min p={c.min_attainable_p:.4f})")
        lines.append(
            f"{c.name:<24} {format_percent(c.stl_mean):>7} {mtl:>9} "
            f"{format_percent(c.delta):>7} {c.p_value:>8.4f}  {'; '.join(notes)}"
        )
    return "\n".join(lines)
