"""Labelled text corpora: loading, label schemas, seeded splits, synthetic pairs."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

from .heads import LabelSpace
from .rng import STREAM_SPLIT, STREAM_SUBSAMPLE, STREAM_SYNTH, STREAM_SYNTH_EXAMPLES, Xoshiro256

logger = logging.getLogger(__name__)

REPORTING_SEEDS = (69556, 79719, 30010, 46921, 25577)


class DataError(ValueError):
    """Malformed or invalid dataset input."""


@dataclass(frozen=True)
class Example:
    id: str
    text: str
    label: str


@dataclass
class Dataset:
    name: str
    label_space: LabelSpace
    examples: list[Example] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for ex in self.examples:
            if ex.label not in self.label_space.labels:
                raise DataError(f"{self.name}: example {ex.id!r} has unknown label {ex.label!r}")
            if ex.id in seen:
                raise DataError(f"{self.name}: duplicate example id {ex.id!r}")
            seen.add(ex.id)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def texts(self) -> list[str]:
        return [ex.text for ex in self.examples]

    @property
    def targets(self) -> list[int]:
        labels = self.label_space.labels
        lookup = {lab: i for i, lab in enumerate(labels)}
        return [lookup[ex.label] for ex in self.examples]

    def subset(self, indices: Iterable[int], name: Optional[str] = None) -> "Dataset":
        return Dataset(name or self.name, self.label_space, [self.examples[i] for i in indices])


def builtin_schemas() -> dict[str, LabelSpace]:
    """Label inventories of the four health-mention corpora and GoEmotions (Ekman + neutral)."""
    return {
        "phm2017": LabelSpace("phm2017", ("non-health", "awareness", "other-mention", "self-mention")),
        "hmc2019": LabelSpace("hmc2019", ("health mention", "other mention", "figurative mention")),
        "self2020": LabelSpace(
            "self2020", ("no self-disclosure", "possible self-disclosure", "clear self-disclosure")
        ),
        "ill2021": LabelSpace("ill2021", ("negative", "positive")),
        "goemotions": LabelSpace(
            "goemotions", ("anger", "disgust", "fear", "joy", "sadness", "surprise", "neutral")
        ),
    }


def get_schema(name: str) -> LabelSpace:
    schemas = builtin_schemas()
    try:
        return schemas[name.lower()]
    except KeyError:
        raise DataError(f"unknown schema {name!r}; choose from {', '.join(schemas)}") from None


# ---------------------------------------------------------------------------
# Line-delimited JSON records: {"id": ..., "text": ..., "label": ...}


def _parse_line(line: str, lineno: int, schema: LabelSpace) -> Example:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"line {lineno}: malformed record ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise DataError(f"line {lineno}: record must be an object")
    extra = set(rec) - {"id", "text", "label"}
    if extra:
        raise DataError(f"line {lineno}: unexpected fields {sorted(extra)}")
    text, label = rec.get("text"), rec.get("label")
    if not isinstance(text, str) or not isinstance(label, str):
        raise DataError(f"line {lineno}: 'text' and 'label' must be strings")
    if not text.strip():
        raise DataError(f"line {lineno}: empty text")
    if label not in schema.labels:
        raise DataError(f"line {lineno}: label {label!r} is not in schema {schema.task_name}")
    ex_id = rec.get("id", str(lineno))
    if not isinstance(ex_id, (str, int)):
        raise DataError(f"line {lineno}: 'id' must be a string")
    return Example(str(ex_id), text, label)


def load_dataset(path: str | Path, schema: LabelSpace, name: Optional[str] = None) -> Dataset:
    """Read one record per line; blank lines are skipped, ids default to line numbers."""
    path = Path(path)
    examples = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            examples.append(_parse_line(line, lineno, schema))
    return Dataset(name or schema.task_name, schema, examples)


def dumps_dataset(ds: Dataset) -> str:
    return "".join(
        json.dumps({"id": ex.id, "text": ex.text, "label": ex.label}, ensure_ascii=False) + "\n"
        for ex in ds.examples
    )


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


def goemotions_splits(
    train: str | Path, val: str | Path, test: str | Path, schema: Optional[LabelSpace] = None
) -> tuple[Dataset, Dataset, Dataset]:
    """Load the official splits as given; nothing is reshuffled."""
    schema = schema or builtin_schemas()["goemotions"]
    out = []
    for part, path in (("train", train), ("val", val), ("test", test)):
        ds = load_dataset(path, schema, name=f"{schema.task_name}-{part}")
        if not len(ds):
            warnings.warn(f"{schema.task_name} {part} split at {path} is empty", stacklevel=2)
        out.append(ds)
    return tuple(out)


# ---------------------------------------------------------------------------
# Splitting


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    train_frac: float = 0.8
    val_frac: float = 0.1

    def __post_init__(self):
        if self.train_frac < 0 or self.val_frac < 0 or self.train_frac + self.val_frac > 1:
            raise DataError("split fractions must be non-negative and sum to at most 1")

    def sizes(self, n: int) -> tuple[int, int, int]:
        # Exact decimal arithmetic: 0.8 * 10 must floor to 8, not 7.
        n_train = int(Fraction(str(self.train_frac)) * n)
        n_val = int(Fraction(str(self.val_frac)) * n)
        return n_train, n_val, n - n_train - n_val


MIN_SPLIT_SIZE = 10


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded Fisher-Yates shuffle, then floor(train), floor(val), remainder."""
    n = len(ds)
    if n < MIN_SPLIT_SIZE:
        raise DataError(f"{ds.name}: need at least {MIN_SPLIT_SIZE} examples to split, got {n}")
    order = Xoshiro256(spec.seed, STREAM_SPLIT).permutation(n)
    n_train, n_val, _ = spec.sizes(n)
    return (
        ds.subset(order[:n_train], f"{ds.name}-train"),
        ds.subset(order[n_train : n_train + n_val], f"{ds.name}-val"),
        ds.subset(order[n_train + n_val :], f"{ds.name}-test"),
    )


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """The first ``n`` examples of a seeded shuffle (whole dataset if smaller)."""
    if n >= len(ds):
        return ds
    order = Xoshiro256(seed, STREAM_SUBSAMPLE).permutation(len(ds))
    return ds.subset(sorted(order[:n]), ds.name)


# ---------------------------------------------------------------------------
# Synthetic correlated task pair

# primary label -> emotion it co-occurs with
CANONICAL_EMOTION = {
    "non-health": "neutral",
    "awareness": "surprise",
    "other-mention": "fear",
    "self-mention": "sadness",
}

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "gl", "pr")
_NUCLEI = ("a", "e", "i", "o", "u", "ai", "ou")
_CODAS = ("", "n", "r", "s", "l", "x")


def _pseudo_words(rng: Xoshiro256, count: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        n_syl = 2 + rng.randbelow(2)
        w = "".join(rng.choice(_ONSETS) + rng.choice(_NUCLEI) for _ in range(n_syl)) + rng.choice(_CODAS)
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass(frozen=True)
class SynthLexicon:
    health: dict[str, list[str]]
    emotion: dict[str, list[str]]
    filler: list[str]


def synth_lexicon(vocab_words: int, seed: int) -> SynthLexicon:
    """Disjoint keyword pools: 40% health words, 40% emotion words, 20% filler."""
    primary = builtin_schemas()["phm2017"].labels
    emotions = builtin_schemas()["goemotions"].labels
    rng = Xoshiro256(seed, STREAM_SYNTH)
    taken: set[str] = set()
    per_health = max(1, (vocab_words * 2 // 5) // len(primary))
    per_emotion = max(1, (vocab_words * 2 // 5) // len(emotions))
    n_filler = max(1, vocab_words - per_health * len(primary) - per_emotion * len(emotions))
    health = {lab: _pseudo_words(rng, per_health, taken) for lab in primary}
    emotion = {lab: _pseudo_words(rng, per_emotion, taken) for lab in emotions}
    filler = _pseudo_words(rng, n_filler, taken)
    return SynthLexicon(health, emotion, filler)


def synth_generate(
    n: int, vocab_words: int = 400, seed: int = 0, correlation: float = 0.9
) -> tuple[Dataset, Dataset]:
    """Paired datasets sharing texts: 4-way health labels and 7-way emotion labels.

    Each text holds one keyword of its health class, one keyword of its emotion
    class, and filler words in shuffled order. The emotion label equals the
    health label's canonical emotion with probability ``correlation``, and is
    uniform over all seven emotions otherwise.
    """
    if n < 20:
        raise DataError(f"synth_generate needs n >= 20, got {n}")
    if not 0.0 <= correlation <= 1.0:
        raise DataError(f"correlation must be in [0, 1], got {correlation}")
    schemas = builtin_schemas()
    primary_space, aux_space = schemas["phm2017"], schemas["goemotions"]
    lex = synth_lexicon(vocab_words, seed)
    # Own stream so that n does not change the lexicon.
    rng = Xoshiro256(seed, STREAM_SYNTH_EXAMPLES)

    prim, aux = [], []
    width = len(str(n - 1))
    for i in range(n):
        p_label = rng.choice(primary_space.labels)
        if rng.random() < correlation:
            a_label = CANONICAL_EMOTION[p_label]
        else:
            a_label = rng.choice(aux_space.labels)
        words = [rng.choice(lex.health[p_label]), rng.choice(lex.emotion[a_label])]
        words += [rng.choice(lex.filler) for _ in range(2 + rng.randbelow(4))]
        rng.shuffle(words)
        text = " ".join(words)
        ex_id = f"s{i:0{width}d}"
        prim.append(Example(ex_id, text, p_label))
        aux.append(Example(ex_id, text, a_label))
    return Dataset("synthetic-primary", primary_space, prim), Dataset("synthetic-auxiliary", aux_space, aux)
