"""Subword vocabulary induction and fixed-length encoding with byte fallback."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
CONTINUATION = "##"
N_BYTES = 256
MIN_VOCAB_SIZE = len(SPECIAL_TOKENS) + N_BYTES
# Words longer than this (in characters) map to a single UNK.
MAX_CHARS_PER_WORD = 100

_BYTE_RE = re.compile(r"^<0x[0-9A-F]{2}>$")


def byte_token(b: int) -> str:
    return f"<0x{b:02X}>"


class Vocabulary:
    """Bijective token/id map with reserved ids 0-3 and 256 byte tokens at 4-259."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with [PAD], [UNK], [CLS], [SEP]")
        expected = [byte_token(b) for b in range(N_BYTES)]
        if tokens[4:MIN_VOCAB_SIZE] != expected:
            raise ValueError("vocabulary ids 4-259 must be the 256 byte tokens")
        index: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if not tok or "\n" in tok:
                raise ValueError(f"invalid token at id {i}: {tok!r}")
            if tok in index:
                raise ValueError(f"duplicate token {tok!r} at ids {index[tok]} and {i}")
            index[tok] = i
        self.id_to_token: list[str] = tokens
        self.token_to_id: dict[str, int] = index
        self._segments: dict[str, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __getitem__(self, token: str) -> int:
        return self.token_to_id[token]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def serialize(self) -> bytes:
        return ("\n".join(self.id_to_token) + "\n").encode("utf-8")

    @classmethod
    def deserialize(cls, blob: bytes) -> "Vocabulary":
        text = blob.decode("utf-8")
        if not text.endswith("\n"):
            raise ValueError("vocabulary file must end with a newline")
        return cls(text[:-1].split("\n"))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.serialize())

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.deserialize(Path(path).read_bytes())

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()


def _learnable(token: str) -> bool:
    return bool(token) and token not in SPECIAL_TOKENS and not _BYTE_RE.match(token)


def build_vocab(corpus: Iterable[str], max_size: int = 4000, min_freq: int = 2) -> Vocabulary:
    """Rank whole words and ``##`` suffix pieces by corpus frequency.

    Ties are broken lexicographically, so the result depends only on the
    multiset of words in ``corpus``.
    """
    if max_size < MIN_VOCAB_SIZE:
        raise ValueError(f"max_size must be at least {MIN_VOCAB_SIZE}, got {max_size}")
    words: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        words.update(text.split())
    if n_docs == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    counts: Counter[str] = Counter()
    for word, c in words.items():
        if len(word) > MAX_CHARS_PER_WORD:
            continue
        counts[word] += c
        for i in range(1, len(word)):
            counts[CONTINUATION + word[i:]] += c

    ranked = sorted(
        (tok for tok, c in counts.items() if c >= min_freq and _learnable(tok)),
        key=lambda tok: (-counts[tok], tok),
    )
    base = list(SPECIAL_TOKENS) + [byte_token(b) for b in range(N_BYTES)]
    return Vocabulary(base + ranked[: max_size - MIN_VOCAB_SIZE])


def segment_word(vocab: Vocabulary, word: str) -> list[int]:
    """Greedy longest-match segmentation of one word with byte fallback."""
    if len(word) > MAX_CHARS_PER_WORD:
        return [UNK]
    ids: list[int] = []
    start = 0
    n = len(word)
    while start < n:
        prefix = CONTINUATION if start > 0 else ""
        match = None
        for end in range(n, start, -1):
            tid = vocab.token_to_id.get(prefix + word[start:end])
            if tid is not None:
                match = (tid, end)
                break
        if match is None:
            # One character through its UTF-8 bytes.
            for b in word[start].encode("utf-8", errors="surrogatepass"):
                ids.append(len(SPECIAL_TOKENS) + b)
            start += 1
        else:
            ids.append(match[0])
            start = match[1]
    return ids


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    """Content token ids for ``text`` without special tokens or truncation."""
    ids: list[int] = []
    cache = vocab._segments
    for word in text.split():
        seg = cache.get(word)
        if seg is None:
            seg = cache[word] = tuple(segment_word(vocab, word))
        ids.extend(seg)
    return ids


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    attention_mask: tuple[int, ...]

    @property
    def n_content(self) -> int:
        return sum(self.attention_mask) - 2


def encode(vocab: Vocabulary, text: str, max_len: int = 64) -> TokenSequence:
    """``[CLS] content... [SEP] [PAD]...`` of exactly ``max_len`` ids."""
    if max_len < 3:
        raise ValueError(f"max_len must be at least 3, got {max_len}")
    content = tokenize(vocab, text)[: max_len - 2]
    ids = [CLS, *content, SEP]
    mask = [1] * len(ids)
    pad = max_len - len(ids)
    return TokenSequence(tuple(ids + [PAD] * pad), tuple(mask + [0] * pad))


def encode_texts(vocab: Vocabulary, texts: Iterable[str], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Encode many texts into ``(ids, mask)`` int arrays of shape ``[n, max_len]``."""
    seqs = [encode(vocab, t, max_len) for t in texts]
    if not seqs:
        empty = np.zeros((0, max_len), dtype=np.int64)
        return empty, empty.copy()
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.array([s.attention_mask for s in seqs], dtype=np.int64)
    return ids, mask
