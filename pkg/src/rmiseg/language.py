"""Tokenization, vocabulary management, and word-embedding lookup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAX_TOKENS = 20

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1


class Vocabulary:
    """Word-to-id mapping with reserved PAD and UNK entries.

    Ids are dense: PAD = 0, UNK = 1, content words from 2 in first-occurrence
    order. Persisted as a newline-delimited word list where the line number
    is the id.
    """

    def __init__(self, words=()):
        self._words = [PAD_TOKEN, UNK_TOKEN]
        self._ids = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for w in words:
            self._add(w)

    def _add(self, word: str) -> None:
        if word not in self._ids:
            self._ids[word] = len(self._words)
            self._words.append(word)

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    @property
    def words(self) -> list:
        return list(self._words)

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def word_of(self, idx: int) -> str:
        return self._words[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self._words) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            words = [line.rstrip("\n") for line in fh if line.strip()]
        if len(words) < 2 or words[0] != PAD_TOKEN or words[1] != UNK_TOKEN:
            raise ValueError(f"{path}: not a vocabulary file (missing reserved entries)")
        return cls(words[2:])


@dataclass
class TokenSequence:
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= len(self.ids) <= MAX_TOKENS:
            raise ValueError(f"token sequence length {len(self.ids)} outside [1, {MAX_TOKENS}]")
        if PAD_ID in self.ids:
            raise ValueError("PAD inside a token sequence")

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(expression: str) -> list:
    """Lowercase whitespace tokenization; truncates to MAX_TOKENS words."""
    words = expression.lower().split()
    if not words:
        raise ValueError("empty expression")
    return words[:MAX_TOKENS]


def build_vocabulary(corpus) -> Vocabulary:
    """One id per distinct word, ordered by first occurrence over the corpus."""
    vocab = Vocabulary()
    empty = True
    for expression in corpus:
        empty = False
        for word in tokenize(expression):
            vocab._add(word)
    if empty:
        raise ValueError("empty corpus")
    return vocab


def encode(expression: str, vocab: Vocabulary) -> TokenSequence:
    """Map an expression to ids; unknown words become UNK."""
    return TokenSequence([vocab.id_of(w) for w in tokenize(expression)])


def make_embedding_table(vocab_size: int, dim: int, rng: np.random.Generator) -> Tensor:
    """Trainable embedding table of shape (vocab_size, dim)."""
    return Tensor(rng.uniform(-0.1, 0.1, size=(vocab_size, dim)), requires_grad=True)


def embed(seq: TokenSequence, table: Tensor) -> list:
    """Per-token embedding rows; differentiable w.r.t. the table."""
    rows, dim = table.shape
    out = []
    for idx in seq.ids:
        if not 0 <= idx < rows:
            raise IndexError(f"token id {idx} outside table with {rows} rows")
        out.append(T.reshape(T.slice_axis(table, 0, idx, idx + 1), (dim,)))
    return out
