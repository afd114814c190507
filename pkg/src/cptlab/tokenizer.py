"""Word-level tokenizer with per-experience vocabulary expansion.

Special ids are fixed: ``[PAD]=0, [MASK]=1, [UNK]=2, [CLS]=3``.

Tokens added by :func:`expand` take precedence over the base vocabulary:
each whitespace-delimited word is first split on occurrences of added tokens,
tried longest first and, among equal lengths, in insertion order.  Whatever
remains is looked up as a whole word in the base vocabulary (``[UNK]`` if
absent).  Text that contains no added token as a substring therefore
tokenizes exactly as it did before expansion.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DuplicationError, SizeError

SPECIALS = ("[PAD]", "[MASK]", "[UNK]", "[CLS]")
PAD, MASK, UNK, CLS = range(4)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    experience: tuple[int, ...]  # insertion experience per id; -1 for specials, 0 for base
    index: dict[str, int] = field(compare=False, repr=False)
    _cache: dict = field(default_factory=dict, compare=False, repr=False)
    _order: tuple[str, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        added = [t for t, e in zip(self.tokens, self.experience) if e > 0]
        order = sorted(range(len(added)), key=lambda i: (-len(added[i]), i))
        object.__setattr__(self, "_order", tuple(added[i] for i in order))

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], experience: Iterable[int]) -> "Vocab":
        tokens, experience = tuple(tokens), tuple(experience)
        index = {t: i for i, t in enumerate(tokens)}
        if len(index) != len(tokens):
            raise DuplicationError("vocabulary contains duplicate tokens")
        return cls(tokens, experience, index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def insertion_log(self) -> list[tuple[str, int]]:
        return [(t, e) for t, e in zip(self.tokens, self.experience) if e >= 0]

    @property
    def added(self) -> list[str]:
        """Tokens added after the base vocabulary, in insertion order."""
        return [t for t, e in zip(self.tokens, self.experience) if e > 0]

    def precedence(self) -> list[str]:
        """Added tokens in matching order: longer first, then first-in-first-out."""
        return list(self._order)

    def encode_word(self, word: str) -> list[int]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        pieces: list[tuple[str, bool]] = [(word, False)]
        for tok in self._order:
            nxt: list[tuple[str, bool]] = []
            for text, fixed in pieces:
                if fixed or tok not in text:
                    nxt.append((text, fixed))
                    continue
                parts = text.split(tok)
                for j, part in enumerate(parts):
                    if j:
                        nxt.append((tok, True))
                    if part:
                        nxt.append((part, False))
            pieces = nxt
        ids = [self.index[t] if fixed else self.index.get(t, UNK) for t, fixed in pieces]
        self._cache[word] = ids
        return ids

    def save(self, path: str | Path) -> None:
        lines = [f"{t}\t{i}\t{e}" for i, (t, e) in enumerate(zip(self.tokens, self.experience))]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        rows = [ln.split("\t") for ln in Path(path).read_text().splitlines() if ln]
        rows.sort(key=lambda r: int(r[1]))
        if [int(r[1]) for r in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids are not contiguous")
        return cls.from_tokens((r[0] for r in rows), (int(r[2]) for r in rows))


def _count(corpus: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for doc in corpus:
        counts.update(doc.split())
    return counts


def train_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Keep the most frequent words (ties broken lexicographically)."""
    if max_size <= len(SPECIALS):
        raise SizeError(f"max_size must exceed the {len(SPECIALS)} special tokens, got {max_size}")
    counts = _count(corpus)
    if not counts:
        raise SizeError("corpus is empty")
    ranked = sorted((w for w in counts if w not in SPECIALS), key=lambda w: (-counts[w], w))
    words = ranked[: max_size - len(SPECIALS)]
    return Vocab.from_tokens(SPECIALS + tuple(words), (-1,) * len(SPECIALS) + (0,) * len(words))


def select_new_tokens(base: Vocab, domain_corpus: Iterable[str], k: int) -> tuple[list[str], bool]:
    """The ``k`` most frequent domain words missing from ``base``.

    Returns ``(tokens, exhausted)``; ``exhausted`` is true when fewer than
    ``k`` candidates exist.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    counts = _count(domain_corpus)
    candidates = sorted((w for w in counts if w not in base), key=lambda w: (-counts[w], w))
    return candidates[:k], len(candidates) < k


def expand(vocab: Vocab, new_tokens: Iterable[str], experience_index: int) -> Vocab:
    new_tokens = list(new_tokens)
    seen = set(vocab.tokens)
    for tok in new_tokens:
        if tok in seen:
            raise DuplicationError(f"token {tok!r} is already in the vocabulary")
        if not tok or any(ch.isspace() for ch in tok):
            raise ValueError(f"token {tok!r} must be a non-empty word")
        seen.add(tok)
    return Vocab.from_tokens(
        vocab.tokens + tuple(new_tokens),
        vocab.experience + (int(experience_index),) * len(new_tokens),
    )


def tokenize(vocab: Vocab, text: str, max_len: int) -> np.ndarray:
    """``[CLS]`` followed by token ids, truncated and padded to ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    ids = [CLS]
    for word in text.split():
        ids.extend(vocab.encode_word(word))
        if len(ids) >= max_len:
            break
    ids = ids[:max_len]
    out = np.full(max_len, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def tokenize_batch(vocab: Vocab, texts: Iterable[str], max_len: int) -> np.ndarray:
    rows = [tokenize(vocab, t, max_len) for t in texts]
    return np.stack(rows) if rows else np.zeros((0, max_len), dtype=np.int64)


def detokenize(vocab: Vocab, ids: Iterable[int]) -> list[str]:
    return [vocab.tokens[i] for i in ids if i >= len(SPECIALS)]
