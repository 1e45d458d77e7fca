"""WordPiece tokenization and encoder-input construction.

Builds the two kinds of encoder input used by the model: the fixed-length
document sequence (``[CLS]`` + first ``L`` tokens + ``[SEP]``, padded before
``[SEP]`` when short) and, for each segment scale ``k``, the ``ceil(n_p / k)``
segments of the essay fitted to its prompt budget ``n_p``.
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)
CONTINUATION = "##"
MAX_WORD_CHARS = 100
DOC_MAX_TOKENS = 510


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        missing = [t for t in SPECIAL_TOKENS if t not in self.index]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.cls_id = self.index[CLS]
        self.sep_id = self.index[SEP]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")


@dataclass
class TokenSequence:
    ids: np.ndarray
    attention_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class SegmentBatch:
    scale_k: int
    segments: list[TokenSequence] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.segments)


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def basic_tokenize(text: str) -> list[str]:
    """Lowercase, strip accents, and split on whitespace and punctuation."""
    text = unicodedata.normalize("NFD", text.lower())
    words: list[str] = []
    current: list[str] = []
    for ch in text:
        cat = unicodedata.category(ch)
        if cat == "Mn":
            continue
        if ch.isspace() or (cat.startswith("C") and ch not in "\t\n\r"):
            if current:
                words.append("".join(current))
                current = []
        elif _is_punctuation(ch):
            if current:
                words.append("".join(current))
                current = []
            words.append(ch)
        else:
            current.append(ch)
    if current:
        words.append("".join(current))
    return words


def wordpiece_word(word: str, vocab: Vocabulary) -> list[str]:
    """Greedy longest-match-first split of one word; ``[UNK]`` if any part fails."""
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            candidate = word[start:end]
            if start > 0:
                candidate = CONTINUATION + candidate
            if candidate in vocab:
                piece = candidate
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def wordpiece_pieces(text: str, vocab: Vocabulary) -> list[str]:
    return [p for word in basic_tokenize(text) for p in wordpiece_word(word, vocab)]


def wordpiece_tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(p) for p in wordpiece_pieces(text, vocab)]


def train_vocab(texts: Iterable[str], size: int = 4000) -> Vocabulary:
    """Fit a small WordPiece vocabulary to a corpus.

    Every character seen (as word-initial and ``##`` continuation piece) is
    included so no in-alphabet word becomes ``[UNK]``. The remaining budget
    goes mostly to whole words by frequency, with a quarter reserved for
    frequent word prefixes and ``##`` suffixes.
    """
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(basic_tokenize(text))
    chars = sorted({c for w in counts for c in w})
    tokens = list(SPECIAL_TOKENS) + chars + [CONTINUATION + c for c in chars]
    seen = set(tokens)
    budget = max(0, size - len(tokens))
    words = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])) if w not in seen]
    if len(words) <= budget:
        chosen = words
    else:
        n_words = budget - budget // 4
        chosen = words[:n_words]
        affixes: Counter[str] = Counter()
        for w in words[n_words:]:
            for n in range(2, min(len(w), 7)):
                affixes[w[:n]] += counts[w]
                affixes[CONTINUATION + w[-n:]] += counts[w]
        seen.update(chosen)
        ranked = [a for a, _ in sorted(affixes.items(), key=lambda kv: (-kv[1] * len(kv[0]), kv[0]))
                  if a not in seen]
        chosen += ranked[: budget - len(chosen)]
    return Vocabulary(tokens + chosen)


def _mask_for(ids: np.ndarray, pad_id: int) -> np.ndarray:
    return (ids != pad_id).astype(np.int8)


def build_doc_sequence(t1: Sequence[int], vocab: Vocabulary, L: int = DOC_MAX_TOKENS) -> TokenSequence:
    """Document-scale input of length ``L + 2``; padding sits before ``[SEP]``."""
    if L < 1:
        raise ValueError("L must be at least 1")
    body = list(t1[:L]) + [vocab.pad_id] * max(0, L - len(t1))
    ids = np.array([vocab.cls_id] + body + [vocab.sep_id], dtype=np.int64)
    return TokenSequence(ids, _mask_for(ids, vocab.pad_id))


def fit_to_np(t1: Sequence[int], n_p: int, pad_id: int) -> list[int]:
    if n_p < 1:
        raise ValueError("n_p must be at least 1")
    return list(t1[:n_p]) + [pad_id] * max(0, n_p - len(t1))


def segment_count(n_p: int, k: int) -> int:
    return math.ceil(n_p / k)


def build_segments(t1: Sequence[int], n_p: int, k: int, vocab: Vocabulary) -> SegmentBatch:
    """Split the ``n_p``-fitted sequence into chunks of ``k`` tokens (the last
    may be shorter), each wrapped as ``[CLS] chunk [SEP]``."""
    if not 1 <= k <= n_p:
        raise ValueError(f"segment scale {k} outside 1..{n_p}")
    fitted = fit_to_np(t1, n_p, vocab.pad_id)
    batch = SegmentBatch(k)
    for start in range(0, n_p, k):
        ids = np.array([vocab.cls_id] + fitted[start:start + k] + [vocab.sep_id], dtype=np.int64)
        batch.segments.append(TokenSequence(ids, _mask_for(ids, vocab.pad_id)))
    return batch


def segment_contents(batch: SegmentBatch) -> list[int]:
    """Concatenated chunk contents with the ``[CLS]``/``[SEP]`` framing removed."""
    return [int(i) for seg in batch.segments for i in seg.ids[1:-1]]
