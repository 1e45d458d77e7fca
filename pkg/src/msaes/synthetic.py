"""Synthetic essays whose score is planted at segment level.

Each essay is a run of filler words with ``score`` marker words dropped into
distinct 20-word windows, so the label is a count of windows holding a
marker. Essays are longer than a short document budget, which leaves some
markers beyond the document-scale truncation point: exactly the situation
segment scales are meant to cover.
"""

from __future__ import annotations

import numpy as np

from .corpus import Essay, PromptSpec
from .tokenizer import SPECIAL_TOKENS, Vocabulary

N_WORDS = 200
N_MARKERS = 5
WINDOW = 20


def synthetic_vocab(n_words: int = N_WORDS) -> Vocabulary:
    return Vocabulary(list(SPECIAL_TOKENS) + [f"w{i}" for i in range(n_words)])


def planted_essay(rng: np.random.Generator, score: int, length: int, filler: np.ndarray) -> str:
    words = rng.choice(filler, size=length)
    windows = rng.choice(length // WINDOW, size=score, replace=False)
    for w in windows:
        words[w * WINDOW + rng.integers(WINDOW)] = rng.integers(N_MARKERS)
    return " ".join(f"w{i}" for i in words)


def planted_corpus(n_essays: int, seed: int, prompt_id: int = 1, max_score: int = 4,
                   length: tuple[int, int] = (100, 128), filler: np.ndarray | None = None) -> tuple[list[Essay], PromptSpec]:
    """``n_essays`` essays with scores spread evenly over ``0..max_score``."""
    if length[0] < WINDOW * max_score:
        raise ValueError("essays too short to hold max_score markers in distinct windows")
    rng = np.random.default_rng(seed)
    if filler is None:
        filler = np.arange(N_MARKERS, N_WORDS)
    scores = rng.permutation(np.arange(n_essays) % (max_score + 1))
    essays = []
    for i, s in enumerate(scores):
        n = int(rng.integers(length[0], length[1] + 1))
        essays.append(Essay(f"p{prompt_id}-{i:04d}", prompt_id, planted_essay(rng, int(s), n, filler), float(s)))
    return essays, PromptSpec(prompt_id, 0, max_score, length[1])


def transfer_corpus(n_source: int, n_target: int, seed: int) -> tuple[list[Essay], dict[int, PromptSpec]]:
    """Two prompts sharing the marker rule but drawing filler from
    overlapping, unequal word pools. Prompt 2 is the small target prompt."""
    src, src_spec = planted_corpus(n_source, seed, prompt_id=1, max_score=4,
                                   filler=np.arange(N_MARKERS, 150))
    tgt, tgt_spec = planted_corpus(n_target, seed + 1, prompt_id=2, max_score=4,
                                   filler=np.arange(50, N_WORDS))
    return src + tgt, {1: src_spec, 2: tgt_spec}
