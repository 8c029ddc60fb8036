"""Synthetic token stream standing in for a pretraining corpus."""

from __future__ import annotations

import numpy as np

ZIPF_EXPONENT = 1.1
# chance that a token repeats the previous one / the one two back
P_COPY_PREV = 0.25
P_COPY_PREV2 = 0.25


def zipf_probs(vocab: int, exponent: float = ZIPF_EXPONENT) -> np.ndarray:
    w = np.arange(1, vocab + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def synthetic_corpus(seed: int, vocab: int, length: int) -> np.ndarray:
    """Zipf-distributed tokens with planted first- and second-order copy structure.

    Each token copies its predecessor with probability 0.25, copies the
    token two back with probability 0.25, and is otherwise a fresh Zipf
    draw. Copies preserve the marginal, so the unigram distribution stays
    exactly Zipf while a bigram (and better, trigram) model gains signal.
    Token id ``r`` has Zipf rank ``r + 1``.
    """
    if vocab < 2:
        raise ValueError("vocab must be at least 2")
    rng = np.random.default_rng(seed)
    fresh = rng.choice(vocab, size=length, p=zipf_probs(vocab))
    u = rng.random(length)
    out = fresh.copy()
    # sequential dependence; a plain loop is fast enough for desk-scale lengths
    for t in range(2, length):
        if u[t] < P_COPY_PREV:
            out[t] = out[t - 1]
        elif u[t] < P_COPY_PREV + P_COPY_PREV2:
            out[t] = out[t - 2]
    return out.astype(np.int64)
