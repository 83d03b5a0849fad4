"""Corpus-level BLEU-4 with no smoothing.

Clipped n-gram precisions (n = 1..4) are pooled over the whole corpus,
combined by geometric mean, and multiplied by the brevity penalty
exp(1 - r/c) when the candidate corpus is shorter than the reference.
Any zero precision zeroes the score.  Tokens are whitespace-separated;
the uncased variant casefolds both sides before counting.

One convention choice: an n-gram order with zero total count in the
candidate corpus (every sentence shorter than n) contributes a neutral
1.0 precision instead of poisoning the geometric mean, so an identity
corpus scores 100 regardless of sentence lengths.
"""

from __future__ import annotations

from collections import Counter
from math import exp, log
from typing import Sequence

from .errors import DataError

MAX_ORDER = 4


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: Sequence[str], references: Sequence[str],
                lowercase: bool = False) -> float:
    """BLEU in [0, 100] of candidate sentences against one reference each."""
    if len(candidates) != len(references):
        raise DataError(
            f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise DataError("empty corpus")

    matched = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        if lowercase:
            cand, ref = cand.casefold(), ref.casefold()
        c_toks = cand.split()
        r_toks = ref.split()
        cand_len += len(c_toks)
        ref_len += len(r_toks)
        for n in range(1, MAX_ORDER + 1):
            c_counts = ngrams(c_toks, n)
            r_counts = ngrams(r_toks, n)
            total[n - 1] += max(len(c_toks) - n + 1, 0)
            matched[n - 1] += sum(min(c, r_counts[g]) for g, c in c_counts.items())

    if cand_len == 0:
        return 0.0

    log_precision = 0.0
    for n in range(MAX_ORDER):
        if total[n] == 0:
            continue  # neutral order, see module docstring
        if matched[n] == 0:
            return 0.0
        log_precision += log(matched[n] / total[n]) / MAX_ORDER

    brevity = 1.0 if cand_len > ref_len else exp(1.0 - ref_len / cand_len)
    return 100.0 * brevity * exp(log_precision)
