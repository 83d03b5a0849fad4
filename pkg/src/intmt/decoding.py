"""Beam search with length-normalized scoring.

A hypothesis y_1..y_T (T includes the closing eos) is scored

    score = log P(y | x) / lp(T),   lp(T) = ((5 + T) / 6) ** alpha,

so longer candidates are not penalized linearly in length.  Beams of
equal length rank identically under raw and normalized scores, so
pruning uses the raw sum; completed hypotheses compete on the
normalized score.  beam_size=1 degenerates to greedy decoding.

The step function abstracts the model: it maps a [k, t] batch of
prefixes to [k, vocab] next-token log-probabilities, which keeps this
module independent of how scores are produced (float or integer path)
and lets tests drive it with hand-built tables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class BeamParams:
    beam_size: int = 4
    alpha: float = 0.6
    max_len: int = 32

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigurationError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_len < 1:
            raise ConfigurationError(f"max_len must be >= 1, got {self.max_len}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class DecodeResult:
    ids: list[int]          # generated tokens, eos stripped
    score: float            # normalized log-probability
    truncated: bool         # True when nothing finished within max_len


StepFn = Callable[[np.ndarray], np.ndarray]


def beam_decode(step_fn: StepFn, start_id: int, eos_id: int,
                params: BeamParams) -> DecodeResult:
    """Decode one sentence; `step_fn` sees all live beams stacked."""
    beams = [(0.0, [start_id])]
    finished: list[tuple[float, list[int]]] = []

    for t in range(1, params.max_len + 1):
        prefixes = np.array([ids for _, ids in beams], dtype=np.int64)
        logprobs = step_fn(prefixes)  # [k, vocab]
        vocab = logprobs.shape[1]

        candidates = []
        for i, (total, ids) in enumerate(beams):
            for tok in range(vocab):
                candidates.append((total + float(logprobs[i, tok]), ids, tok))
        candidates.sort(key=lambda c: c[0], reverse=True)

        next_beams = []
        for total, ids, tok in candidates:
            if tok == eos_id:
                finished.append((total / length_penalty(t, params.alpha), ids[1:]))
            else:
                next_beams.append((total, ids + [tok]))
            if len(next_beams) == params.beam_size:
                break
        beams = next_beams
        if not beams:
            break

    if finished:
        # max over normalized scores; ties resolve to the earliest found,
        # which is the shorter hypothesis when raw scores tie too
        best_score, best_ids = max(finished, key=lambda f: f[0])
        return DecodeResult(ids=best_ids, score=best_score, truncated=False)

    # nothing completed: fall back to the best live prefix, flagged
    total, ids = beams[0] if beams else (float("-inf"), [start_id])
    norm = total / length_penalty(params.max_len, params.alpha)
    return DecodeResult(ids=ids[1:], score=norm, truncated=True)


def decode_corpus(model, sentences, params: BeamParams,
                  batch_hook: Callable[[int], None] | None = None):
    """Beam-decode a list of raw source sentences with a Transformer.

    Returns (list of decoded id lists, number of truncated sentences).
    Decoding is sequential and single-threaded: results are bit-stable
    for a given model and parameter set.
    """
    from .data import pad_batch
    from .model import EOS_ID

    results = []
    truncated = 0
    for idx, src in enumerate(sentences):
        src_arr, _ = pad_batch([(src, src)])
        memory, src_mask = None, None

        def step(prefixes: np.ndarray) -> np.ndarray:
            nonlocal memory, src_mask
            k = prefixes.shape[0]
            if memory is None or memory.data.shape[0] != k:
                from . import tensor as T
                with T.no_grad():
                    m, mask = model.encode(np.repeat(src_arr, k, axis=0))
                memory, src_mask = m, mask
            return model.step_logprobs(memory, src_mask, prefixes)

        res = beam_decode(step, EOS_ID, EOS_ID, params)
        results.append(res.ids)
        truncated += res.truncated
        if batch_hook is not None:
            batch_hook(idx)
    return results, truncated
