"""Synthetic translation corpora and batching.

Token ids are rendered as decimal strings, one sentence per line, so
corpus files double as plain-text input to the BLEU scorer.  Ids 0 and
1 are reserved (pad and end-of-sequence); real tokens start at 2 and
never appear in files as 0/1.

Three deterministic tasks, in increasing order of difficulty for an
attention model: copy, reverse, and substitute (a fixed random bijection
over the vocabulary applied tokenwise to the reversed source).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import EOS_ID, FIRST_TOKEN_ID, PAD_ID
from .seeding import substream

TASK_KINDS = ("copy", "reverse", "substitute")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "reverse"
    vocab_size: int = 64
    min_len: int = 3
    max_len: int = 10

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DataError(f"unknown task {self.kind!r}, expected one of {TASK_KINDS}")
        if self.vocab_size < FIRST_TOKEN_ID + 2:
            raise DataError(f"vocab_size {self.vocab_size} leaves no room for real tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError(f"bad length range [{self.min_len}, {self.max_len}]")


def substitution_map(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Fixed bijection over real token ids; reserved ids map to themselves."""
    table = np.arange(spec.vocab_size)
    real = np.arange(FIRST_TOKEN_ID, spec.vocab_size)
    table[FIRST_TOKEN_ID:] = rng.permutation(real)
    return table


def make_pairs(spec: TaskSpec, n: int, seed: int) -> list[tuple[list[int], list[int]]]:
    """Generate n (source, target) sentences of real token ids (no eos/pad)."""
    if n < 1:
        raise DataError(f"corpus size must be >= 1, got {n}")
    rng = substream(seed, "data")
    subst = substitution_map(spec, rng)
    pairs = []
    for _ in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = rng.integers(FIRST_TOKEN_ID, spec.vocab_size, size=length)
        if spec.kind == "copy":
            tgt = src.copy()
        elif spec.kind == "reverse":
            tgt = src[::-1].copy()
        else:
            tgt = subst[src[::-1]]
        pairs.append((src.tolist(), tgt.tolist()))
    return pairs


def split_pairs(pairs, train_frac: float, valid_frac: float):
    """Deterministic contiguous split into train/valid/test."""
    if train_frac <= 0 or valid_frac <= 0 or train_frac + valid_frac >= 1.0:
        raise DataError(f"bad split fractions {train_frac}/{valid_frac}")
    n = len(pairs)
    n_train = int(n * train_frac)
    n_valid = int(n * valid_frac)
    if n_train == 0 or n_valid == 0 or n_train + n_valid >= n:
        raise DataError(f"corpus of {n} sentences too small for the requested split")
    return {"train": pairs[:n_train],
            "valid": pairs[n_train:n_train + n_valid],
            "test": pairs[n_train + n_valid:]}


# -- corpus files -----------------------------------------------------------


def sentence_to_text(ids) -> str:
    return " ".join(str(int(t)) for t in ids)


def write_corpus(prefix: str, pairs) -> tuple[str, str]:
    """Write prefix.src and prefix.tgt, one sentence per line."""
    if not pairs:
        raise DataError("refusing to write an empty corpus")
    src_path, tgt_path = prefix + ".src", prefix + ".tgt"
    os.makedirs(os.path.dirname(os.path.abspath(src_path)), exist_ok=True)
    with open(src_path, "w") as fs, open(tgt_path, "w") as ft:
        for src, tgt in pairs:
            fs.write(sentence_to_text(src) + "\n")
            ft.write(sentence_to_text(tgt) + "\n")
    return src_path, tgt_path


def read_sentences(path: str, vocab_size: int | None = None) -> list[list[int]]:
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DataError(f"cannot read corpus file {path}: {e}") from e
    sentences = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            raise DataError(f"{path}:{i}: empty sentence")
        try:
            ids = [int(tok) for tok in line.split()]
        except ValueError:
            raise DataError(f"{path}:{i}: non-integer token in {line!r}") from None
        if min(ids) < FIRST_TOKEN_ID:
            raise DataError(f"{path}:{i}: token id below {FIRST_TOKEN_ID} is reserved")
        if vocab_size is not None and max(ids) >= vocab_size:
            raise DataError(f"{path}:{i}: token id {max(ids)} outside vocab {vocab_size}")
        sentences.append(ids)
    if not sentences:
        raise DataError(f"{path}: empty corpus")
    return sentences


def read_corpus(prefix: str, vocab_size: int | None = None):
    src = read_sentences(prefix + ".src", vocab_size)
    tgt = read_sentences(prefix + ".tgt", vocab_size)
    if len(src) != len(tgt):
        raise DataError(
            f"{prefix}: {len(src)} source lines but {len(tgt)} target lines")
    return list(zip(src, tgt))


# -- batching ---------------------------------------------------------------


def pad_batch(chunk) -> tuple[np.ndarray, np.ndarray]:
    """Append eos to every sentence and right-pad both sides to equal length."""
    if not chunk:
        raise DataError("empty batch")
    s_len = max(len(s) for s, _ in chunk) + 1
    t_len = max(len(t) for _, t in chunk) + 1
    src = np.full((len(chunk), s_len), PAD_ID, dtype=np.int64)
    tgt = np.full((len(chunk), t_len), PAD_ID, dtype=np.int64)
    for i, (s, t) in enumerate(chunk):
        src[i, :len(s)] = s
        src[i, len(s)] = EOS_ID
        tgt[i, :len(t)] = t
        tgt[i, len(t)] = EOS_ID
    return src, tgt


def epoch_batches(pairs, batch_size: int, rng: np.random.Generator | None = None):
    """One pass over the corpus in batches; shuffled when rng is given."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(pairs))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start:start + batch_size]]
        yield pad_batch(chunk)


def endless_batches(pairs, batch_size: int, rng: np.random.Generator):
    """Cycle over reshuffled epochs forever (training stream)."""
    while True:
        yield from epoch_batches(pairs, batch_size, rng)
