"""Synthetic corpus generation, file round-trips, and batching."""

import numpy as np
import pytest

from intmt.data import (
    TaskSpec,
    endless_batches,
    epoch_batches,
    make_pairs,
    pad_batch,
    read_corpus,
    read_sentences,
    sentence_to_text,
    split_pairs,
    substitution_map,
    write_corpus,
)
from intmt.errors import DataError
from intmt.model import EOS_ID, PAD_ID
from intmt.seeding import substream

SPEC = TaskSpec(kind="reverse", vocab_size=16, min_len=3, max_len=6)


class TestTaskSpec:
    def test_unknown_task_rejected(self):
        with pytest.raises(DataError):
            TaskSpec(kind="rot13")

    def test_degenerate_vocab_rejected(self):
        with pytest.raises(DataError):
            TaskSpec(vocab_size=3)

    def test_bad_length_range_rejected(self):
        with pytest.raises(DataError):
            TaskSpec(min_len=5, max_len=4)


class TestMakePairs:
    def test_deterministic_per_seed(self):
        a = make_pairs(SPEC, 50, seed=3)
        b = make_pairs(SPEC, 50, seed=3)
        c = make_pairs(SPEC, 50, seed=4)
        assert a == b
        assert a != c

    def test_lengths_and_ids_in_range(self):
        for src, tgt in make_pairs(SPEC, 100, seed=1):
            assert 3 <= len(src) <= 6
            assert len(src) == len(tgt)
            assert min(src) >= 2 and max(src) < 16

    def test_reverse_task(self):
        for src, tgt in make_pairs(SPEC, 20, seed=2):
            assert tgt == src[::-1]

    def test_copy_task(self):
        spec = TaskSpec(kind="copy", vocab_size=16)
        for src, tgt in make_pairs(spec, 20, seed=2):
            assert tgt == src

    def test_substitute_task_applies_fixed_bijection(self):
        spec = TaskSpec(kind="substitute", vocab_size=16)
        table = substitution_map(spec, substream(2, "data"))
        for src, tgt in make_pairs(spec, 20, seed=2):
            assert tgt == [int(table[t]) for t in src[::-1]]

    def test_substitution_map_is_bijective_and_spares_reserved_ids(self):
        spec = TaskSpec(kind="substitute", vocab_size=32)
        table = substitution_map(spec, substream(0, "data"))
        assert table[PAD_ID] == PAD_ID and table[EOS_ID] == EOS_ID
        assert sorted(table.tolist()) == list(range(32))

    def test_empty_request_rejected(self):
        with pytest.raises(DataError):
            make_pairs(SPEC, 0, seed=0)


class TestSplit:
    def test_fractions_partition_corpus(self):
        pairs = make_pairs(SPEC, 100, seed=5)
        parts = split_pairs(pairs, 0.8, 0.1)
        assert [len(parts[k]) for k in ("train", "valid", "test")] == [80, 10, 10]
        assert parts["train"] + parts["valid"] + parts["test"] == pairs

    def test_tiny_corpus_rejected(self):
        with pytest.raises(DataError):
            split_pairs(make_pairs(SPEC, 3, seed=0), 0.8, 0.1)

    def test_bad_fractions_rejected(self):
        pairs = make_pairs(SPEC, 10, seed=0)
        with pytest.raises(DataError):
            split_pairs(pairs, 0.9, 0.2)


class TestCorpusFiles:
    def test_round_trip(self, tmp_path):
        pairs = make_pairs(SPEC, 30, seed=7)
        prefix = str(tmp_path / "train")
        write_corpus(prefix, pairs)
        back = read_corpus(prefix, vocab_size=16)
        assert [(list(s), list(t)) for s, t in back] == pairs

    def test_rendering_is_space_separated_decimals(self):
        assert sentence_to_text([2, 15, 7]) == "2 15 7"

    def test_non_integer_token_rejected(self, tmp_path):
        p = tmp_path / "bad.src"
        p.write_text("2 3 four\n")
        with pytest.raises(DataError, match="non-integer"):
            read_sentences(str(p))

    def test_reserved_id_rejected(self, tmp_path):
        p = tmp_path / "bad.src"
        p.write_text("2 1 3\n")
        with pytest.raises(DataError, match="reserved"):
            read_sentences(str(p))

    def test_out_of_vocab_rejected(self, tmp_path):
        p = tmp_path / "bad.src"
        p.write_text("2 99\n")
        with pytest.raises(DataError, match="vocab"):
            read_sentences(str(p), vocab_size=16)

    def test_missing_file_raises_data_error(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            read_sentences(str(tmp_path / "nope.src"))

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "empty.src"
        p.write_text("")
        with pytest.raises(DataError, match="empty corpus"):
            read_sentences(str(p))

    def test_line_count_mismatch_rejected(self, tmp_path):
        (tmp_path / "c.src").write_text("2 3\n4 5\n")
        (tmp_path / "c.tgt").write_text("3 2\n")
        with pytest.raises(DataError, match="lines"):
            read_corpus(str(tmp_path / "c"))


class TestBatching:
    def test_pad_batch_layout(self):
        src, tgt = pad_batch([([2, 3, 4], [4, 3, 2]), ([5, 6], [6, 5])])
        np.testing.assert_array_equal(src, [[2, 3, 4, EOS_ID], [5, 6, EOS_ID, PAD_ID]])
        np.testing.assert_array_equal(tgt, [[4, 3, 2, EOS_ID], [6, 5, EOS_ID, PAD_ID]])

    def test_epoch_covers_every_pair_once(self):
        pairs = make_pairs(SPEC, 23, seed=9)
        seen = []
        for src, tgt in epoch_batches(pairs, 5, substream(0, "shuffle")):
            assert src.shape[0] <= 5
            for i in range(src.shape[0]):
                s = [t for t in src[i] if t >= 2]
                seen.append(s)
        assert sorted(map(tuple, seen)) == sorted(tuple(s) for s, _ in pairs)

    def test_oversized_batch_yields_single_batch(self):
        pairs = make_pairs(SPEC, 4, seed=0)
        batches = list(epoch_batches(pairs, 100))
        assert len(batches) == 1
        assert batches[0][0].shape[0] == 4

    def test_shuffle_changes_order_not_content(self):
        pairs = make_pairs(SPEC, 40, seed=11)
        a = [s.tolist() for s, _ in epoch_batches(pairs, 8, substream(1, "shuffle"))]
        b = [s.tolist() for s, _ in epoch_batches(pairs, 8, substream(2, "shuffle"))]
        assert a != b

    def test_endless_stream_restarts(self):
        pairs = make_pairs(SPEC, 6, seed=3)
        stream = endless_batches(pairs, 4, substream(0, "shuffle"))
        batches = [next(stream) for _ in range(5)]
        assert len(batches) == 5  # 2 batches per epoch, keeps going

    def test_zero_batch_size_rejected(self):
        with pytest.raises(DataError):
            next(epoch_batches(make_pairs(SPEC, 4, seed=0), 0))
