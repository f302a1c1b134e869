import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from letlab.data import (Corpus, MarkovSpec, batch_at, batches,
                         detokenize, gen_markov_corpus, load_corpus,
                         num_batches_per_epoch, read_token_file,
                         tokenize_bytes, write_token_file)
from letlab.errors import DataError


class TestTokenizeBytes:
    def test_identity_mapping(self):
        corpus = tokenize_bytes(b"Hi")
        assert corpus.vocab_size == 256
        np.testing.assert_array_equal(corpus.tokens, [72, 105])

    @settings(max_examples=30, deadline=None)
    @given(st.binary(min_size=2, max_size=200))
    def test_roundtrip(self, blob):
        assert detokenize(tokenize_bytes(blob)) == blob

    def test_one_token_per_byte(self):
        blob = bytes(range(256)) * 64
        assert len(tokenize_bytes(blob)) == len(blob)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            tokenize_bytes(b"")


class TestMarkovSpec:
    def test_cycle_has_zero_entropy(self):
        spec = MarkovSpec.cycle(3)
        assert spec.entropy_rate() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_entropy_is_log_vocab(self):
        spec = MarkovSpec.uniform(16)
        assert spec.entropy_rate() == pytest.approx(math.log(16), rel=1e-12)

    def test_two_state_entropy_matches_binary_entropy(self):
        spec = MarkovSpec(order=1, table=[[0.9, 0.1], [0.1, 0.9]])
        h = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
        assert spec.entropy_rate() == pytest.approx(h, rel=1e-12)
        assert spec.entropy_rate() == pytest.approx(0.3251, abs=1e-4)

    def test_bad_rows_rejected(self):
        with pytest.raises(DataError, match="row"):
            MarkovSpec(order=1, table=[[0.9, 0.2], [0.1, 0.9]])
        with pytest.raises(DataError, match="nonnegative"):
            MarkovSpec(order=1, table=[[1.1, -0.1], [0.5, 0.5]])

    def test_order2_stationary_and_entropy(self):
        # two symbols, order 2: next token equals token from two steps ago
        table = np.zeros((4, 2))
        for s in range(4):
            table[s, s // 2] = 1.0
        spec = MarkovSpec(order=2, table=table)
        assert spec.entropy_rate() == pytest.approx(0.0, abs=1e-12)


class TestGenMarkov:
    def test_cycle_produces_exact_cycle(self):
        corpus = gen_markov_corpus(MarkovSpec.cycle(3, seed=1), 30)
        diffs = np.diff(corpus.tokens) % 3
        assert (diffs == 1).all()

    def test_deterministic_given_seed(self):
        spec = MarkovSpec(order=1, table=[[0.7, 0.3], [0.4, 0.6]], seed=5)
        a = gen_markov_corpus(spec, 5000)
        b = gen_markov_corpus(spec, 5000)
        assert np.array_equal(a.tokens, b.tokens)

    def test_empirical_transitions_converge(self):
        spec = MarkovSpec(order=1, table=[[0.9, 0.1], [0.1, 0.9]], seed=9)
        corpus = gen_markov_corpus(spec, 200_000)
        toks = corpus.tokens
        for s in (0, 1):
            mask = toks[:-1] == s
            frac = np.mean(toks[1:][mask] == s)
            assert frac == pytest.approx(0.9, abs=0.01)

    def test_empirical_entropy_within_two_percent(self):
        spec = MarkovSpec(order=1, table=[[0.9, 0.1], [0.1, 0.9]], seed=3)
        corpus = gen_markov_corpus(spec, 1_000_000)
        toks = corpus.tokens
        # plug-in conditional entropy estimate
        est = 0.0
        n = len(toks) - 1
        for s in (0, 1):
            mask = toks[:-1] == s
            p_state = mask.mean()
            for t in (0, 1):
                p = np.mean(toks[1:][mask] == t)
                if p > 0:
                    est -= p_state * p * math.log(p)
        assert abs(est - spec.entropy_rate()) / spec.entropy_rate() < 0.02

    def test_too_short_rejected(self):
        with pytest.raises(DataError):
            gen_markov_corpus(MarkovSpec.cycle(3), 1)


class TestBatches:
    def test_batch_count_formula(self):
        corpus = Corpus(np.zeros(1025, dtype=np.int64), vocab_size=2)
        assert num_batches_per_epoch(len(corpus), 2, 64) == 8

    def test_same_seed_identical_stream(self):
        corpus = Corpus(np.arange(3000) % 7, vocab_size=7)
        a = batches(corpus, 4, 16, seed=3)
        b = batches(corpus, 4, 16, seed=3)
        for _ in range(25):
            ba, bb = next(a), next(b)
            assert np.array_equal(ba.inputs, bb.inputs)
            assert np.array_equal(ba.targets, bb.targets)

    def test_shift_by_one_relation(self):
        corpus = Corpus(np.arange(2000) % 11, vocab_size=11)
        stream = batches(corpus, 3, 10, seed=1)
        for _ in range(10):
            batch = next(stream)
            np.testing.assert_array_equal(batch.targets[:, :-1], batch.inputs[:, 1:])
            # target of the final position is the next contiguous corpus token
            for row in range(3):
                start = int(batch.inputs[row, 0])
                np.testing.assert_array_equal(
                    batch.inputs[row], (np.arange(start, start + 10)) % 11)

    def test_epoch_covers_leading_span_without_overlap(self):
        corpus = Corpus(np.arange(1025), vocab_size=1025)
        nb = num_batches_per_epoch(1025, 2, 64)
        seen = []
        for i in range(nb):
            batch = batch_at(corpus, 2, 64, seed=5, epoch=0, index=i)
            seen.extend(batch.inputs[:, 0].tolist())
        starts = sorted(seen)
        assert starts == [w * 64 for w in range(nb * 2)]

    def test_epochs_reshuffle(self):
        corpus = Corpus(np.arange(4000) % 13, vocab_size=13)
        a = batch_at(corpus, 4, 16, seed=2, epoch=0, index=0)
        b = batch_at(corpus, 4, 16, seed=2, epoch=1, index=0)
        assert not np.array_equal(a.inputs, b.inputs)

    def test_corpus_too_short_rejected(self):
        corpus = Corpus(np.zeros(65, dtype=np.int64), vocab_size=2)
        with pytest.raises(DataError):
            next(batches(corpus, 2, 64, seed=0))


class TestTokenFiles:
    def test_roundtrip(self, tmp_path):
        corpus = Corpus(np.arange(500) % 19, vocab_size=19)
        path = tmp_path / "c.tok"
        write_token_file(path, corpus)
        again = read_token_file(path)
        assert again.vocab_size == 19
        np.testing.assert_array_equal(again.tokens, corpus.tokens)

    def test_magic_and_layout(self, tmp_path):
        corpus = Corpus(np.array([3, 1, 4, 1, 5]), vocab_size=10)
        path = tmp_path / "c.tok"
        write_token_file(path, corpus)
        blob = path.read_bytes()
        assert blob[:8] == b"LETTOK01"
        assert int.from_bytes(blob[8:12], "little") == 10
        assert len(blob) == 12 + 4 * 5

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.tok"
        path.write_bytes(b"NOTATOKENFILE")
        with pytest.raises(DataError):
            read_token_file(path)

    def test_load_corpus_sniffs_format(self, tmp_path):
        raw = tmp_path / "raw.bin"
        raw.write_bytes(b"hello world")
        assert load_corpus(raw).vocab_size == 256
        tok = tmp_path / "t.tok"
        write_token_file(tok, Corpus(np.array([1, 2, 3]), vocab_size=5))
        assert load_corpus(tok).vocab_size == 5


def test_corpus_split_preserves_contiguity():
    corpus = Corpus(np.arange(100), vocab_size=100)
    train, test = corpus.split(0.9)
    assert len(train) == 90 and len(test) == 10
    np.testing.assert_array_equal(np.concatenate([train.tokens, test.tokens]),
                                  corpus.tokens)


def test_corpus_validation():
    with pytest.raises(DataError):
        Corpus(np.array([5]), vocab_size=10)  # too short
    with pytest.raises(DataError):
        Corpus(np.array([1, 11]), vocab_size=10)  # id out of range
