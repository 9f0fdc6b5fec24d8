"""Witten-Bell n-gram models and cross-entropy-difference scoring."""

import math

import numpy as np
import pytest

from transference.corpus import SentencePair
from transference.errors import ConfigError, ContractError, DataError
from transference.ngram import (BOS, EOS, UNK, NGramLM, cross_entropy,
                                rank_and_split, score_pair, train_lm,
                                write_scores_tsv, ScoredPair)


def uniform_lm(tokens):
    """Direct-construction LM with no counts: every probability is 1/|V|."""
    vocab = set(tokens) | {UNK, EOS}
    return NGramLM(1, vocab, [{}])


class TestTrainLM:
    def test_unigram_normalization_aaa(self):
        lm = train_lm([["a", "a", "a"]], order=1)
        p_a = lm.prob("a", ())
        p_unk = lm.prob(UNK, ())
        p_eos = lm.prob(EOS, ())
        assert p_a > p_unk and p_a > p_eos
        # hand values: counts a=3, EOS=1; N=4, T=2, |V|=3
        assert p_a == pytest.approx((3 + 2 / 3) / 6, abs=1e-12)
        assert p_a + p_unk + p_eos == pytest.approx(1.0, abs=1e-12)

    def test_hand_computed_witten_bell(self):
        # corpus: "a b", "a a"; order 2; min_count=1 keeps all types.
        lm = train_lm([["a", "b"], ["a", "a"]], order=2, min_count=1)
        v = 4  # {a, b, UNK, EOS}
        p1_a = (3 + 3 / v) / (6 + 3)
        p1_b = (1 + 3 / v) / (6 + 3)
        p1_eos = (2 + 3 / v) / (6 + 3)
        assert lm.prob("a", ()) == pytest.approx(p1_a, abs=1e-12)
        assert lm.prob("a", (BOS,)) == pytest.approx((2 + 1 * p1_a) / 3, abs=1e-12)
        assert lm.prob("b", ("a",)) == pytest.approx((1 + 3 * p1_b) / 6, abs=1e-12)
        assert lm.prob(EOS, ("b",)) == pytest.approx((1 + 1 * p1_eos) / 2, abs=1e-12)

    def test_unseen_tokens_finite_entropy(self):
        lm = train_lm([["a", "b", "a", "b"]], order=3)
        h = cross_entropy(lm, ["zcela", "nové", "věci"])
        assert math.isfinite(h) and h > 0

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            train_lm([], order=3)
        with pytest.raises(DataError):
            train_lm([[]], order=3)

    def test_singletons_map_to_unk(self):
        lm = train_lm([["a", "a", "jednou"]], order=1)
        assert "jednou" not in lm.vocab
        assert lm.map_token("jednou") == UNK

    def test_context_distributions_normalize(self):
        rng = np.random.default_rng(0)
        words = ["alfa", "beta", "gama", "delta"]
        corpus = [[words[i] for i in rng.integers(0, 4, size=rng.integers(2, 7))]
                  for _ in range(30)]
        lm = train_lm(corpus, order=3, min_count=1)
        for level in lm.counts:
            for context in list(level)[:40]:
                total = sum(lm._prob(w, context) for w in lm.vocab)
                assert total == pytest.approx(1.0, abs=1e-9)


class TestCrossEntropy:
    def test_uniform_lm_gives_log2_v(self):
        lm = uniform_lm(["a", "b"])  # |V| = 4 with UNK and EOS
        for sentence in (["a"], ["a", "b"], ["b", "b", "a"]):
            assert cross_entropy(lm, sentence) == pytest.approx(2.0, abs=1e-12)

    def test_matches_hand_computed_log_sum(self):
        lm = train_lm([["a", "b"], ["a", "a"]], order=2, min_count=1)
        expected = -(math.log2(lm.prob("a", (BOS,)))
                     + math.log2(lm.prob("b", ("a",)))
                     + math.log2(lm.prob(EOS, ("b",)))) / 3
        assert cross_entropy(lm, ["a", "b"]) == pytest.approx(expected, abs=1e-12)

    def test_memorizing_lm_near_zero(self):
        lm = train_lm([["b", "c", "d", "e"]] * 50, order=3)
        assert cross_entropy(lm, ["b", "c", "d", "e"]) < 0.3

    def test_empty_sentence_rejected(self):
        lm = train_lm([["a", "a"]], order=2)
        with pytest.raises(ContractError):
            cross_entropy(lm, [])


def make_pair(i, src="a b", trg="x y"):
    return SentencePair(tuple(src.split()), tuple(trg.split()), i)


class TestScorePair:
    def setup_method(self):
        self.lm_in = train_lm([["a", "b"], ["a", "a"]], order=2, min_count=1)
        self.lm_out = train_lm([["b", "b"], ["c", "a", "b"]], order=2, min_count=1)

    def test_identical_models_score_zero(self):
        scored = score_pair(make_pair(0), self.lm_in, self.lm_in,
                            self.lm_out, self.lm_out)
        assert scored.score == pytest.approx(0.0, abs=1e-12)

    def test_matches_cross_entropy_oracle(self):
        pair = make_pair(0, "a b a", "b c")
        scored = score_pair(pair, self.lm_in, self.lm_out,
                            self.lm_in, self.lm_out)
        expected = (abs(cross_entropy(self.lm_in, pair.source)
                        - cross_entropy(self.lm_out, pair.source))
                    + abs(cross_entropy(self.lm_in, pair.target)
                          - cross_entropy(self.lm_out, pair.target)))
        assert scored.score == pytest.approx(expected, abs=1e-12)
        assert scored.score == pytest.approx(
            abs(scored.h_src_in - scored.h_src_out)
            + abs(scored.h_trg_in - scored.h_trg_out), abs=1e-9)

    def test_swap_symmetry(self):
        pair = make_pair(0, "a b", "b a")
        forward = score_pair(pair, self.lm_in, self.lm_out,
                             self.lm_in, self.lm_out)
        swapped = score_pair(pair, self.lm_out, self.lm_in,
                             self.lm_out, self.lm_in)
        assert forward.score == pytest.approx(swapped.score, abs=1e-12)

    def test_score_nonnegative_and_shift_invariant(self):
        pair = make_pair(0, "a b", "b a")
        s = score_pair(pair, self.lm_in, self.lm_out, self.lm_in, self.lm_out)
        assert s.score >= 0
        # adding a constant to both source entropies leaves the score as is
        shifted = abs((s.h_src_in + 2.5) - (s.h_src_out + 2.5)) + abs(
            s.h_trg_in - s.h_trg_out)
        assert shifted == pytest.approx(s.score, abs=1e-12)


class TestRankAndSplit:
    def _scored(self, scores):
        return [ScoredPair(make_pair(i), 0.0, 0.0, 0.0, 0.0, s)
                for i, s in enumerate(scores)]

    def test_validation_plus_training_counts(self):
        # same arithmetic as the full-scale corpus: total - 1000 training
        assert 1394319 - 1000 == 1393319
        scored = self._scored(list(np.random.default_rng(1).random(12000)))
        validation, selected, sorted_all = rank_and_split(scored, 1000, 500000)
        assert len(validation) == 1000
        assert len(sorted_all) == 12000 - 1000
        assert len(selected) == len(sorted_all)  # n_select caps at remainder

    def test_stable_tie_break(self):
        scored = self._scored([0.5] * 9)
        validation, selected, sorted_all = rank_and_split(scored, 3, 4)
        assert [s.pair.original_index for s in validation] == [0, 1, 2]
        assert [s.pair.original_index for s in sorted_all] == list(range(3, 9))

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(2)
        scores = list(rng.random(10))
        scored = self._scored(scores)
        validation, selected, sorted_all = rank_and_split(scored, 2, 3)
        brute = sorted(range(10), key=lambda i: scores[i])
        assert [s.pair.original_index for s in validation] == brute[:2]
        assert [s.pair.original_index for s in selected] == brute[2:5]
        assert [s.pair.original_index for s in sorted_all] == brute[2:]

    def test_validation_disjoint_from_selection(self):
        rng = np.random.default_rng(3)
        scored = self._scored(list(rng.random(50)))
        validation, selected, sorted_all = rank_and_split(scored, 10, 100)
        val_ids = {s.pair.original_index for s in validation}
        sel_ids = {s.pair.original_index for s in selected}
        assert val_ids & sel_ids == set()
        assert val_ids & {s.pair.original_index for s in sorted_all} == set()

    def test_too_small_corpus_rejected(self):
        with pytest.raises(ConfigError):
            rank_and_split(self._scored([0.1, 0.2]), 2, 1)


def test_scores_tsv_format(tmp_path):
    scored = [ScoredPair(make_pair(3), 1.25, 2.5, 0.125, 0.0625, 3.6875)]
    path = str(tmp_path / "scores.tsv")
    write_scores_tsv(path, scored)
    line = open(path, encoding="utf-8").read().rstrip("\n")
    assert line == "3\t3.687500\t1.250000\t2.500000\t0.125000\t0.062500"
