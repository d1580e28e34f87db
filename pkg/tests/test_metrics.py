import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmte.metrics import MetricReport, accuracy, bleu, config_hash, iob_spans, span_f1, token_f1


class TestBleu:
    def test_identical_is_100(self):
        hyps = [["a", "b", "c", "d", "e"], ["x", "y"]]
        assert bleu(hyps, hyps) == pytest.approx(100.0)

    def test_identical_short_sentences_are_100(self):
        hyps = [["one"]]
        assert bleu(hyps, hyps) == pytest.approx(100.0)

    def test_disjoint_is_zero(self):
        assert bleu([["a", "b"]], [["x", "y"]]) == 0.0

    def test_hand_derived_brevity_case(self):
        got = bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
        assert got == pytest.approx(100.0 * math.exp(-0.25), abs=1e-9)
        assert abs(got - 77.88) < 0.01

    def test_permutation_invariant_over_examples(self):
        hyps = [["a", "b"], ["c", "d", "e"], ["f"]]
        refs = [["a", "x"], ["c", "d"], ["f"]]
        one = bleu(hyps, refs)
        two = bleu(hyps[::-1], refs[::-1])
        assert one == pytest.approx(two, abs=1e-12)

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="2.*1|1.*2"):
            bleu([["a"], ["b"]], [["a"]])

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            bleu([], [])

    def test_clipping(self):
        # "the the the" against "the cat": unigram matches clipped to 1
        got = bleu([["the", "the", "the"]], [["the", "cat", "sat"]])
        assert got == 0.0  # no bigram match -> 0 without smoothing


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_none_correct(self):
        assert accuracy([1, 2], [3, 4]) == 0.0

    def test_three_of_four(self):
        assert accuracy(list("abcd"), list("abcx")) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            accuracy([], [])


class TestTokenF1:
    def test_perfect(self):
        assert token_f1(["N", "V"], ["N", "V"]) == 1.0

    def test_half_wrong(self):
        assert token_f1(["N", "V", "N", "V"], ["N", "N", "N", "N"]) == 0.5

    def test_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            token_f1(["a"], ["a", "b"])

    def test_equals_accuracy_on_random_sequences(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 40))
            pred = [f"t{int(i)}" for i in rng.integers(4, size=n)]
            gold = [f"t{int(i)}" for i in rng.integers(4, size=n)]
            assert token_f1(pred, gold) == pytest.approx(accuracy(pred, gold), abs=1e-12)


class TestSpanF1:
    def test_identical(self):
        seqs = [["B-PER", "I-PER", "O", "B-LOC"]]
        assert span_f1(seqs, seqs) == (1.0, 1.0, 1.0)

    def test_derived_half_case(self):
        # gold {PER[0,1], LOC[3,3]}, pred {PER[0,1], LOC[4,4]}: TP=1, FP=1, FN=1
        gold = [["B-PER", "I-PER", "O", "B-LOC", "O"]]
        pred = [["B-PER", "I-PER", "O", "O", "B-LOC"]]
        assert span_f1(pred, gold) == (0.5, 0.5, 0.5)

    def test_all_outside_prediction(self):
        gold = [["B-X", "O"]]
        pred = [["O", "O"]]
        assert span_f1(pred, gold) == (0.0, 0.0, 0.0)

    def test_bare_inside_starts_span(self):
        # CoNLL convention: I-X after O acts as B-X
        assert iob_spans(["O", "I-LOC", "I-LOC"]) == {("LOC", 1, 2)}
        assert iob_spans(["B-PER", "I-LOC"]) == {("PER", 0, 0), ("LOC", 1, 1)}

    def test_unknown_tag_rejected(self):
        with pytest.raises(ValueError, match="FOO"):
            iob_spans(["FOO"])

    def test_symmetry_swaps_precision_recall(self):
        a = [["B-X", "O", "B-Y", "I-Y"]]
        b = [["B-X", "I-X", "O", "B-Y"]]
        p1, r1, f1 = span_f1(a, b)
        p2, r2, f2 = span_f1(b, a)
        assert (p1, r1) == (r2, p2)
        assert f1 == pytest.approx(f2)


@settings(max_examples=50, derandomize=True, deadline=None)
@given(st.lists(st.sampled_from(["O", "B-A", "I-A", "B-B", "I-B"]), min_size=1, max_size=12))
def test_span_extraction_covers_non_outside(tags):
    spans = iob_spans(tags)
    covered = set()
    for label, s, e in spans:
        assert s <= e
        covered.update(range(s, e + 1))
    assert covered == {i for i, t in enumerate(tags) if t != "O"}


class TestMetricReport:
    def test_average_is_unweighted_mean(self):
        r = MetricReport("t", "acc", {"en": 0.5, "de": 0.7, "fr": 0.9}, seed=1, step=10)
        assert abs(r.average - 0.7) < 1e-9

    def test_text_round_trip(self):
        r = MetricReport("pretrain", "bleu", {"en-aa": 97.25, "aa-en": 88.5}, 3, 2000, config_hash("x"), {"n_params": 123.0})
        again = MetricReport.from_text(r.to_text())
        assert again == r

    def test_stable_serialization(self):
        r1 = MetricReport("t", "m", {"b": 1.0, "a": 2.0}, 0, 0)
        r2 = MetricReport("t", "m", {"a": 2.0, "b": 1.0}, 0, 0)
        assert r1.to_text() == r2.to_text()
