import itertools
import math
from functools import lru_cache

import numpy as np
import pytest

from xstnet import metrics as mt


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def test_bleu_perfect_match():
    report = mt.corpus_bleu(["a b c d e"], ["a b c d e"])
    assert abs(report.value - 100.0) < 1e-9
    assert report.fields["bp"] == 1.0


def test_bleu_brevity_penalty_hand_value():
    # All precisions 1, hyp 4 tokens vs ref 6: BLEU = exp(1 - 6/4) * 100.
    report = mt.corpus_bleu(["a b c d"], ["a b c d e f"])
    assert abs(report.value - 100.0 * math.exp(-0.5)) < 1e-9
    assert abs(report.value - 60.6531) < 0.01


def test_bleu_zero_when_no_4gram_match():
    report = mt.corpus_bleu(["a b c x"], ["a b c d"])
    assert report.value == 0.0


def test_bleu_clipping():
    # "the the the" against a ref with two "the": unigram matches clip at 2.
    report = mt.corpus_bleu(["the the the"], ["the cat the"])
    assert report.fields["match_1"] == 2.0
    assert report.fields["total_1"] == 3.0


def test_bleu_empty_hypothesis_corpus():
    report = mt.corpus_bleu([""], ["a b"])
    assert report.value == 0.0


def test_bleu_length_mismatch_errors():
    with pytest.raises(ValueError, match="corpus_bleu"):
        mt.corpus_bleu(["a"], ["a", "b"])


def test_bleu_is_corpus_level_not_average():
    # Corpus BLEU pools counts; it differs from averaging sentence scores.
    hyps = ["a b c d", "x y z w"]
    refs = ["a b c d", "a b c d"]
    pooled = mt.corpus_bleu(hyps, refs)
    assert 0.0 < pooled.value < 100.0


def test_bleu_monotone_under_perfect_append():
    rng = np.random.default_rng(0)
    vocab = list("abcdefg")
    for _ in range(50):
        hyps, refs = [], []
        for _ in range(3):
            n = int(rng.integers(4, 9))
            ref = [vocab[int(k)] for k in rng.integers(0, len(vocab), n)]
            hyp = list(ref)
            for pos in range(n):
                if rng.random() < 0.2:
                    hyp[pos] = vocab[int(rng.integers(0, len(vocab)))]
            hyp = hyp + [vocab[0]]  # keep hyp at least as long as ref so BP stays 1
            hyps.append(" ".join(hyp))
            refs.append(" ".join(ref))
        before = mt.corpus_bleu(hyps, refs)
        if before.fields["bp"] != 1.0 or before.value == 0.0:
            continue
        extra = " ".join(vocab[int(k)] for k in rng.integers(0, len(vocab), 6))
        after = mt.corpus_bleu(hyps + [extra], refs + [extra])
        assert after.fields["bp"] == 1.0
        assert after.value >= before.value - 1e-9


def test_bleu_value_recomputable_from_counts():
    rng = np.random.default_rng(1)
    vocab = list("abcde")
    hyps = [" ".join(vocab[int(k)] for k in rng.integers(0, 5, int(rng.integers(3, 10)))) for _ in range(20)]
    refs = [" ".join(vocab[int(k)] for k in rng.integers(0, 5, int(rng.integers(3, 10)))) for _ in range(20)]
    report = mt.corpus_bleu(hyps, refs)
    assert abs(mt.recompute_value(report) - report.value) < 1e-9


# ---------------------------------------------------------------------------
# WER
# ---------------------------------------------------------------------------


def test_wer_hand_value():
    # ref "a b c d", hyp "a x c": one substitution plus one deletion -> 2/4.
    report = mt.wer(["a x c"], ["a b c d"])
    assert abs(report.value - 0.5) < 1e-12
    assert report.fields["substitutions"] == 1.0
    assert report.fields["deletions"] == 1.0
    assert report.fields["insertions"] == 0.0


def test_wer_perfect_and_insertion_only():
    assert mt.wer(["a b"], ["a b"]).value == 0.0
    report = mt.wer(["a b c"], ["a"])
    assert report.fields["insertions"] == 2.0
    assert report.value == 2.0


def test_wer_empty_reference_corpus_errors():
    with pytest.raises(ValueError, match="reference"):
        mt.wer(["a"], [""])


def test_wer_can_exceed_one():
    assert mt.wer(["a b c d e"], ["x"]).value > 1.0


def test_wer_value_recomputable_from_counts():
    report = mt.wer(["a b x", "c"], ["a b c", "c d"])
    assert abs(mt.recompute_value(report) - report.value) < 1e-9


def test_wer_matches_bruteforce_oracle_exhaustively():
    """DP edit distance equals a memoized recursive oracle on every pair of
    sequences over a 2-token alphabet up to length 6."""

    @lru_cache(maxsize=None)
    def oracle(a: tuple, b: tuple) -> int:
        if not a:
            return len(b)
        if not b:
            return len(a)
        return min(
            oracle(a[1:], b[1:]) + (0 if a[0] == b[0] else 1),
            oracle(a[1:], b) + 1,
            oracle(a, b[1:]) + 1,
        )

    seqs = [tuple(p) for n in range(0, 7) for p in itertools.product("ab", repeat=n)]
    for ref in seqs:
        for hyp in seqs:
            s, i, d = mt._edit_counts(list(hyp), list(ref))
            assert s + i + d == oracle(tuple(ref), tuple(hyp))


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def test_emit_report_format(tmp_path):
    report = mt.corpus_bleu(["a b c d"], ["a b c d e f"])
    path = tmp_path / "report.csv"
    mt.emit_report(report, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "metric,value,detail"
    assert lines[1].startswith("bleu,60.6531,")
    assert lines[2] == "p1,1.0000,"
    mt.emit_report(report, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()
