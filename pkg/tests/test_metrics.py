import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from easter.errors import InvalidArgumentError
from easter.metrics import cer, edit_distance, evaluate, wer


def _oracle(a, b) -> int:
    """Full-table Levenshtein, written independently of the two-row version."""
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(d[-1, -1])


def test_kitten_sitting():
    assert edit_distance("kitten", "sitting") == 3


def test_cer_example():
    assert cer(["our"], ["ow"]) == pytest.approx(2 / 3)


def test_wer_counts_words():
    assert wer(["the cat sat"], ["the bat sat down"]) == pytest.approx(2 / 3)


def test_corpus_normalisation():
    # total edits over total reference length, not a mean of ratios
    assert cer(["ab", "abcdefgh"], ["", "abcdefgh"]) == pytest.approx(2 / 10)


def test_fold_case():
    assert cer(["Hello"], ["hello"]) == pytest.approx(0.2)
    assert cer(["Hello"], ["hello"], fold_case=True) == 0.0


def test_errors():
    with pytest.raises(InvalidArgumentError):
        cer(["a"], ["a", "b"])
    with pytest.raises(InvalidArgumentError):
        cer([""], ["x"])
    with pytest.raises(InvalidArgumentError):
        wer(["  "], ["x"])


def test_metric_axioms_on_random_pairs():
    rng = np.random.default_rng(0)
    alphabet = np.array(list("abcd"))
    words = ["".join(rng.choice(alphabet, rng.integers(0, 9))) for _ in range(10_000 + 2)]
    for a, b, c in zip(words, words[1:], words[2:]):
        d = edit_distance(a, b)
        assert d == edit_distance(b, a)
        assert (d == 0) == (a == b)
        assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))
        assert edit_distance(a, c) <= d + edit_distance(b, c)


@settings(max_examples=300, deadline=None)
@given(st.text("abc", max_size=10), st.text("abc", max_size=10))
def test_matches_full_table_oracle(a, b):
    assert edit_distance(a, b) == _oracle(a, b)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.text("ab", min_size=1, max_size=8), min_size=1, max_size=5), st.data())
def test_cer_bounds(refs, data):
    hyps = [data.draw(st.text("abc", max_size=10)) for _ in refs]
    value = cer(refs, hyps)
    longest = sum(max(len(r), len(h)) for r, h in zip(refs, hyps))
    assert 0.0 <= value <= longest / sum(map(len, refs))
    assert cer(refs, refs) == 0.0


def test_single_word_accuracy_is_exact_match():
    refs = ["alpha", "beta", "gamma", "delta"]
    hyps = ["alpha", "bета", "gamma", "delt"]
    report = evaluate(refs, hyps)
    assert report.word_accuracy == pytest.approx(report.exact_match) == pytest.approx(0.5)


def test_report_files(tmp_path):
    report = evaluate(["ab c", "d\te"], ["ab", "d\te"], ids=["x", "y"])
    report.write(tmp_path / "r.json", tmp_path / "r.tsv")
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["samples"] == 2 and summary["cer"] == pytest.approx(report.cer)
    with open(tmp_path / "r.tsv", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    assert rows[0][0] == "sample_id"
    assert rows[2][:3] == ["y", "d\te", "d\te"]
