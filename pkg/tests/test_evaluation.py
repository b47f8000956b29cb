import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dist_n_reference, lcs_dp
from fedpt.data import CATEGORIES, encode_example, generate_corpus
from fedpt.errors import InputError
from fedpt.evaluation import dist_n, evaluate, lcs_length, report_rows, rouge_l, words
from fedpt.model import BYTE_VOCAB


def test_rouge_worked_examples():
    assert rouge_l("the cat sat", "the cat ran") == pytest.approx(2 / 3, abs=1e-15)
    assert rouge_l("a b c", "a b c") == 1.0
    assert rouge_l("a b c", "x y z") == 0.0
    assert rouge_l("", "x") == 0.0 and rouge_l("x", "") == 0.0


def test_words_lowercase_and_strip_punctuation():
    assert words("The Cat, sat!") == ["the", "cat", "sat"]


@settings(max_examples=300)
@given(st.lists(st.integers(0, 6), max_size=30), st.lists(st.integers(0, 6), max_size=30))
def test_lcs_matches_dynamic_program(a, b):
    assert lcs_length(a, b) == lcs_dp(a, b)


@given(st.lists(st.sampled_from("a b c d e".split()), max_size=12),
       st.lists(st.sampled_from("a b c d e".split()), max_size=12))
def test_rouge_is_symmetric(a, b):
    assert rouge_l(" ".join(a), " ".join(b)) == rouge_l(" ".join(b), " ".join(a))


def test_dist_worked_examples():
    assert dist_n(["a b c d"], 3) == 1.0
    assert dist_n(["a a a a"], 3) == 0.5
    assert dist_n(["x y"], 3) is None
    t = "p q r s t"
    assert dist_n([t, t], 3) == dist_n([t], 3) / 2
    with pytest.raises(InputError):
        dist_n(["a"], 0)


@given(st.lists(st.lists(st.sampled_from("a b c".split()), max_size=8).map(" ".join),
                max_size=6), st.integers(1, 4))
def test_dist_matches_enumeration_and_is_bounded(texts, n):
    got = dist_n(texts, n)
    assert got == dist_n_reference(texts, n)
    if got is not None:
        assert 0 < got <= 1


class Oracle:
    """Logit source that spells out the reference response of whichever prompt it sees."""

    def __init__(self, examples):
        self.vocab, self.context_len = BYTE_VOCAB, 256
        self.table = {tuple(p): t for p, t in map(encode_example, examples)}

    def next_logits(self, tokens):
        for p, t in self.table.items():
            if tuple(tokens[:len(p)]) == p:
                z = np.zeros(self.vocab.size)
                z[t[len(tokens) - len(p)]] = 10.0
                return z
        raise AssertionError("unknown prompt")


@pytest.fixture(scope="module")
def test_split():
    c = generate_corpus(0, {"train": 6, "val": 1, "test": 12, "public": 1},
                        categories=CATEGORIES[:6])
    return c.split("test")


def test_verbatim_source_scores_one(test_split):
    r = evaluate(Oracle(test_split), test_split, seeds=[0, 1, 2])
    assert r.rouge_l == 1.0 and r.rouge_l_std == 0.0
    assert r.per_seed == [1.0, 1.0, 1.0]
    assert set(r.per_category) == set(CATEGORIES[:6])
    assert r.to_dict()["rouge_l_x100"] == 100.0


def test_identical_seeds_identical_scores(test_split):
    r = evaluate(Oracle(test_split), test_split, seeds=[4, 4], sample=True)
    assert r.per_seed[0] == r.per_seed[1]


def test_decode_failures_are_counted(test_split):
    class Broken(Oracle):
        def next_logits(self, tokens):
            if len(tokens) % 2:
                raise InputError("boom")
            return super().next_logits(tokens)

    r = evaluate(Broken(test_split), test_split)
    assert r.failures > 0
    assert r.n_examples == len(test_split)


def test_empty_split_is_rejected():
    with pytest.raises(InputError):
        evaluate(None, [])


def test_report_rows_are_flat(test_split):
    r = evaluate(Oracle(test_split), test_split)
    rows = report_rows(r, round=3, dataset="test", variant="x")
    assert {"round", "dataset", "variant", "metric", "value"} <= set(rows[0])
    assert any(row["metric"] == "rouge_l" and row["value"] == 1.0 for row in rows)
