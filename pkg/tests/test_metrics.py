import random
import unicodedata

import pytest
from hypothesis import given, strategies as st

from oracles import CAT_SAT_CAT_MAT, chrf_oracle
from olyharness.metrics import ChrfParams, chrf, corpus_chrf

nonempty = st.text(min_size=1, max_size=30).filter(lambda s: s.strip())


def test_identity():
    assert chrf("abc", "abc") == 100.0


def test_disjoint():
    assert chrf("abc", "xyz") == 0.0


def test_cat_sat_golden():
    assert chrf("cat sat", "cat mat") == pytest.approx(CAT_SAT_CAT_MAT, abs=1e-12)
    assert chrf_oracle("cat sat", "cat mat") == pytest.approx(CAT_SAT_CAT_MAT, abs=1e-12)


def test_empty_reference_rejected():
    with pytest.raises(ValueError):
        chrf("abc", "")
    with pytest.raises(ValueError):
        chrf("abc", "   ")


def test_empty_hypothesis_zero():
    assert chrf("", "abc") == 0.0


def test_combining_marks_are_characters():
    decomposed = unicodedata.normalize("NFD", "é")
    assert chrf(decomposed, decomposed) == 100.0
    assert chrf(decomposed, "é") < 100.0


def test_params_validation():
    with pytest.raises(ValueError):
        ChrfParams(char_order=0)
    with pytest.raises(ValueError):
        ChrfParams(beta=0)


@given(nonempty)
def test_identity_property(s):
    assert chrf(s, s) == 100.0


@given(st.text(max_size=30), nonempty)
def test_bounds_and_oracle(h, r):
    value = chrf(h, r)
    assert 0.0 <= value <= 100.0
    assert value == pytest.approx(chrf_oracle(h, r), abs=1e-9)


@given(nonempty, nonempty, st.text(alphabet=" \t\n", max_size=3), st.text(alphabet=" \t\n", max_size=3))
def test_outer_whitespace_invariance(h, r, pre, post):
    assert chrf(pre + h + post, r) == chrf(h, r)


class TestCorpus:
    def test_identical(self):
        res = corpus_chrf([("kala", "kala"), ("talo", "talo")])
        assert (res.mean, res.n_scored, res.n_missing) == (100.0, 2, 0)

    def test_skip_empty(self):
        res = corpus_chrf([("kala", "kala"), ("", "talo"), ("  ", "x")])
        assert (res.mean, res.n_scored, res.n_missing) == (100.0, 1, 2)

    def test_count_empty_as_zero(self):
        res = corpus_chrf([("kala", "kala"), ("", "talo")], skip_empty=False)
        assert (res.mean, res.n_missing) == (50.0, 1)

    def test_all_empty(self):
        res = corpus_chrf([("", "a")])
        assert res.mean is None and res.n_missing == 1

    def test_ten_pair_fixture(self):
        rng = random.Random(7)
        alphabet = "abcdeéñ ü"
        pairs = [("".join(rng.choice(alphabet) for _ in range(rng.randint(1, 20))),
                  "".join(rng.choice(alphabet) for _ in range(rng.randint(3, 20))) + "z") for _ in range(10)]
        pairs = [(h if h.strip() else "a", r) for h, r in pairs]
        expected = sum(chrf_oracle(h, r) for h, r in pairs) / 10
        assert corpus_chrf(pairs).mean == pytest.approx(expected, abs=1e-9)

    def test_empty_input(self):
        with pytest.raises(ValueError):
            corpus_chrf([])
