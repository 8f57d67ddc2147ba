import math
from fractions import Fraction as F

import numpy as np
import pytest
import scipy.stats
from hypothesis import assume, given, strategies as st

from conftest import make_annotation
from oracles import TIED_SPEARMAN_RHO, TIED_SPEARMAN_X, TIED_SPEARMAN_Y, anova_oracle, average_ranks_oracle, spearman_oracle
from olyharness.grading import Bucket, GradeReport
from olyharness.problem_model import Subject
from olyharness.stats import (
    GroupKey,
    StatsError,
    anova_one_way,
    average_ranks,
    f_survival,
    score_distribution,
    spearman_rho,
)

floats = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


class TestSpearman:
    def test_monotone(self):
        assert spearman_rho([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0, abs=1e-12)
        assert spearman_rho([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)

    def test_tied_fixture(self):
        assert spearman_rho(TIED_SPEARMAN_X, TIED_SPEARMAN_Y) == pytest.approx(TIED_SPEARMAN_RHO, abs=1e-12)

    def test_ranks(self):
        assert list(average_ranks([3, 1, 3, 2])) == [3.5, 1.0, 3.5, 2.0]

    @pytest.mark.parametrize("x,y", [([1, 1, 1], [1, 2, 3]), ([1, 2], [1, 2]), ([1, 2, 3], [1, 2])])
    def test_errors(self, x, y):
        with pytest.raises(StatsError):
            spearman_rho(x, y)

    def test_constant_message(self):
        with pytest.raises(StatsError, match="constant"):
            spearman_rho([1, 2, 3], [5, 5, 5])

    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=3, max_size=15))
    def test_oracle_and_bounds(self, pairs):
        x, y = [p[0] for p in pairs], [p[1] for p in pairs]
        assume(len(set(x)) > 1 and len(set(y)) > 1)
        rho = spearman_rho(x, y)
        assert -1 <= rho <= 1
        assert rho == pytest.approx(spearman_oracle(x, y), abs=1e-12)
        assert list(average_ranks(x)) == [float(r) for r in average_ranks_oracle(x)]

    @given(st.lists(st.tuples(st.integers(-20, 20), st.integers(-20, 20)), min_size=3, max_size=12))
    def test_increasing_transform_invariance(self, pairs):
        x, y = [p[0] for p in pairs], [p[1] for p in pairs]
        assume(len(set(x)) > 1 and len(set(y)) > 1)
        assert spearman_rho([v ** 3 + 5 * v for v in x], y) == pytest.approx(spearman_rho(x, y), abs=1e-12)

    @given(st.lists(st.integers(-50, 50), min_size=3, max_size=12, unique=True))
    def test_reversal_antisymmetry(self, y):
        x = list(range(len(y)))
        assert spearman_rho(x, y[::-1]) == pytest.approx(-spearman_rho(x, y), abs=1e-12)

    def test_matches_scipy(self):
        rng = np.random.default_rng(3)
        x, y = rng.integers(0, 5, 20), rng.normal(size=20)
        assert spearman_rho(x, y) == pytest.approx(scipy.stats.spearmanr(x, y).statistic, abs=1e-12)


class TestAnova:
    def test_zero_within(self):
        res = anova_one_way({"A": [1, 1], "B": [2, 2]})
        assert res.eta_p_squared == 1.0 and math.isinf(res.f) and res.p_value == 0.0

    def test_all_equal(self):
        res = anova_one_way({"A": [3, 3], "B": [3, 3]})
        assert res.eta_p_squared == 0.0 and math.isnan(res.f)

    def test_equal_means(self):
        assert anova_one_way({"A": [1, 3], "B": [0, 4], "C": [2, 2]}).eta_p_squared == pytest.approx(0, abs=1e-12)

    @pytest.mark.parametrize("groups", [{"A": [1, 2]}, {"A": [1], "B": []}, {"A": [1], "B": [2]}])
    def test_errors(self, groups):
        with pytest.raises(StatsError):
            anova_one_way(groups)

    def test_three_group_fixture(self):
        groups = {"a": [0.5, 1.5, 2.0, 3.25], "b": [4.0, 5.5, 3.75], "c": [1.0, 0.25, 2.5, 2.0, 1.75]}
        res = anova_one_way(groups)
        f, eta = anova_oracle(list(groups.values()))
        assert res.f == pytest.approx(f, abs=1e-9) and res.eta_p_squared == pytest.approx(eta, abs=1e-9)
        ref = scipy.stats.f_oneway(*groups.values())
        assert res.p_value == pytest.approx(ref.pvalue, abs=1e-12)
        assert (res.df_between, res.df_within) == (2, 9)

    def test_survival_edges(self):
        assert f_survival(0.0, 2, 5) == 1.0
        assert f_survival(math.inf, 2, 5) == 0.0

    @given(st.lists(st.lists(floats, min_size=1, max_size=6), min_size=2, max_size=4), floats,
           st.floats(0.1, 50) | st.floats(-50, -0.1))
    def test_affine_invariance(self, groups, shift, scale):
        assume(sum(len(g) for g in groups) > len(groups))
        base = anova_one_way({str(i): g for i, g in enumerate(groups)})
        assume(base.ss_between + base.ss_within > 1e-6)
        moved = anova_one_way({str(i): [scale * v + shift for v in g] for i, g in enumerate(groups)})
        assert 0 <= base.eta_p_squared <= 1
        assert moved.eta_p_squared == pytest.approx(base.eta_p_squared, abs=1e-9)


def report(score: F, ref=(2000, 1)) -> GradeReport:
    return GradeReport(ref, score, score, score, {}, 0, 0, Bucket.of(score))


# Ten reports, hand-tabulated:
#   Uralic [0, 1/4, 1/2, 3/4, 1]: mean 1/2, median 1/2, var 1/8, buckets 1,1,1,2
#   Turkic [1/2, 1, 1/4, 3/4]: mean 5/8, lower median 1/2, var 5/64, buckets 0,1,1,2
#   Bantu [19/25]: mean 0.76, std 0
TEN = [
    (report(F(0)), make_annotation()),
    (report(F(1, 4)), make_annotation()),
    (report(F(1, 2)), make_annotation(subjects=frozenset({Subject.Morphology, Subject.Syntax}))),
    (report(F(3, 4)), make_annotation()),
    (report(F(1)), make_annotation()),
    (report(F(1, 2)), make_annotation(language_family="Turkic")),
    (report(F(1)), make_annotation(language_family="Turkic")),
    (report(F(1, 4)), make_annotation(language_family="Turkic")),
    (report(F(3, 4)), make_annotation(language_family="Turkic", subjects=frozenset({Subject.Syntax}))),
    (report(F(19, 25)), make_annotation(language_family="Bantu")),
]


class TestDistribution:
    def test_ten_report_fixture(self):
        rows = {s.group: s for s in score_distribution(TEN, GroupKey.family)}
        assert list(rows) == ["Bantu", "Turkic", "Uralic"]
        u, t, b = rows["Uralic"], rows["Turkic"], rows["Bantu"]
        assert (u.n, u.mean, u.median, u.bucket_counts) == (5, 0.5, 0.5, (1, 1, 1, 2))
        assert u.std == pytest.approx(math.sqrt(1 / 8), abs=1e-15)
        assert (t.n, t.mean, t.median, t.bucket_counts) == (4, 0.625, 0.5, (0, 1, 1, 2))
        assert t.std == pytest.approx(math.sqrt(5) / 8, abs=1e-15)
        assert (b.n, b.mean, b.std) == (1, 0.76, 0.0)

    def test_multi_valued_subjects(self):
        rows = {s.group: s.n for s in score_distribution(TEN, "subject")}
        assert rows == {"Morphology": 9, "Syntax": 2}

    def test_row_format(self):
        row = score_distribution(TEN[:1], "type")[0].to_row()
        assert row == {"key": "type", "group": "Rosetta", "n": 1, "mean": "0.000000", "median": "0.000000",
                       "std": "0.000000", "B1": 1, "B2": 0, "B3": 0, "B4": 0}

    @given(st.lists(st.sampled_from(range(len(TEN))), min_size=1, max_size=10),
           st.lists(st.sampled_from(range(len(TEN))), min_size=1, max_size=10),
           st.sampled_from(list(GroupKey)))
    def test_additivity_and_bucket_sums(self, a, b, key):
        part_a = score_distribution([TEN[i] for i in a], key)
        part_b = score_distribution([TEN[i] for i in b], key)
        whole = score_distribution([TEN[i] for i in a + b], key)
        counts = {}
        for s in part_a + part_b:
            counts[s.group] = counts.get(s.group, 0) + s.n
        assert {s.group: s.n for s in whole} == counts
        for s in whole:
            assert sum(s.bucket_counts) == s.n
