import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from softerase.errors import ParameterError
from softerase.metrics import (
    LikelihoodTriple,
    MetricRecord,
    aopc,
    baseline_gap,
    comprehensiveness,
    diagnosticity,
    normalized_comprehensiveness,
    normalized_sufficiency,
    rank_sum_test,
    soft_nc,
    soft_ns,
    sufficiency,
    win_indicators,
)

prob = st.floats(0.0, 1.0)


def test_ns_hand_values():
    assert sufficiency(0.9, 0.7) == pytest.approx(0.8, abs=1e-12)
    assert sufficiency(0.9, 0.4) == pytest.approx(0.5, abs=1e-12)
    assert normalized_sufficiency(LikelihoodTriple(0.9, 0.7, 0.4)) == pytest.approx(0.6, abs=1e-12)
    assert normalized_sufficiency(LikelihoodTriple(0.9, 0.9, 0.4)) == 1.0
    assert normalized_sufficiency(LikelihoodTriple(0.9, 0.4, 0.4)) == 0.0


def test_nc_hand_values():
    assert comprehensiveness(0.9, 0.6) == pytest.approx(0.3, abs=1e-12)
    assert normalized_comprehensiveness(LikelihoodTriple(0.9, 0.6, 0.4)) == pytest.approx(0.6, abs=1e-12)
    assert normalized_comprehensiveness(LikelihoodTriple(0.9, 0.9, 0.4)) == 0.0
    assert normalized_comprehensiveness(LikelihoodTriple(0.9, 0.4, 0.4)) == 1.0


def test_soft_hand_values():
    assert soft_ns(0.9, [0.7, 0.9], 0.4) == pytest.approx(0.8, abs=1e-12)
    assert soft_nc(0.9, [0.4, 0.6], 0.4) == pytest.approx(0.8, abs=1e-12)
    assert soft_ns(0.9, [0.9] * 4, 0.4) == 1.0
    assert soft_ns(0.9, [0.4] * 4, 0.4) == 0.0
    assert soft_nc(0.9, [0.9] * 4, 0.4) == 0.0
    assert soft_nc(0.9, [0.4] * 4, 0.4) == 1.0


def test_soft_average_modes_differ_under_clamp():
    # p above p_full in one sample: averaging probabilities lets it offset the other sample
    assert soft_nc(0.5, [0.0, 1.0], 0.0, average="probs") == 0.0
    assert soft_nc(0.5, [0.0, 1.0], 0.0, average="metric") == pytest.approx(0.5)
    with pytest.raises(ParameterError):
        soft_ns(0.9, [0.5], 0.4, average="median")
    with pytest.raises(ParameterError):
        soft_ns(0.9, [], 0.4)


def test_degenerate_instances_excluded():
    assert baseline_gap(0.5, 0.5) is None
    assert baseline_gap(0.5, 0.5 - 1e-7) is None
    assert baseline_gap(0.4, 0.6) is None
    assert normalized_sufficiency(LikelihoodTriple(0.5, 0.2, 0.6)) is None
    assert normalized_comprehensiveness(LikelihoodTriple(0.5, 0.2, 0.5)) is None
    assert soft_ns(0.5, [0.3], 0.5) is None


def test_probability_validation():
    with pytest.raises(ParameterError):
        LikelihoodTriple(1.2, 0.5, 0.1)
    with pytest.raises(ParameterError):
        soft_nc(0.9, [0.5, -0.1], 0.1)


@settings(max_examples=300, deadline=None)
@given(prob, prob, prob)
def test_metrics_bounded(p_full, p_pert, p_zero):
    t = LikelihoodTriple(p_full, p_pert, p_zero)
    for v in (normalized_sufficiency(t), normalized_comprehensiveness(t)):
        assert v is None or 0.0 <= v <= 1.0


@settings(max_examples=300, deadline=None)
@given(prob, prob, prob)
def test_ns_nc_complement(p_full, p_pert, p_zero):
    t = LikelihoodTriple(p_full, p_pert, p_zero)
    ns, nc = normalized_sufficiency(t), normalized_comprehensiveness(t)
    if ns is not None and p_full - p_pert <= p_full - p_zero:
        assert ns + nc == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(prob, prob, st.lists(prob, min_size=1, max_size=8))
def test_soft_single_sample_reduces_to_hard(p_full, p_zero, probs):
    for p in probs:
        t = LikelihoodTriple(p_full, p, p_zero)
        assert soft_ns(p_full, [p], p_zero) == normalized_sufficiency(t)
        assert soft_nc(p_full, [p], p_zero) == normalized_comprehensiveness(t)


def test_aopc():
    assert aopc([0.2, 0.4, 0.6, 0.8, 1.0]) == pytest.approx(0.6, abs=1e-12)
    assert aopc([0.7] * 5) == pytest.approx(0.7, abs=1e-15)
    assert aopc([0.1, 0.1, 0.2, 0.3, 0.8]) == pytest.approx(0.3, abs=1e-12)
    assert aopc({0.5: 1.0, 0.1: 0.0}, ratios=(0.1, 0.5)) == 0.5
    with pytest.raises(ParameterError):
        aopc({0.1: 0.2}, ratios=(0.1, 0.5))
    with pytest.raises(ParameterError):
        aopc([0.1, 0.2])
    with pytest.raises(ParameterError):
        aopc([0.1, None, 0.2, 0.3, 0.4])


def test_diagnosticity():
    assert diagnosticity([(0.9, 0.1), (0.5, 0.2)]).value == 1.0
    r = diagnosticity([(0.9, 0.1), (0.5, 0.2), (0.3, 0.3), (0.8, 0.7)], metric="NS")
    assert r.value == 0.75 and r.wins == 3 and r.ties == 1 and r.pairs == 4
    assert diagnosticity([(0.5, 0.45)], epsilon=0.1).value == 0.0
    assert win_indicators([(0.5, 0.45), (0.2, 0.5)]).tolist() == [1, 0]
    with pytest.raises(ParameterError):
        diagnosticity([])
    with pytest.raises(ParameterError):
        diagnosticity([(1, 0)], epsilon=-1)


def test_metric_record_validation():
    MetricRecord("a", "attention", "NS", 0.5, ratio=0.1)
    MetricRecord("a", "attention", "SoftNC", 0.5, samples=16)
    MetricRecord("a", "attention", "NC", None, ratio=0.1, excluded="degenerate")
    with pytest.raises(ParameterError):
        MetricRecord("a", "attention", "NS", 0.5)
    with pytest.raises(ParameterError):
        MetricRecord("a", "attention", "SoftNS", 0.5)
    with pytest.raises(ParameterError):
        MetricRecord("a", "attention", "XX", 0.5, ratio=0.1)
    with pytest.raises(ParameterError):
        MetricRecord("a", "attention", "NS", None, ratio=0.1)


def test_rank_sum_exact_examples():
    assert rank_sum_test([1, 2, 3], [4, 5, 6]) == pytest.approx(0.1, abs=1e-12)
    assert rank_sum_test([1, 2, 3], [1, 2, 3]) == 1.0
    assert rank_sum_test([2, 2], [2, 2, 2]) == 1.0
    with pytest.raises(ParameterError):
        rank_sum_test([], [1])


def test_rank_sum_exact_matches_scipy(np_rng):
    for _ in range(20):
        a = np_rng.normal(size=int(np_rng.integers(1, 9)))
        b = np_rng.normal(size=int(np_rng.integers(1, 9))) + 0.5
        ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="exact").pvalue
        assert rank_sum_test(a, b) == pytest.approx(ref, abs=1e-12)


def test_rank_sum_asymptotic_matches_scipy(np_rng):
    for _ in range(20):
        a = np_rng.integers(0, 5, size=int(np_rng.integers(11, 60)))
        b = np_rng.integers(0, 6, size=int(np_rng.integers(11, 60)))
        ref = stats.mannwhitneyu(
            a, b, alternative="two-sided", method="asymptotic", use_continuity=True
        ).pvalue
        assert rank_sum_test(a, b) == pytest.approx(ref, abs=1e-12)


def test_rank_sum_exact_with_ties_brute_force():
    import itertools

    a, b = [1, 2, 2], [2, 3, 3, 4]
    pooled = a + b
    ranks = stats.rankdata(pooled)
    mean = 3 * 8 / 2
    w = ranks[:3].sum()
    sums = [ranks[list(c)].sum() for c in itertools.combinations(range(7), 3)]
    expected = np.mean([abs(s - mean) >= abs(w - mean) - 1e-9 for s in sums])
    assert rank_sum_test(a, b) == pytest.approx(expected, abs=1e-12)


def test_rank_sum_calibration():
    rng = np.random.default_rng(2024)
    p = [rank_sum_test(rng.normal(size=50), rng.normal(size=50)) for _ in range(100)]
    assert sum(v > 0.01 for v in p) >= 95
    assert 0.35 < np.mean(p) < 0.65
