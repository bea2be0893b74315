"""Normalized sufficiency / comprehensiveness (hard and soft), AOPC, diagnosticity,
and the Wilcoxon rank-sum test.

Every metric returns ``None`` when the instance's zero-baseline denominator
``max(0, p_full - p_zero)`` is at most ``DEGENERATE_TOL``; callers record such
instances as exclusions instead of failing.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ParameterError

DEFAULT_RATIOS = (0.01, 0.05, 0.10, 0.20, 0.50)
DEGENERATE_TOL = 1e-6
METRICS = ("NS", "NC", "SoftNS", "SoftNC")
HARD_COUNTERPART = {"SoftNS": "NS", "SoftNC": "NC"}
EXACT_RANK_SUM_MAX = 10


def _check_prob(p: float, name: str) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"{name} must be a probability, got {p}")
    return p


@dataclass(frozen=True)
class LikelihoodTriple:
    p_full: float
    p_perturbed: float
    p_zero: float

    def __post_init__(self):
        for name in ("p_full", "p_perturbed", "p_zero"):
            _check_prob(getattr(self, name), name)


def sufficiency(p_full: float, p_perturbed: float) -> float:
    """Unnormalized sufficiency ``1 - max(0, p_full - p_perturbed)``."""
    return 1.0 - max(0.0, _check_prob(p_full, "p_full") - _check_prob(p_perturbed, "p_perturbed"))


def comprehensiveness(p_full: float, p_perturbed: float) -> float:
    """Unnormalized comprehensiveness ``max(0, p_full - p_perturbed)``."""
    return max(0.0, _check_prob(p_full, "p_full") - _check_prob(p_perturbed, "p_perturbed"))


def baseline_gap(p_full: float, p_zero: float) -> float | None:
    """``1 - S(X, y, 0)``, or ``None`` when too small to normalize by."""
    gap = max(0.0, p_full - p_zero)
    return gap if gap > DEGENERATE_TOL else None


def _clamp(v: float) -> float:
    return min(1.0, max(0.0, v))


def _sufficiency(p_full: float, p_perturbed: float, gap: float) -> float:
    # (S - S0) / (1 - S0) with S = 1 - max(0, p_full - p_perturbed), 1 - S0 = gap
    return _clamp((gap - max(0.0, p_full - p_perturbed)) / gap)


def _comprehensiveness(p_full: float, p_perturbed: float, gap: float) -> float:
    return _clamp(max(0.0, p_full - p_perturbed) / gap)


def normalized_sufficiency(t: LikelihoodTriple) -> float | None:
    gap = baseline_gap(t.p_full, t.p_zero)
    return None if gap is None else _sufficiency(t.p_full, t.p_perturbed, gap)


def normalized_comprehensiveness(t: LikelihoodTriple) -> float | None:
    gap = baseline_gap(t.p_full, t.p_zero)
    return None if gap is None else _comprehensiveness(t.p_full, t.p_perturbed, gap)


def _soft(fn, p_full, probs, p_zero, average: str) -> float | None:
    probs = np.asarray(probs, dtype=np.float64).ravel()
    if probs.size == 0:
        raise ParameterError("need at least one soft-perturbed probability")
    _check_prob(p_full, "p_full")
    _check_prob(p_zero, "p_zero")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ParameterError("soft-perturbed probabilities must lie in [0, 1]")
    gap = baseline_gap(p_full, p_zero)
    if gap is None:
        return None
    if average == "probs":
        return fn(p_full, float(probs.mean()), gap)
    if average == "metric":
        return float(np.mean([fn(p_full, float(p), gap) for p in probs]))
    raise ParameterError(f"unknown soft averaging mode {average!r}")


def soft_ns(p_full: float, retain_probs, p_zero: float, average: str = "probs") -> float | None:
    """Soft normalized sufficiency over Monte Carlo retain-mode samples.

    ``average="probs"`` averages likelihoods before applying the metric once;
    ``"metric"`` averages per-sample metric values instead.
    """
    return _soft(_sufficiency, p_full, retain_probs, p_zero, average)


def soft_nc(p_full: float, remove_probs, p_zero: float, average: str = "probs") -> float | None:
    return _soft(_comprehensiveness, p_full, remove_probs, p_zero, average)


def aopc(values: Sequence[float] | Mapping[float, float], ratios=DEFAULT_RATIOS) -> float:
    """Mean of a metric over the rationale-ratio grid."""
    if isinstance(values, Mapping):
        missing = [r for r in ratios if r not in values]
        if missing:
            raise ParameterError(f"missing metric values for ratios {missing}")
        values = [values[r] for r in ratios]
    values = list(values)
    if len(values) != len(ratios):
        raise ParameterError(f"expected {len(ratios)} values, got {len(values)}")
    if any(v is None for v in values):
        raise ParameterError("AOPC over an excluded value")
    return float(np.mean(values))


@dataclass(frozen=True)
class MetricRecord:
    instance_id: str
    fa_name: str
    metric: str
    value: float | None
    ratio: float | str | None = None  # float per ratio, "aopc" for the average
    samples: int | None = None
    excluded: str | None = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ParameterError(f"unknown metric {self.metric!r}")
        if (self.value is None) == (self.excluded is None):
            raise ParameterError("a record carries either a value or an exclusion reason")
        if self.metric in HARD_COUNTERPART:
            if self.samples is None:
                raise ParameterError("soft metric records carry a sample count")
        elif self.ratio is None:
            raise ParameterError("hard metric records carry a ratio")


@dataclass(frozen=True)
class DiagnosticityReport:
    metric: str
    fa_name: str
    dataset: str
    pairs: int
    wins: int
    ties: int
    value: float
    p_value: float | None = None


def win_indicators(pairs, epsilon: float = 0.0) -> np.ndarray:
    """1 where the attribution's value beats the random one by more than ``epsilon``."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    return (arr[:, 0] > arr[:, 1] + epsilon).astype(np.int64)


def diagnosticity(
    pairs,
    *,
    epsilon: float = 0.0,
    metric: str = "",
    fa_name: str = "",
    dataset: str = "",
) -> DiagnosticityReport:
    """Fraction of (u, v) pairs where u scores strictly higher; ties lose and are counted."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise ParameterError("diagnosticity needs at least one pair")
    if epsilon < 0:
        raise ParameterError("epsilon must be non-negative")
    wins = int(win_indicators(arr, epsilon).sum())
    ties = int(np.sum(arr[:, 0] == arr[:, 1]))
    n = arr.shape[0]
    return DiagnosticityReport(metric, fa_name, dataset, n, wins, ties, wins / n)


def _midranks(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    ranks = np.empty(values.size)
    _, starts, counts = np.unique(sorted_vals, return_index=True, return_counts=True)
    for start, count in zip(starts, counts):
        ranks[order[start : start + count]] = start + (count + 1) / 2.0
    return ranks, counts


def rank_sum_test(sample_a, sample_b) -> float:
    """Two-sided Wilcoxon rank-sum p-value.

    Exact (enumerating every split of the pooled midranks) when both samples
    have at most 10 values; otherwise the tie-corrected normal approximation
    with continuity correction.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ParameterError("rank-sum test needs two non-empty samples")
    pooled = np.concatenate([a, b])
    n1, n2 = a.size, b.size
    n = n1 + n2
    ranks, tie_counts = _midranks(pooled)
    if np.all(pooled == pooled[0]):
        return 1.0
    w = ranks[:n1].sum()
    mean = n1 * (n + 1) / 2.0
    if n1 <= EXACT_RANK_SUM_MAX and n2 <= EXACT_RANK_SUM_MAX:
        combos = np.array(list(itertools.combinations(range(n), n1)), dtype=np.intp)
        sums = ranks[combos].sum(axis=1)
        extreme = np.abs(sums - mean) >= abs(w - mean) - 1e-9
        return float(extreme.mean())
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = max(0.0, abs(w - mean) - 0.5) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))
