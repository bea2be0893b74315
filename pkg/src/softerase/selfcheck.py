"""Fast invariant checks run by ``softerase selfcheck``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attribution import AttributionScores, deeplift, integrated_gradients, top_k_rationale
from .metrics import (
    LikelihoodTriple,
    normalized_comprehensiveness,
    normalized_sufficiency,
    rank_sum_test,
)
from .model import ModelParams, backward_input_grad, forward, logit
from .numerics import bernoulli_mask, rng_for, softmax
from .perturbation import hard_remove, hard_retain


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def __post_init__(self):
        object.__setattr__(self, "passed", bool(self.passed))


def random_params(rng: np.random.Generator, vocab=12, dim=6, classes=3, scale=0.5) -> ModelParams:
    def u(*shape):
        return rng.uniform(-scale, scale, shape)

    return ModelParams(
        embedding=rng.uniform(-1, 1, (vocab, dim)),
        w_q=u(dim, dim),
        w_k=u(dim, dim),
        w_v=u(dim, dim),
        w_o=u(dim, classes),
        b_o=u(classes),
        max_len=32,
    )


def finite_difference_grad(x: np.ndarray, params: ModelParams, cls: int, h: float = 1e-5):
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (logit(up, params, cls) - logit(down, params, cls)) / (2 * h)
    return grad


def gradient_errors(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, float]:
    """(max relative error, max absolute error over entries with |analytic| < 1e-8)."""
    diff = np.abs(analytic - numeric)
    small = np.abs(analytic) < 1e-8
    rel = diff[~small] / np.abs(analytic[~small])
    return (float(rel.max()) if rel.size else 0.0, float(diff[small].max()) if small.any() else 0.0)


def run_checks(draws: int = 10, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    worst = max(abs(softmax(rng.uniform(-1e6, 1e6, 7)).sum() - 1.0) for _ in range(100))
    out.append(CheckResult("softmax sums to one", worst <= 1e-12, f"max deviation {worst:.2e}"))

    grad_rel = grad_abs = dl_err = ig_excess = 0.0
    for _ in range(draws):
        params = random_params(rng)
        x = rng.uniform(-1, 1, (int(rng.integers(1, 7)), params.dim))
        trace = forward(x, params)
        cls = trace.predicted
        analytic, _ = backward_input_grad(trace, params, cls)
        rel, absolute = gradient_errors(analytic, finite_difference_grad(x, params, cls))
        grad_rel, grad_abs = max(grad_rel, rel), max(grad_abs, absolute)
        delta = logit(x, params, cls) - logit(np.zeros_like(x), params, cls)
        dl_err = max(dl_err, abs(deeplift(x, params, cls).contributions.sum() - delta))
        ig = integrated_gradients(x, params, cls, steps=50).contributions.sum()
        ig_excess = max(ig_excess, abs(ig - delta) - (1e-2 * abs(delta) + 1e-6))
    out.append(
        CheckResult(
            "input gradient vs finite differences",
            grad_rel <= 1e-4 and grad_abs <= 1e-8,
            f"max rel err {grad_rel:.2e}, max abs err on tiny entries {grad_abs:.2e}",
        )
    )
    out.append(CheckResult("DeepLift summation to delta", dl_err <= 1e-6, f"max residual {dl_err:.2e}"))
    out.append(
        CheckResult(
            "IG completeness (50 steps)",
            ig_excess <= 0.0,
            f"worst residual minus (1% |delta| + 1e-6): {ig_excess:.2e}",
        )
    )

    stream = rng_for(seed, [99])
    keep = np.mean([bernoulli_mask(stream.split(s), 0.3, 64).mean() for s in range(2000)])
    bound = 3 * math.sqrt(0.3 * 0.7 / (2000 * 64))
    out.append(CheckResult("Bernoulli keep rate", abs(keep - 0.3) <= bound, f"{keep:.4f} vs 0.3 +/- {bound:.4f}"))

    x = rng.uniform(-1, 1, (5, 4))
    rationale = top_k_rationale(AttributionScores("", "random", rng.uniform(size=5)), 0.4)
    ok = np.array_equal(hard_retain(x, rationale) + hard_remove(x, rationale), x)
    out.append(CheckResult("retain + remove partition", ok, "exact"))

    ns = normalized_sufficiency(LikelihoodTriple(0.9, 0.7, 0.4))
    nc = normalized_comprehensiveness(LikelihoodTriple(0.9, 0.6, 0.4))
    ok = abs(ns - 0.6) < 1e-12 and abs(nc - 0.6) < 1e-12
    out.append(CheckResult("NS / NC hand values", ok, f"NS={ns:.12f} NC={nc:.12f}"))

    p = rank_sum_test([1, 2, 3], [4, 5, 6])
    out.append(CheckResult("exact rank-sum {1,2,3} vs {4,5,6}", abs(p - 0.1) < 1e-12, f"p={p}"))
    return out
