"""Feature attributions over the toy classifier, score normalization, rationales."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError, ParameterError, ShapeError
from .model import ModelParams, ForwardTrace, backward_input_grad, forward
from .numerics import RngStream, as_matrix

FA_NAMES = (
    "attention",
    "scaled_attention",
    "input_x_grad",
    "integrated_gradients",
    "deeplift",
    "random",
)
DEEPLIFT_EPS = 1e-8


def normalize_scores(raw) -> np.ndarray:
    """Min-max map onto [0, 1]; a constant vector maps to 0.5 everywhere."""
    r = np.asarray(raw, dtype=np.float64)
    if r.size == 0:
        raise ParameterError("cannot normalize an empty score vector")
    if not np.all(np.isfinite(r)):
        raise NumericError("attribution scores contain non-finite values")
    lo, hi = r.min(), r.max()
    if hi - lo < 1e-12:
        return np.full_like(r, 0.5)
    return np.clip((r - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class AttributionScores:
    instance_id: str
    fa_name: str
    raw: np.ndarray
    normalized: np.ndarray = field(default=None)
    # per-dimension contributions (T x d) for gradient-based methods
    contributions: np.ndarray | None = None

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64).ravel()
        object.__setattr__(self, "raw", raw)
        if self.normalized is None:
            object.__setattr__(self, "normalized", normalize_scores(raw))
        elif np.shape(self.normalized) != raw.shape:
            raise ShapeError("normalized scores must match raw scores in length")

    def __len__(self) -> int:
        return self.raw.shape[0]


def token_scores(contributions: np.ndarray, reduce: str = "sum_abs") -> np.ndarray:
    """Collapse T x d contributions to one score per token.

    ``sum_abs`` keeps signed cancellation inside a token; ``l2`` does not.
    """
    if reduce == "sum_abs":
        return np.abs(contributions.sum(axis=1))
    if reduce == "l2":
        return np.linalg.norm(contributions, axis=1)
    raise ParameterError(f"unknown token reduction {reduce!r}")


def attention_fa(trace: ForwardTrace, instance_id: str = "") -> AttributionScores:
    """Mean attention each token receives over all query rows."""
    return AttributionScores(instance_id, "attention", trace.attention.mean(axis=0))


def scaled_attention_fa(
    trace: ForwardTrace, attention_grad, instance_id: str = ""
) -> AttributionScores:
    g = np.asarray(attention_grad, dtype=np.float64)
    if g.shape != trace.attention.shape:
        raise ShapeError(
            f"attention gradient shape {g.shape} != attention shape {trace.attention.shape}"
        )
    return AttributionScores(
        instance_id, "scaled_attention", (trace.attention * g).mean(axis=0)
    )


def input_x_grad(
    x, input_grad, instance_id: str = "", reduce: str = "sum_abs"
) -> AttributionScores:
    x = as_matrix(x, name="input")
    g = as_matrix(input_grad, name="input gradient")
    if x.shape != g.shape:
        raise ShapeError(f"input shape {x.shape} != gradient shape {g.shape}")
    contrib = x * g
    return AttributionScores(
        instance_id, "input_x_grad", token_scores(contrib, reduce), contributions=contrib
    )


def integrated_gradients(
    x,
    params: ModelParams,
    cls: int,
    steps: int = 50,
    instance_id: str = "",
    reduce: str = "sum_abs",
) -> AttributionScores:
    """Right-endpoint Riemann IG from the all-zero baseline."""
    if steps < 1:
        raise ParameterError("integrated gradients needs at least one step")
    x = as_matrix(x, name="input")
    total = np.zeros_like(x)
    for k in range(1, steps + 1):
        trace = forward((k / steps) * x, params)
        grad, _ = backward_input_grad(trace, params, cls)
        total += grad
    contrib = x * (total / steps)
    return AttributionScores(
        instance_id,
        "integrated_gradients",
        token_scores(contrib, reduce),
        contributions=contrib,
    )


def _logsumexp(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    return np.log(np.exp(s - m).sum(axis=1, keepdims=True)) + m


def _secant(fx, fref, x, xref, local):
    """Rescale multiplier (f(x) - f(x_ref)) / (x - x_ref), local slope when too close."""
    diff = x - xref
    near = np.abs(diff) < DEEPLIFT_EPS
    return np.where(near, local, (fx - fref) / np.where(near, 1.0, diff))


def deeplift(
    x,
    params: ModelParams,
    cls: int,
    instance_id: str = "",
    reduce: str = "sum_abs",
) -> AttributionScores:
    """DeepLift (Rescale rule) against the zero-embedding reference.

    Softmax rows are written as ``exp(s - logsumexp(s))`` so every
    nonlinearity is unary (exp, log) and gets a secant multiplier. The two
    bilinear maps (Q K^T and A V) use the exact midpoint split
    ``d(ab) = mean(b, b_ref) da + mean(a, a_ref) db``. Contributions
    therefore sum to ``logit(x) - logit(0)`` up to rounding.
    """
    x = as_matrix(x, name="input")
    trace = forward(x, params)
    ref = forward(np.zeros_like(x), params)
    t, d = x.shape
    scale = 1.0 / math.sqrt(d)

    s = (trace.q @ trace.k.T) * scale
    s_ref = (ref.q @ ref.k.T) * scale
    # u = exp(s - c) with a shared per-row shift c, so the exp and sum steps see
    # the same scale on both sides; log z is taken from each side's own stable
    # logsumexp because the smaller z may underflow to 0 under the shared shift
    c = np.maximum(s.max(axis=1), s_ref.max(axis=1))[:, None]
    u, u_ref = np.exp(s - c), np.exp(s_ref - c)
    z, z_ref = u.sum(axis=1), u_ref.sum(axis=1)
    lse, lse_ref = _logsumexp(s), _logsumexp(s_ref)
    log_z, log_z_ref = (lse - c)[:, 0], (lse_ref - c)[:, 0]
    w, w_ref = s - lse, s_ref - lse_ref
    a, a_ref = np.exp(w), np.exp(w_ref)

    m_pooled = params.w_o[:, cls]
    m_h = np.broadcast_to(m_pooled / t, (t, d))
    m_a = m_h @ (0.5 * (trace.v + ref.v)).T
    m_v = (0.5 * (a + a_ref)).T @ m_h
    m_w = m_a * _secant(a, a_ref, w, w_ref, a)
    m_lse = -m_w.sum(axis=1)
    m_z = m_lse * _secant(log_z, log_z_ref, z, z_ref, 1.0 / np.maximum(z, 1e-300))
    m_s = m_w + m_z[:, None] * _secant(u, u_ref, s, s_ref, u)
    m_q = scale * (m_s @ (0.5 * (trace.k + ref.k)))
    m_k = scale * (m_s.T @ (0.5 * (trace.q + ref.q)))
    m_x = m_q @ params.w_q.T + m_k @ params.w_k.T + m_v @ params.w_v.T
    contrib = m_x * x
    return AttributionScores(
        instance_id, "deeplift", token_scores(contrib, reduce), contributions=contrib
    )


def random_fa(rng: RngStream, length: int, instance_id: str = "") -> AttributionScores:
    if length < 1:
        raise ParameterError("random attribution needs at least one token")
    return AttributionScores(instance_id, "random", rng.uniform(length))


def compute_fa(
    name: str,
    x,
    params: ModelParams,
    cls: int,
    *,
    rng: RngStream | None = None,
    instance_id: str = "",
    ig_steps: int = 50,
    reduce: str = "sum_abs",
) -> AttributionScores:
    """Dispatch by FA name; ``rng`` is required only for ``random``."""
    if name == "random":
        if rng is None:
            raise ParameterError("random attribution requires an RNG stream")
        return random_fa(rng, np.shape(x)[0], instance_id)
    if name == "integrated_gradients":
        return integrated_gradients(x, params, cls, ig_steps, instance_id, reduce)
    if name == "deeplift":
        return deeplift(x, params, cls, instance_id, reduce)
    trace = forward(x, params)
    if name == "attention":
        return attention_fa(trace, instance_id)
    grad_x, grad_a = backward_input_grad(trace, params, cls)
    if name == "scaled_attention":
        return scaled_attention_fa(trace, grad_a, instance_id)
    if name == "input_x_grad":
        return input_x_grad(x, grad_x, instance_id, reduce)
    raise ParameterError(f"unknown feature attribution {name!r}")


@dataclass(frozen=True, eq=False)
class RationaleMask:
    instance_id: str
    ratio: float
    members: np.ndarray  # bool, one flag per token

    @property
    def size(self) -> int:
        return int(self.members.sum())

    def __len__(self) -> int:
        return self.members.shape[0]


def rationale_size(ratio: float, length: int) -> int:
    return max(1, math.ceil(ratio * length))


def top_k_rationale(scores: AttributionScores, ratio: float) -> RationaleMask:
    """Top ``max(1, ceil(ratio*T))`` tokens by raw score; ties go to the lower index."""
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"rationale ratio must lie in (0, 1], got {ratio}")
    t = len(scores)
    k = rationale_size(ratio, t)
    order = np.argsort(-scores.raw, kind="stable")
    members = np.zeros(t, dtype=bool)
    members[order[:k]] = True
    return RationaleMask(scores.instance_id, ratio, members)


def load_attributions(path: str | Path) -> dict[tuple[str, str], AttributionScores]:
    """Read ``{"id", "fa", "scores"}`` records computed outside the engine."""
    out: dict[tuple[str, str], AttributionScores] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read attribution file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rid, fa, scores = obj["id"], obj["fa"], obj["scores"]
            raw = np.array(scores, dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: cannot parse attribution record: {exc}") from exc
        if raw.ndim != 1 or raw.size == 0 or not np.all(np.isfinite(raw)):
            raise DataError(f"{path}:{lineno}: scores must be a non-empty finite list")
        if (rid, fa) in out:
            raise DataError(f"{path}:{lineno}: duplicate scores for ({rid!r}, {fa!r})")
        out[(rid, fa)] = AttributionScores(rid, fa, raw)
    return out
