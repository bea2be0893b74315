"""Hard erasure, Bernoulli soft erasure, and the Gaussian / attention-mask variants.

Hard erasure replaces token embeddings with zeros rather than deleting tokens,
so sequence length is unchanged and removing everything gives exactly the
zero baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attribution import RationaleMask
from .errors import ParameterError, ShapeError
from .model import ForwardTrace, ModelParams, forward
from .numerics import RngStream, as_matrix, uniform_grid

SOFT_MODES = ("retain", "remove")
GAUSSIAN_VARIANTS = ("scaled_importance", "variance_importance")
# variance grid tuned over for the Gaussian variants
SIGMA2_GRID = (0.005, 0.01, 0.05, 0.1, 0.5, 1.0, 2.0)
ATTENTION_MASK_FLOOR = 1e-12


def zero_baseline(x) -> np.ndarray:
    return np.zeros_like(as_matrix(x, name="input"))


def _check_rationale(x: np.ndarray, rationale: RationaleMask) -> np.ndarray:
    members = np.asarray(rationale.members, dtype=bool)
    if members.shape != (x.shape[0],):
        raise ShapeError(
            f"rationale covers {members.shape[0]} tokens, input has {x.shape[0]}"
        )
    return members


def hard_retain(x, rationale: RationaleMask) -> np.ndarray:
    """Keep rationale rows, zero the rest."""
    x = as_matrix(x, name="input")
    members = _check_rationale(x, rationale)
    return np.where(members[:, None], x, 0.0)


def hard_remove(x, rationale: RationaleMask) -> np.ndarray:
    """Zero rationale rows, keep the rest."""
    x = as_matrix(x, name="input")
    members = _check_rationale(x, rationale)
    return np.where(members[:, None], 0.0, x)


@dataclass(frozen=True)
class SoftPerturbConfig:
    mode: str
    rng: RngStream
    samples: int = 16

    def __post_init__(self):
        if self.mode not in SOFT_MODES:
            raise ParameterError(f"soft perturbation mode must be one of {SOFT_MODES}")
        if self.samples < 1:
            raise ParameterError("need at least one Monte Carlo sample")


def _check_importances(a, length: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (length,):
        raise ParameterError(f"expected {length} importances, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
        raise ParameterError("importances must be normalized into [0, 1]")
    return a


def soft_masks(a, cfg: SoftPerturbConfig, dim: int) -> np.ndarray:
    """Binary masks of shape (M, T, dim).

    Entry ``[s, i, :]`` equals ``bernoulli_mask(cfg.rng.split(s, i), q_i, dim)``
    with ``q = a`` when retaining and ``q = 1 - a`` when removing.
    """
    a = np.asarray(a, dtype=np.float64)
    q = a if cfg.mode == "retain" else 1.0 - a
    u = uniform_grid(cfg.rng, (cfg.samples, a.shape[0]), dim)
    return (u < q[None, :, None]).astype(np.int8)


def soft_perturb(x, a, cfg: SoftPerturbConfig) -> np.ndarray:
    """``M`` dropout-style perturbations of ``x`` stacked as (M, T, d)."""
    x = as_matrix(x, name="input")
    a = _check_importances(a, x.shape[0])
    return x[None, :, :] * soft_masks(a, cfg, x.shape[1])


@dataclass(frozen=True)
class GaussianPerturbConfig:
    variant: str
    sigma2: float
    rng: RngStream
    mu: float = 0.0

    def __post_init__(self):
        if self.variant not in GAUSSIAN_VARIANTS:
            raise ParameterError(
                f"Gaussian variant must be one of {GAUSSIAN_VARIANTS}, got {self.variant!r}"
            )
        if not self.sigma2 > 0:
            raise ParameterError("sigma2 must be positive")


def gaussian_perturb(x, a, cfg: GaussianPerturbConfig) -> np.ndarray:
    """Multiplicative Gaussian noise tied to token importance.

    ``scaled_importance``: ``x' = x + gamma * a_i * x`` with
    ``gamma ~ N(mu, sigma2)`` per entry. ``variance_importance``:
    ``x' = x + gamma * x`` with ``gamma ~ N(mu, a_i * sigma2)``; a token with
    ``a_i = 0`` is left untouched when ``mu = 0``.
    """
    x = as_matrix(x, name="input")
    a = _check_importances(a, x.shape[0])
    z = cfg.rng.normal(x.size).reshape(x.shape)
    if cfg.variant == "scaled_importance":
        gamma = cfg.mu + np.sqrt(cfg.sigma2) * z
        return x + gamma * a[:, None] * x
    gamma = cfg.mu + np.sqrt(a * cfg.sigma2)[:, None] * z
    return x + gamma * x


def continuous_attention_mask(trace: ForwardTrace, a, params: ModelParams) -> np.ndarray:
    """Class probabilities with attention to token j scaled by ``a_j`` before renormalizing."""
    a = _check_importances(a, trace.length)
    return forward(trace.x, params, attn_bias=np.log(a + ATTENTION_MASK_FLOOR)).probs
