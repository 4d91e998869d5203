"""Weighted smooth maximum approximations with analytical first derivatives.

Both variants approximate max_k(w_k * p_k) with a sharpness constant
alpha > 0.  The radial weights w_k decay as a Gaussian in the radial index so
that pixels near the transform origin dominate the bag prediction; w_min is
the weight of the sample furthest from the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WEIGHTED_SOFTMAX = "weighted_softmax"
WEIGHTED_QUASIMAX = "weighted_quasimax"
HARD_MAX = "hard_max"
VARIANTS = (WEIGHTED_SOFTMAX, WEIGHTED_QUASIMAX, HARD_MAX)


@dataclass(frozen=True)
class SmoothMaxConfig:
    alpha: float = 4.0
    w_min: float = 0.5
    variant: str = WEIGHTED_SOFTMAX
    n_r: int = 30

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 < self.w_min <= 1.0:
            raise ValueError(f"w_min must lie in (0, 1], got {self.w_min}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n_r < 1:
            raise ValueError(f"n_r must be >= 1, got {self.n_r}")


@dataclass(frozen=True)
class RadialWeights:
    """Gaussian-decaying weights over the radial index, w_0 = 1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a non-empty 1-D array")
        if w[0] != 1.0 or np.any(w <= 0) or np.any(w > 1.0) or np.any(np.diff(w) > 0):
            raise ValueError("weights must start at 1, stay in (0, 1] and be non-increasing")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size


def radial_weights(cfg: SmoothMaxConfig) -> RadialWeights:
    """w_k = exp(-k^2 / (2 sigma^2)) with sigma = (N_r - 1) / sqrt(-2 log w_min).

    w_min = 1 returns all ones (the sigma -> infinity limit taken
    analytically); that setting recovers the unweighted variants exactly.
    """
    if cfg.w_min == 1.0 or cfg.n_r == 1:
        return RadialWeights(np.ones(cfg.n_r))
    sigma = (cfg.n_r - 1) / math.sqrt(-2.0 * math.log(cfg.w_min))
    k = np.arange(cfg.n_r, dtype=np.float64)
    return RadialWeights(np.exp(-(k**2) / (2.0 * sigma**2)))


def _prepare(bag, weights):
    p = np.asarray(bag, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("bag must contain at least one prediction")
    w = weights.weights if isinstance(weights, RadialWeights) else np.asarray(weights, np.float64)
    if w.size < p.size:
        raise ValueError(f"{p.size} predictions but only {w.size} weights")
    return p, w[: p.size]


def weighted_softmax(bag, weights, alpha: float):
    """Softmax-weighted mean of w_k*p_k: sum(z*e^(a*z)) / sum(e^(a*z)), z = w*p.

    Returns (value, gradient w.r.t. each p_k).  Max-subtraction keeps the
    exponentials bounded for any alpha*max(w*p) up to the float64 exp range.
    """
    p, w = _prepare(bag, weights)
    z = w * p
    m = z.max()
    e = np.exp(alpha * (z - m))
    s = e / e.sum()
    value = float(np.dot(s, z))
    grad = w * s * (1.0 + alpha * (z - value))
    return value, grad


def weighted_quasimax(bag, weights, alpha: float):
    """(1/alpha) * log(sum e^(a*w_k*p_k)) - log(n)/alpha via stable log-sum-exp.

    The gradient is the softmax distribution over alpha*w_k*p_k scaled by
    w_k per element.
    """
    p, w = _prepare(bag, weights)
    z = w * p
    m = z.max()
    e = np.exp(alpha * (z - m))
    total = e.sum()
    value = float(m + math.log(total) / alpha - math.log(p.size) / alpha)
    grad = w * (e / total)
    return value, grad


def hard_max(bag):
    """Exact max with a one-hot subgradient at the first argmax.

    Evaluation baseline only; its discontinuous derivative keeps it out of
    training.
    """
    p = np.asarray(bag, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("bag must contain at least one prediction")
    k = int(np.argmax(p))
    grad = np.zeros(p.size)
    grad[k] = 1.0
    return float(p[k]), grad


def bag_prediction(bag, weights, cfg: SmoothMaxConfig):
    """Dispatch on the configured variant; returns (value, gradient)."""
    if cfg.variant == WEIGHTED_SOFTMAX:
        return weighted_softmax(bag, weights, cfg.alpha)
    if cfg.variant == WEIGHTED_QUASIMAX:
        return weighted_quasimax(bag, weights, cfg.alpha)
    return hard_max(bag)
