"""Probability schemes over training-set indices.

A scheme is a plain 1-D float64 array with strictly positive entries that
sum to one. Constructors floor raw zero weights at ``PROB_FLOOR`` before
renormalizing so that downstream quantities (importance weights, KL terms,
sums of 1/p_i) stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Smallest admissible raw weight; zeros are lifted here before renormalizing.
PROB_FLOOR = 1e-12
# |sum(p) - 1| tolerance for a valid scheme.
SUM_TOL = 1e-12
# Per-coordinate slack when testing membership in the uniform/gradient-norm box.
BOX_TOL = 1e-12


def check_scheme(p, n: int | None = None) -> np.ndarray:
    """Validate a scheme (1-D, strictly positive, sums to one) and return it
    as a float64 array."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"scheme must be a non-empty 1-D vector, got shape {p.shape}")
    if n is not None and p.size != n:
        raise ValueError(f"scheme has length {p.size}, expected {n}")
    if not np.all(np.isfinite(p)):
        raise ValueError("scheme contains non-finite entries")
    if np.any(p <= 0.0):
        raise ValueError("scheme entries must be strictly positive")
    total = float(p.sum())
    if abs(total - 1.0) > SUM_TOL:
        raise ValueError(f"scheme sums to {total!r}, not 1 within {SUM_TOL}")
    return p


def normalize(weights) -> np.ndarray:
    """Turn nonnegative weights into a scheme proportional to them.

    Every entry is floored at PROB_FLOOR before renormalizing, so exact
    zeros survive as strictly positive probabilities. All-zero, negative,
    or non-finite input is rejected.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError(f"weights must be a non-empty 1-D vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain non-finite entries")
    if np.any(w < 0.0):
        raise ValueError("weights must be nonnegative")
    if not np.any(w > 0.0):
        raise ValueError("weights are all zero; no proportional scheme exists")
    w = np.maximum(w, PROB_FLOOR)
    return w / w.sum()


def uniform(n: int) -> np.ndarray:
    """The uniform scheme over n items, p_i = 1/n."""
    if n < 1:
        raise ValueError(f"need at least one item, got n={n}")
    return np.full(n, 1.0 / n)


def gradient_norm_scheme(norms) -> np.ndarray:
    """Scheme proportional to per-sample gradient norms: p_i = g_i / sum(g).

    If every norm is zero any scheme minimizes the weighted variance, so the
    uniform scheme is returned as the canonical representative.
    """
    g = np.asarray(norms, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ValueError(f"norms must be a non-empty 1-D vector, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("norms contain non-finite entries")
    if np.any(g < 0.0):
        raise ValueError("norms must be nonnegative")
    if not np.any(g > 0.0):
        return uniform(g.size)
    return normalize(g)


def convex_mix(a, b, t: float) -> np.ndarray:
    """Entrywise convex combination t*a + (1-t)*b of two schemes."""
    a = check_scheme(a)
    b = check_scheme(b, n=a.size)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"mixing coefficient must lie in [0, 1], got {t}")
    return t * a + (1.0 - t) * b


@dataclass(frozen=True)
class SchemeBox:
    """Per-coordinate interval [min(u_i, gn_i), max(u_i, gn_i)] between the
    uniform scheme and the gradient-norm scheme."""

    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def from_schemes(cls, pgn, u) -> "SchemeBox":
        pgn = check_scheme(pgn)
        u = check_scheme(u, n=pgn.size)
        return cls(lower=np.minimum(u, pgn), upper=np.maximum(u, pgn))

    def contains(self, p, tol: float = BOX_TOL) -> bool:
        p = check_scheme(p, n=self.lower.size)
        return bool(np.all((p >= self.lower - tol) & (p <= self.upper + tol)))


def in_sandwich_box(p, pgn, u) -> bool:
    """True iff every coordinate of p lies between u_i and pgn_i (either
    order), with BOX_TOL slack against renormalization rounding."""
    return SchemeBox.from_schemes(pgn, u).contains(p)


def sample_indices(p, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw batch_size i.i.d. indices from scheme p (with replacement).

    Linear inverse-CDF sampling; deterministic given the generator state.
    """
    p = check_scheme(p)
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    cdf = np.cumsum(p)
    cdf[-1] = 1.0  # guard the top bin against rounding in the running sum
    return np.searchsorted(cdf, rng.random(batch_size), side="right").astype(np.intp)


def kl_divergence(p, q) -> float:
    """Kullback-Leibler divergence sum(p_i * ln(p_i / q_i)), natural log.

    The true value is nonnegative; rounding can push the sum a few ulp below
    zero when p and q nearly coincide, so the result is clamped at 0.
    """
    p = check_scheme(p)
    q = check_scheme(q, n=p.size)
    return max(0.0, float(np.sum(p * np.log(p / q))))


def total_variation(p, q) -> float:
    """Total variation distance (1/2) * sum |p_i - q_i|, in [0, 1]."""
    p = check_scheme(p)
    q = check_scheme(q, n=p.size)
    return float(0.5 * np.abs(p - q).sum())


def restrict_and_renormalize(values) -> np.ndarray:
    """Renormalize the values a scheme takes on a subset of items into a
    scheme over that subset. Same contract as normalize."""
    return normalize(values)
