"""Convergence-speed analytics for importance-sampled one-step updates.

The convergence speed of a scheme p is the negative expected one-step change
in squared distance to a reference point theta_star, where the expectation
runs over a single index i drawn from p and the update uses the weighted
gradient G_i = (1/(N p_i)) grad_i.

Two independent routes compute it: ``speed_oracle`` enumerates all N
one-draw steps through the real optimizer step functions and averages with
weights p_i (exact, no sampling); the ``speed_*_closed`` functions evaluate
the per-optimizer algebraic expansions. Their agreement is the module's
central correctness property and is what the test suite checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import optim
from .schemes import check_scheme, gradient_norm_scheme, in_sandwich_box, normalize, uniform

# relative slack when certifying the H(pgn) <= H(p) <= H(u) chain
SANDWICH_SLACK = 1e-9


def variance_functional(p, norms) -> float:
    """H(p) = sum_i norms_i^2 / p_i, the scheme-dependent part of the
    one-draw estimator's second moment (scaled by N^2)."""
    p = check_scheme(p)
    g = np.asarray(norms, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError(f"norms have shape {g.shape}, scheme has shape {p.shape}")
    if np.any(g < 0.0):
        raise ValueError("norms must be nonnegative")
    return float(np.sum(g * g / p))


@dataclass(frozen=True)
class SpeedContext:
    """One evaluation point: current parameters, reference point, the
    per-item gradient table at theta, and the scheme under study."""

    theta: np.ndarray
    theta_star: np.ndarray
    grads: np.ndarray
    scheme: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        theta_star = np.asarray(self.theta_star, dtype=np.float64)
        grads = np.asarray(self.grads, dtype=np.float64)
        scheme = check_scheme(self.scheme)
        if theta.ndim != 1 or theta.shape != theta_star.shape:
            raise ValueError(
                f"theta {theta.shape} and theta_star {theta_star.shape} must be "
                "1-D and equal length"
            )
        if grads.ndim != 2 or grads.shape != (scheme.size, theta.size):
            raise ValueError(
                f"gradient table must have shape {(scheme.size, theta.size)}, "
                f"got {grads.shape}"
            )
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "theta_star", theta_star)
        object.__setattr__(self, "grads", grads)
        object.__setattr__(self, "scheme", scheme)

    @property
    def n(self) -> int:
        return self.scheme.size

    def importance_rows(self) -> np.ndarray:
        """G_i = (1/(N p_i)) grad_i for every item, stacked [N, dim]."""
        w = (1.0 / self.n) / self.scheme
        return w[:, None] * self.grads


def speed_oracle(ctx: SpeedContext, state) -> float:
    """Ground truth by exact enumeration: apply one B=1 step per item
    through the real optimizer and average the distance change with
    weights p_i."""
    rows = ctx.importance_rows()
    d0 = ctx.theta - ctx.theta_star
    base = float(d0 @ d0)
    total = 0.0
    for i in range(ctx.n):
        theta_new, _ = optim.step(state, ctx.theta, rows[i])
        if not np.all(np.isfinite(theta_new)):
            raise optim.DivergenceError(f"one-draw step on item {i} went non-finite")
        diff = theta_new - ctx.theta_star
        total += ctx.scheme[i] * (float(diff @ diff) - base)
    return -total


def speed_sgd_closed(ctx: SpeedContext, state: optim.Sgd) -> float:
    """2 eta d.E[G] - eta^2 E[G.G], both expectations as exact sums."""
    if not isinstance(state, optim.Sgd):
        raise TypeError(f"expected Sgd state, got {type(state).__name__}")
    rows = ctx.importance_rows()
    d = ctx.theta - ctx.theta_star
    e_g = ctx.scheme @ rows
    e_gg = float(ctx.scheme @ (rows * rows).sum(axis=1))
    return 2.0 * state.lr * float(d @ e_g) - state.lr**2 * e_gg


def speed_momentum_closed(ctx: SpeedContext, state: optim.Momentum) -> float:
    """Five-term expansion around v_t = mu v_{t-1} + G; the prior velocity
    is a constant with respect to the draw."""
    if not isinstance(state, optim.Momentum):
        raise TypeError(f"expected Momentum state, got {type(state).__name__}")
    rows = ctx.importance_rows()
    d = ctx.theta - ctx.theta_star
    v = np.zeros(ctx.theta.size) + state.velocity
    mu, lr = state.momentum, state.lr
    e_g = ctx.scheme @ rows
    e_gg = float(ctx.scheme @ (rows * rows).sum(axis=1))
    return (
        -(lr**2) * mu**2 * float(v @ v)
        - 2.0 * lr**2 * mu * float(v @ e_g)
        - lr**2 * e_gg
        + 2.0 * lr * mu * float(d @ v)
        + 2.0 * lr * float(d @ e_g)
    )


def _require_scalar_mode(state) -> None:
    # the algebra below tracks a single ||G||^2 accumulator; no closed form
    # exists for the elementwise variant
    if state.second_moment != "scalar":
        raise ValueError(
            "closed-form speed is defined for the scalar second-moment mode only"
        )


def speed_rmsprop_closed(ctx: SpeedContext, state: optim.RmsProp) -> float:
    """Exact sum of the per-item terms with denominator
    eps + sqrt(alpha v + (1-alpha)||G_i||^2)."""
    if not isinstance(state, optim.RmsProp):
        raise TypeError(f"expected RmsProp state, got {type(state).__name__}")
    _require_scalar_mode(state)
    rows = ctx.importance_rows()
    d = ctx.theta - ctx.theta_star
    sq = (rows * rows).sum(axis=1)
    denom = state.eps + np.sqrt(state.alpha * state.v + (1.0 - state.alpha) * sq)
    terms = state.lr**2 * sq / denom**2 - 2.0 * state.lr * (rows @ d) / denom
    return -float(ctx.scheme @ terms)


def speed_adam_closed(ctx: SpeedContext, state: optim.Adam) -> float:
    """Exact sum over items of the bias-corrected first-moment step terms.

    Both the quadratic and the linear term carry the same denominator
    eps + sqrt(v_t / (1 - beta2^t)); the quadratic term divides by
    (1 - beta1^t)^2 and the linear term by (1 - beta1^t) to the first
    power, matching one bias-corrected m_t per factor of the step.
    """
    if not isinstance(state, optim.Adam):
        raise TypeError(f"expected Adam state, got {type(state).__name__}")
    _require_scalar_mode(state)
    rows = ctx.importance_rows()
    d = ctx.theta - ctx.theta_star
    t = state.t + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    m_prev = np.zeros(ctx.theta.size) + state.m
    m_rows = state.beta1 * m_prev + (1.0 - state.beta1) * rows
    sq = (rows * rows).sum(axis=1)
    v_rows = state.beta2 * state.v + (1.0 - state.beta2) * sq
    denom = state.eps + np.sqrt(v_rows / bc2)
    m_sq = (m_rows * m_rows).sum(axis=1)
    terms = state.lr**2 * m_sq / (denom**2 * bc1**2) - 2.0 * state.lr * (m_rows @ d) / (
        denom * bc1
    )
    return -float(ctx.scheme @ terms)


def speed_closed(ctx: SpeedContext, state) -> float:
    """Closed-form speed, dispatched on the optimizer state type."""
    if isinstance(state, optim.Sgd):
        return speed_sgd_closed(ctx, state)
    if isinstance(state, optim.Momentum):
        return speed_momentum_closed(ctx, state)
    if isinstance(state, optim.RmsProp):
        return speed_rmsprop_closed(ctx, state)
    if isinstance(state, optim.Adam):
        return speed_adam_closed(ctx, state)
    raise TypeError(f"unknown optimizer state {type(state).__name__}")


class SandwichCertificate(NamedTuple):
    h_gradnorm: float
    h_scheme: float
    h_uniform: float
    ok: bool


def sandwich_certificate(u, pgn, p, norms) -> SandwichCertificate:
    """Certify H(pgn) <= H(p) <= H(u) for a scheme inside the box spanned
    coordinate-wise by u and pgn.

    Membership is a hypothesis, not a conclusion: a scheme outside the box
    is rejected because the chain is not guaranteed there.
    """
    u = check_scheme(u)
    pgn = check_scheme(pgn, n=u.size)
    p = check_scheme(p, n=u.size)
    if not in_sandwich_box(p, pgn, u):
        lo = np.minimum(u, pgn)
        hi = np.maximum(u, pgn)
        bad = int(np.argmax((p < lo) | (p > hi)))
        raise ValueError(
            f"scheme leaves the box at coordinate {bad}: "
            f"p={p[bad]:.6g} not in [{lo[bad]:.6g}, {hi[bad]:.6g}]"
        )
    h_gn = variance_functional(pgn, norms)
    h_p = variance_functional(p, norms)
    h_u = variance_functional(u, norms)
    ok = h_gn <= h_p * (1.0 + SANDWICH_SLACK) and h_p <= h_u * (1.0 + SANDWICH_SLACK)
    return SandwichCertificate(h_gn, h_p, h_u, ok)


def random_box_scheme(rng: np.random.Generator, pgn, u) -> np.ndarray | None:
    """One random scheme inside the u/pgn box: independent per-coordinate
    mixes, renormalized. Renormalization can push a coordinate outside the
    box, so the candidate is re-checked and None is returned on violation."""
    t = rng.random(len(pgn))
    raw = t * np.asarray(u) + (1.0 - t) * np.asarray(pgn)
    p = raw / raw.sum()
    return p if in_sandwich_box(p, pgn, u) else None


def random_instance(
    rng: np.random.Generator,
    kind: str,
    n_range: tuple[int, int] = (5, 20),
    dim_range: tuple[int, int] = (3, 10),
):
    """A random (SpeedContext, optimizer state) pair with hyperparameters
    and prior state drawn from their valid ranges. Shared by the tests and
    the speed-check CLI."""
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    dim = int(rng.integers(dim_range[0], dim_range[1] + 1))
    ctx = SpeedContext(
        theta=rng.normal(size=dim),
        theta_star=rng.normal(size=dim),
        grads=rng.normal(size=(n, dim)),
        scheme=normalize(rng.random(n) + 0.01),
    )
    lr = float(10.0 ** rng.uniform(-3, -1))
    kind = kind.lower()
    if kind == "sgd":
        state = optim.Sgd(lr=lr)
    elif kind == "momentum":
        state = optim.Momentum(
            lr=lr, momentum=float(rng.uniform(0.0, 0.99)), velocity=rng.normal(size=dim)
        )
    elif kind == "rmsprop":
        state = optim.RmsProp(
            lr=lr,
            alpha=float(rng.uniform(0.5, 0.999)),
            eps=float(10.0 ** rng.uniform(-8, -2)),
            second_moment="scalar",
            v=float(rng.uniform(0.0, 2.0)),
        )
    elif kind == "adam":
        state = optim.Adam(
            lr=lr,
            beta1=float(rng.uniform(0.0, 0.95)),
            beta2=float(rng.uniform(0.9, 0.9999)),
            eps=float(10.0 ** rng.uniform(-8, -2)),
            second_moment="scalar",
            m=0.1 * rng.normal(size=dim),
            v=float(rng.uniform(0.0, 2.0)),
            t=int(rng.integers(0, 50)),
        )
    else:
        raise ValueError(f"unknown optimizer {kind!r}")
    return ctx, state


def gradient_norm_scheme_for(ctx: SpeedContext) -> np.ndarray:
    """The norm-proportional scheme for the context's gradient table."""
    return gradient_norm_scheme(np.linalg.norm(ctx.grads, axis=1))


def uniform_for(ctx: SpeedContext) -> np.ndarray:
    return uniform(ctx.n)
