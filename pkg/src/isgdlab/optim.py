"""Minibatch update rules with importance-weighted gradient estimates.

The estimate for a batch drawn from scheme p is G = (1/B) sum_i w_i grad_i
with w_i = 1/(N p_i). Weights are plain constants applied to already-computed
gradients; nothing here differentiates through them.

Each step_* function is pure: it takes (state, theta, G) and returns the new
parameters (plus the new state for the stateful rules). RMSProp and ADAM each
come in two flavours selected by the state's second_moment field: "scalar"
keeps one accumulator fed by ||G||^2, "elementwise" keeps a per-coordinate
accumulator fed by G^2.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .schemes import check_scheme

# experiment defaults
LEARNING_RATE = 0.01
MOMENTUM = 0.5
RMSPROP_ALPHA = 0.99
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
EPS = 1e-8

_SECOND_MOMENT_MODES = ("scalar", "elementwise")


class DivergenceError(RuntimeError):
    """Raised when a gradient estimate or parameter vector goes non-finite."""


def importance_weight(n: int, p_i: float) -> float:
    """w_i = 1/(n p_i), written as (1/n)/p_i so the uniform scheme yields
    exactly 1.0."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if p_i <= 0.0:
        raise ValueError(f"probability must be positive, got {p_i}")
    return (1.0 / n) / p_i


@dataclass(frozen=True)
class ImportanceEstimate:
    """One minibatch gradient estimate: the averaged weighted vector plus the
    batch indices and weights it was built from."""

    vector: np.ndarray
    indices: np.ndarray
    weights: np.ndarray


def build_estimate(
    grads, p, indices, weighted: bool = True, aligned: bool = False
) -> ImportanceEstimate:
    """G = (1/B) sum_batch w_i grad_i.

    grads is the full per-item table [N, P] (rows picked by indices), or,
    with aligned=True, precomputed batch rows [B, P] already in indices
    order. The flag is explicit because a full-dataset batch makes the two
    shapes coincide. With weighted=False every w_i is forced to 1, which
    makes the estimate a plain batch mean and, for non-uniform p, biased.
    """
    p = check_scheme(p)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1 or indices.size == 0:
        raise ValueError("batch must contain at least one index")
    if indices.min() < 0 or indices.max() >= p.size:
        raise ValueError(f"batch indices out of range for {p.size} items")
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2:
        raise ValueError(f"gradients must be 2-D, got shape {grads.shape}")
    if aligned:
        if grads.shape[0] != indices.size:
            raise ValueError(
                f"aligned rows ({grads.shape[0]}) do not match the batch "
                f"({indices.size})"
            )
        rows = grads
    else:
        if grads.shape[0] != p.size:
            raise ValueError(
                f"gradient table rows ({grads.shape[0]}) do not match the "
                f"dataset ({p.size}); pass aligned=True for batch rows"
            )
        rows = grads[indices]
    if weighted:
        weights = (1.0 / p.size) / p[indices]
    else:
        weights = np.ones(indices.size)
    vector = (weights[:, None] * rows).sum(axis=0) / indices.size
    if not np.all(np.isfinite(vector)):
        raise DivergenceError("gradient estimate contains non-finite entries")
    return ImportanceEstimate(vector=vector, indices=indices, weights=weights)


def _check_hyper(name: str, value: float, low: float, high: float) -> None:
    if not low <= value <= high:
        raise ValueError(f"{name} must lie in [{low}, {high}], got {value}")


@dataclass(frozen=True)
class Sgd:
    lr: float = LEARNING_RATE

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")


@dataclass(frozen=True)
class Momentum:
    lr: float = LEARNING_RATE
    momentum: float = MOMENTUM
    velocity: np.ndarray | float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        _check_hyper("momentum", self.momentum, 0.0, 1.0)


@dataclass(frozen=True)
class RmsProp:
    lr: float = LEARNING_RATE
    alpha: float = RMSPROP_ALPHA
    eps: float = EPS
    second_moment: str = "scalar"
    v: np.ndarray | float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        _check_hyper("alpha", self.alpha, 0.0, 1.0)
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.second_moment not in _SECOND_MOMENT_MODES:
            raise ValueError(f"second_moment must be one of {_SECOND_MOMENT_MODES}")


@dataclass(frozen=True)
class Adam:
    lr: float = LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = EPS
    second_moment: str = "scalar"
    m: np.ndarray | float = 0.0
    v: np.ndarray | float = 0.0
    t: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        _check_hyper("beta1", self.beta1, 0.0, 1.0)
        _check_hyper("beta2", self.beta2, 0.0, 1.0)
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.second_moment not in _SECOND_MOMENT_MODES:
            raise ValueError(f"second_moment must be one of {_SECOND_MOMENT_MODES}")
        if self.t < 0:
            raise ValueError(f"step counter must be nonnegative, got {self.t}")


def _check_estimate(G: np.ndarray) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if not np.all(np.isfinite(G)):
        raise DivergenceError("gradient estimate contains non-finite entries")
    return G


def step_sgd(state: Sgd, theta, G) -> np.ndarray:
    """theta - lr * G."""
    G = _check_estimate(G)
    return theta - state.lr * G


def step_momentum(state: Momentum, theta, G):
    """v_t = mu v_{t-1} + G; theta' = theta - lr v_t."""
    G = _check_estimate(G)
    v = state.momentum * state.velocity + G
    theta_new = theta - state.lr * v
    return theta_new, dataclasses.replace(state, velocity=v)


def step_rmsprop(state: RmsProp, theta, G):
    """v_t = alpha v_{t-1} + (1-alpha) s, theta' = theta - (lr/(eps+sqrt(v_t))) G,
    where s is ||G||^2 (scalar mode) or G^2 per coordinate (elementwise)."""
    G = _check_estimate(G)
    if state.second_moment == "scalar":
        s = float(G @ G)
    else:
        s = G * G
    v = state.alpha * state.v + (1.0 - state.alpha) * s
    scale = state.lr / (state.eps + np.sqrt(v))
    theta_new = theta - scale * G
    return theta_new, dataclasses.replace(state, v=v)


def step_adam(state: Adam, theta, G):
    """m_t = b1 m + (1-b1)G; v_t = b2 v + (1-b2)s; bias-corrected step
    theta' = theta - lr mhat/(eps + sqrt(vhat))."""
    G = _check_estimate(G)
    t = state.t + 1
    if state.second_moment == "scalar":
        s = float(G @ G)
    else:
        s = G * G
    m = state.beta1 * state.m + (1.0 - state.beta1) * G
    v = state.beta2 * state.v + (1.0 - state.beta2) * s
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    theta_new = theta - state.lr * m_hat / (state.eps + np.sqrt(v_hat))
    return theta_new, dataclasses.replace(state, m=m, v=v, t=t)


def step(state, theta, G):
    """Single dispatcher: (state, theta, G) -> (theta', state')."""
    if isinstance(state, Sgd):
        return step_sgd(state, theta, G), state
    if isinstance(state, Momentum):
        return step_momentum(state, theta, G)
    if isinstance(state, RmsProp):
        return step_rmsprop(state, theta, G)
    if isinstance(state, Adam):
        return step_adam(state, theta, G)
    raise TypeError(f"unknown optimizer state {type(state).__name__}")


def make_state(
    name: str,
    lr: float = LEARNING_RATE,
    momentum: float = MOMENTUM,
    alpha: float = RMSPROP_ALPHA,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = EPS,
    second_moment: str = "scalar",
):
    """Fresh optimizer state by name: sgd, momentum, rmsprop, or adam.

    Training entry point, so a strictly positive learning rate is required
    here (the state types themselves tolerate lr=0 for analytics).
    """
    name = name.lower()
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if name == "sgd":
        return Sgd(lr=lr)
    if name == "momentum":
        return Momentum(lr=lr, momentum=momentum)
    if name == "rmsprop":
        return RmsProp(lr=lr, alpha=alpha, eps=eps, second_moment=second_moment)
    if name == "adam":
        return Adam(lr=lr, beta1=beta1, beta2=beta2, eps=eps, second_moment=second_moment)
    raise ValueError(f"unknown optimizer {name!r}")
