"""Staleness error bounds, stability constants and smoothness estimates.

Notation: ``n`` parameters, budget ``B`` refreshes per step, ``K = n // B``
full blocks and ``r = n % B`` leftover coordinates.  With per-step motion at
most ``delta`` and coordinate-wise difference-gradient Lipschitz constant
``L_eps``, the buffer is within

    (L_eps * delta / 2) * (B*K*(K-1) + 2*r*K)

of the fresh difference gradient.  For PL objectives with staleness factor
``tau = n/B - 1`` the per-step contraction of ``f - f*`` is at most
``1 - 2*mu*C1/C2`` with

    C1 = 1/alpha - (L/2)(1 + n*tau)
    C2 = 1/alpha**2 + L*n*tau/alpha + (L*n*tau)**2 / 4
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .objectives import BatchSpec, ConfigError, Objective
from .optimizer import fd_gradient
from .params import ParameterStore

__all__ = [
    "CoherenceWindow",
    "SmoothnessEstimate",
    "StabilityReport",
    "UnstableConfigError",
    "convergence_rate",
    "error_bound",
    "estimate_L_eps",
    "grad_diff",
    "LogLinearFit",
    "loglinear_fit",
    "max_stable_lr",
    "moving_average",
    "secant_L_eps",
    "stability_constants",
    "stability_report",
    "staleness_factor",
    "track_delta",
]


class UnstableConfigError(ValueError):
    """Stability constants are non-positive; no contraction is guaranteed."""


def error_bound(n: int, budget: int, L_eps: float, delta: float) -> float:
    if not 1 <= budget <= n:
        raise ConfigError(f"budget must lie in [1, n={n}], got {budget}")
    if L_eps < 0 or delta < 0:
        raise ValueError("L_eps and delta must be non-negative")
    K, r = divmod(n, budget)
    return 0.5 * L_eps * delta * (budget * K * (K - 1) + 2 * r * K)


def staleness_factor(n: int, budget: int) -> float:
    """``n/B - 1``; ``ceil(n/B) - 1`` with a warning when ``B`` does not divide ``n``."""
    if not 1 <= budget <= n:
        raise ConfigError(f"budget must lie in [1, n={n}], got {budget}")
    if n % budget:
        warnings.warn(f"budget {budget} does not divide n={n}; using ceil(n/B) - 1", stacklevel=2)
        return float(-(-n // budget) - 1)
    return n / budget - 1.0


def stability_constants(alpha: float, L: float, n: int, tau: float) -> tuple[float, float]:
    if alpha <= 0 or L <= 0:
        raise ValueError("alpha and L must be positive")
    c1 = 1.0 / alpha - 0.5 * L * (1.0 + n * tau)
    c2 = 1.0 / alpha**2 + L * n * tau / alpha + (L * n * tau) ** 2 / 4.0
    return c1, c2


def convergence_rate(mu: float, C1: float, C2: float) -> float:
    """Guaranteed per-step factor ``1 - 2*mu*C1/C2``.

    ``C1 == 0`` sits on the stability boundary and returns 1.0 with a
    warning; negative ``C1`` or non-positive ``C2`` raise.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    if C1 < 0 or C2 <= 0:
        raise UnstableConfigError(f"unstable configuration: C1={C1}, C2={C2}")
    if C1 == 0:
        warnings.warn("C1 == 0: no guaranteed progress", stacklevel=2)
        return 1.0
    rate = 1.0 - 2.0 * mu * C1 / C2
    if rate <= 0:
        raise UnstableConfigError(f"rate {rate} is not in (0, 1); check mu against L")
    return rate


def max_stable_lr(L: float, n: int, tau: float) -> float:
    """Largest ``alpha`` keeping ``C1 > 0``.

    The constants are worst-case; stable runs above this value are common.
    """
    if L <= 0:
        raise ValueError("L must be positive")
    return 2.0 / (L * (1.0 + n * tau))


@dataclass
class StabilityReport:
    tau: float
    C1: float
    C2: float
    rate: float | None
    max_alpha: float
    mu: float
    stable: bool


def stability_report(alpha: float, L: float, mu: float, n: int, budget: int) -> StabilityReport:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tau = staleness_factor(n, budget)
    c1, c2 = stability_constants(alpha, L, n, tau)
    stable = c1 > 0 and c2 > 0
    rate = None
    if stable:
        try:
            rate = convergence_rate(mu, c1, c2)
        except UnstableConfigError:
            stable = False
    return StabilityReport(tau, c1, c2, rate, max_stable_lr(L, n, tau), mu, stable)


# -- empirical quantities ---------------------------------------------------


@dataclass
class SmoothnessEstimate:
    L: float
    L_eps: float
    samples: int
    epsilon: float

    def merge(self, other: "SmoothnessEstimate") -> "SmoothnessEstimate":
        return SmoothnessEstimate(
            max(self.L, other.L),
            max(self.L_eps, other.L_eps),
            self.samples + other.samples,
            self.epsilon,
        )


def estimate_L_eps(
    objective: Objective,
    center: ParameterStore,
    epsilon: float,
    n_pairs: int = 256,
    seed: int = 0,
    radius: float = 1.0,
    pair_distance: float | None = None,
    batch: BatchSpec | None = None,
    reference_epsilon: float = 1e-6,
) -> SmoothnessEstimate:
    """Sampled lower bounds on ``L_eps`` and ``L``.

    ``x`` is uniform in the box of half-width ``radius`` around ``center``;
    ``y = x + h*u`` with ``h = pair_distance`` (default ``radius / 4``) and
    ``u`` alternating between a random coordinate axis and a random unit
    direction.  ``L_eps`` is the largest ``max_i |g_i(x) - g_i(y)| / |x - y|``
    over pairs, ``g`` the central difference at ``epsilon``.  ``L`` uses the
    same pairs with the objective's analytic gradient when it has one and a
    central difference at ``reference_epsilon`` otherwise.  Each pair costs
    ``4n`` queries (``8n`` without an analytic gradient).
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    h = radius / 4.0 if pair_distance is None else pair_distance
    if not h > 0 or radius < 0:
        raise ValueError("pair_distance must be positive and radius non-negative")
    rng = np.random.default_rng(seed)
    x0 = center.to_vector()
    n = x0.size
    probe = center.copy()
    analytic = getattr(objective, "gradient", None)

    def grads(v):
        probe.assign_vector(v)
        g_eps = fd_gradient(objective, probe, epsilon, batch)
        if analytic is not None:
            g_ref = analytic(v)
        else:
            g_ref = fd_gradient(objective, probe, reference_epsilon, batch)
        return g_eps, g_ref

    best_eps = best_L = 0.0
    for k in range(n_pairs):
        x = x0 + rng.uniform(-radius, radius, n)
        if k % 2 == 0:
            u = np.zeros(n)
            u[rng.integers(n)] = 1.0
        else:
            u = rng.standard_normal(n)
            while not np.any(u):
                u = rng.standard_normal(n)
            u /= np.linalg.norm(u)
        y = x + h * u
        dist = float(np.linalg.norm(x - y))
        if dist == 0.0:
            raise ValueError(f"pair_distance {h} is below floating-point resolution")
        gx_eps, gx_ref = grads(x)
        gy_eps, gy_ref = grads(y)
        best_eps = max(best_eps, float(np.max(np.abs(gx_eps - gy_eps))) / dist)
        best_L = max(best_L, float(np.linalg.norm(gx_ref - gy_ref)) / dist)
    return SmoothnessEstimate(best_L, best_eps, n_pairs, epsilon)


def secant_L_eps(g_x: np.ndarray, g_y: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Coordinate-wise secant quotient for one pair of difference gradients."""
    dist = float(np.linalg.norm(np.asarray(x) - np.asarray(y)))
    if dist == 0.0:
        return 0.0
    return float(np.max(np.abs(np.asarray(g_x) - np.asarray(g_y)))) / dist


def grad_diff(g_t: np.ndarray, g_prev: np.ndarray) -> float:
    g_t = np.asarray(g_t, dtype=np.float64)
    g_prev = np.asarray(g_prev, dtype=np.float64)
    if g_t.shape != g_prev.shape:
        raise ValueError(f"length mismatch: {g_t.shape} vs {g_prev.shape}")
    return float(np.linalg.norm(g_t - g_prev))


@dataclass
class CoherenceWindow:
    k: int
    delta: float


def track_delta(step_norms: Sequence[float], k: int | None = None) -> CoherenceWindow:
    """Largest of the last ``k`` step norms (all of them when ``k`` is None)."""
    if len(step_norms) == 0:
        raise ValueError("no steps recorded")
    k = len(step_norms) if k is None else min(int(k), len(step_norms))
    if k < 1:
        raise ValueError("window must cover at least one step")
    return CoherenceWindow(k, float(max(step_norms[-k:])))


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if window < 1 or values.size < window:
        return np.zeros(0)
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


@dataclass
class LogLinearFit:
    slope: float
    intercept: float
    r_squared: float


def loglinear_fit(budgets: Sequence[int], errors: Sequence[float]) -> LogLinearFit:
    """Least squares ``error = slope * log2(B) + intercept``."""
    x = np.log2(np.asarray(budgets, dtype=np.float64))
    y = np.asarray(errors, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two budgets")
    res = stats.linregress(x, y)
    return LogLinearFit(float(res.slope), float(res.intercept), float(res.rvalue**2))
