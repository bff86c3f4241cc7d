"""Comparison optimizers under matched query budgets.

``BCCD`` is CoCD with the buffer cleared every step.  ``FullFD`` spends
``2n`` queries per step on the complete central-difference gradient.  The
randomized estimators use two-sided probes along ``q`` random directions,
``2q`` queries per step:

* SPSA: Rademacher ``delta``, ``g_i = (f(x+e*delta) - f(x-e*delta)) / (2 e delta_i)``
* ZO-SGD: unnormalized Gaussian ``u``, ``g = (f(x+e*u) - f(x-e*u)) / (2e) * u``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .objectives import BatchSpec, ConfigError, Objective
from .optimizer import CoCD, EvaluationError, OptimizerConfig, StepTrace, fd_gradient
from .params import ParameterStore

__all__ = [
    "BCCD",
    "BCCD_EPSILON",
    "BudgetLedger",
    "FullFD",
    "RandomizedZO",
    "RandomizedZoConfig",
    "bccd_step",
    "full_fd_gd_step",
    "spsa_step",
    "zo_sgd_step",
]

BCCD_EPSILON = 1e-6


@dataclass(frozen=True)
class RandomizedZoConfig:
    alpha: float = 1e-3
    epsilon: float = 1e-3
    samples: int = 32
    seed: int = 0
    distribution: str = "rademacher"  # "gaussian" for ZO-SGD

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError(f"samples must be at least 1, got {self.samples}")
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ConfigError("alpha and epsilon must be positive")
        if self.distribution not in ("rademacher", "gaussian"):
            raise ConfigError(f"unknown distribution {self.distribution!r}")

    @property
    def queries_per_step(self) -> int:
        return 2 * self.samples


@dataclass
class BudgetLedger:
    queries_per_step: int
    queries: int = 0
    oracle_queries: int = 0
    steps: int = 0

    def record(self, trace: StepTrace) -> None:
        self.steps += 1
        self.queries += trace.queries
        self.oracle_queries += trace.oracle_queries

    @property
    def conserved(self) -> bool:
        return self.queries == self.steps * self.queries_per_step


def _directions(rng: np.random.Generator, distribution: str, q: int, n: int) -> np.ndarray:
    if distribution == "rademacher":
        return rng.integers(0, 2, size=(q, n)).astype(np.float64) * 2.0 - 1.0
    return rng.standard_normal((q, n))


def _randomized_estimate(store, objective, config, batch, directions) -> np.ndarray:
    x0 = store.to_vector()
    eps = config.epsilon
    est = np.zeros(store.n)
    try:
        for d in directions:
            store.assign_vector(x0 + eps * d)
            f_plus = objective.evaluate(store, batch)
            store.assign_vector(x0 - eps * d)
            f_minus = objective.evaluate(store, batch)
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise EvaluationError("non-finite loss along a random probe direction")
            slope = (f_plus - f_minus) / (2.0 * eps)
            if config.distribution == "rademacher":
                est += slope / d
            else:
                est += slope * d
    finally:
        store.assign_vector(x0)
    return est / len(directions)


def _descend(store: ParameterStore, direction: np.ndarray, alpha: float, shrink: float = 0.0) -> float:
    if store.n == 0:
        return 0.0
    sq = store.axpy_chunk(0, direction, alpha, shrink)
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise EvaluationError("descent produced a non-finite step")
    return norm


def spsa_step(
    store: ParameterStore,
    objective: Objective,
    config: RandomizedZoConfig,
    batch: BatchSpec | None = None,
    *,
    rng: np.random.Generator | None = None,
    directions: np.ndarray | None = None,
    step_index: int = 0,
) -> StepTrace:
    """One SPSA step.  ``directions`` (shape ``(q, n)``) overrides sampling."""
    if directions is None:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        directions = _directions(rng, "rademacher", config.samples, store.n)
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    q0 = objective.query_count
    est = _randomized_estimate(store, objective, replace(config, distribution="rademacher"),
                               batch, directions)
    queries = objective.query_count - q0
    return StepTrace(step=step_index, queries=queries, step_norm=_descend(store, est, config.alpha))


def zo_sgd_step(
    store: ParameterStore,
    objective: Objective,
    config: RandomizedZoConfig,
    batch: BatchSpec | None = None,
    *,
    rng: np.random.Generator | None = None,
    directions: np.ndarray | None = None,
    step_index: int = 0,
) -> StepTrace:
    """One Gaussian-smoothing step.  ``directions`` overrides sampling."""
    if directions is None:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        directions = _directions(rng, "gaussian", config.samples, store.n)
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    q0 = objective.query_count
    est = _randomized_estimate(store, objective, replace(config, distribution="gaussian"),
                               batch, directions)
    queries = objective.query_count - q0
    return StepTrace(step=step_index, queries=queries, step_norm=_descend(store, est, config.alpha))


class RandomizedZO:
    """SPSA or ZO-SGD with a counter-based (Philox) stream keyed on ``seed``."""

    def __init__(self, store: ParameterStore, objective: Objective, config: RandomizedZoConfig):
        self.store = store
        self.objective = objective
        self.config = config
        self.rng = np.random.Generator(np.random.Philox(key=config.seed))
        self.t = 0

    @property
    def queries_per_step(self) -> int:
        return self.config.queries_per_step

    def step(self, batch: BatchSpec | None = None, verify: bool = False) -> StepTrace:
        fn = spsa_step if self.config.distribution == "rademacher" else zo_sgd_step
        self.t += 1
        return fn(self.store, self.objective, self.config, batch, rng=self.rng, step_index=self.t)


def full_fd_gd_step(
    store: ParameterStore,
    objective: Objective,
    config: OptimizerConfig,
    batch: BatchSpec | None = None,
    *,
    step_index: int = 0,
) -> StepTrace:
    """Gradient descent on the full ``n``-coordinate difference gradient."""
    q0 = objective.query_count
    g = fd_gradient(objective, store, config.epsilon, batch, config.fd_scheme)
    queries = objective.query_count - q0
    norm = _descend(store, g, config.alpha, config.alpha * config.weight_decay)
    return StepTrace(step=step_index, queries=queries, step_norm=norm)


class FullFD:
    def __init__(self, store: ParameterStore, objective: Objective, config: OptimizerConfig):
        self.store = store
        self.objective = objective
        self.config = replace(config, budget=store.n, memory=store.n).resolve(store.n)
        self.t = 0

    @property
    def queries_per_step(self) -> int:
        return self.config.queries_per_step

    def step(self, batch: BatchSpec | None = None, verify: bool = False) -> StepTrace:
        self.t += 1
        trace = full_fd_gd_step(self.store, self.objective, self.config, batch, step_index=self.t)
        if verify:
            trace.staleness_error = 0.0
        return trace


class BCCD(CoCD):
    """CoCD with ``gamma`` forced to zero; ``epsilon`` defaults to 1e-6."""

    def __init__(
        self,
        store: ParameterStore,
        objective: Objective,
        config: OptimizerConfig | None = None,
        **overrides,
    ):
        config = config if config is not None else OptimizerConfig(epsilon=BCCD_EPSILON)
        super().__init__(store, objective, replace(config, gamma=0.0, **overrides))


def bccd_step(
    optimizer: CoCD, batch: BatchSpec | None = None, verify: bool = False
) -> StepTrace:
    """Step an optimizer with its buffer cleared first (``gamma = 0``)."""
    if optimizer.config.gamma != 0.0:
        optimizer.config = replace(optimizer.config, gamma=0.0)
    return optimizer.step(batch, verify)
