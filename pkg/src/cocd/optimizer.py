"""Coherent coordinate descent (CoCD).

Each step decays a persistent gradient buffer by ``gamma``, refreshes ``B``
coordinates in cyclic order with coordinate-wise finite differences, and
then descends along the whole buffer, stale entries included.

The buffer holds ``m`` entries.  Refresh number ``k`` (counted over the whole
run) writes slot ``k mod m`` with the difference for coordinate ``k mod n``.
Descent walks the ``m`` most recent refreshes, so with ``m < n`` coordinates
whose last refresh is older than ``m / B`` steps are frozen.  Coordinates are
0-based here; the cyclic rule ``i -> (i mod n) + 1`` is the 1-based form of
``i -> (i + 1) mod n``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .objectives import BatchSpec, ConfigError, Objective
from .params import ParameterStore

__all__ = [
    "CoCD",
    "EvaluationError",
    "GradientBuffer",
    "OptimizerConfig",
    "StepTrace",
    "advance_cycle",
    "coordinate_fd",
    "decay",
    "fd_gradient",
    "load_state",
    "logical_gradient",
    "measure_staleness_error",
    "optimize",
    "refresh",
    "save_state",
    "step",
]

logger = logging.getLogger(__name__)

SCHEMES = ("central", "forward")
WINDOWS = ("sliding", "fixed")


class EvaluationError(RuntimeError):
    """Objective returned a non-finite value or descent produced one."""

    def __init__(self, message: str, flat_index: int | None = None, probe: float | None = None):
        super().__init__(message)
        self.flat_index = flat_index
        self.probe = probe


@dataclass(frozen=True)
class OptimizerConfig:
    alpha: float = 1e-3
    gamma: float = 1.0
    epsilon: float = 1.0
    budget: int = 64
    memory: int | None = None  # None means m = n
    fd_scheme: str = "central"
    weight_decay: float = 0.0
    window: str = "sliding"

    def resolve(self, n: int) -> "OptimizerConfig":
        """Validate against dimension ``n`` and fill ``memory``."""
        if n < 1:
            raise ConfigError("cannot optimize an empty parameter store")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0,1], got {self.gamma}")
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.fd_scheme not in SCHEMES:
            raise ConfigError(f"fd_scheme must be one of {SCHEMES}, got {self.fd_scheme!r}")
        if self.window not in WINDOWS:
            raise ConfigError(f"window must be one of {WINDOWS}, got {self.window!r}")
        budget = int(self.budget)
        if budget < 1:
            raise ConfigError(f"budget must be at least 1, got {budget}")
        if budget > n:
            logger.warning("budget %d exceeds n=%d; clamping to n", budget, n)
            budget = n
        memory = n if self.memory is None else int(self.memory)
        if not 1 <= memory <= n:
            raise ConfigError(f"memory must lie in [1, n={n}], got {memory}")
        if budget > memory:
            raise ConfigError(f"budget {budget} exceeds memory {memory}")
        return replace(self, budget=budget, memory=memory)

    @property
    def queries_per_step(self) -> int:
        return 2 * self.budget if self.fd_scheme == "central" else self.budget + 1


@dataclass
class StepTrace:
    step: int
    queries: int
    step_norm: float
    oracle_queries: int = 0
    grad_diff: float | None = None
    staleness_error: float | None = None
    loss: float | None = None
    bound: float | None = None
    # full difference gradient at the pre-step point; set by verification
    oracle_gradient: np.ndarray | None = field(default=None, repr=False, compare=False)


class GradientBuffer:
    """Circular buffer of ``m`` scalars plus six integer pointers."""

    __slots__ = (
        "values",
        "cur_grad_idx",
        "cur_param_idx",
        "cur_weight_idx",
        "grad_offset",
        "param_offset",
        "weight_offset",
    )

    def __init__(self, m: int):
        self.values = np.zeros(m)
        self.cur_grad_idx = self.cur_param_idx = self.cur_weight_idx = 0
        self.grad_offset = self.param_offset = self.weight_offset = 0

    @property
    def m(self) -> int:
        return self.values.size

    @property
    def pointers(self) -> tuple[int, int, int, int, int, int]:
        return (
            self.cur_grad_idx,
            self.cur_param_idx,
            self.cur_weight_idx,
            self.grad_offset,
            self.param_offset,
            self.weight_offset,
        )

    @pointers.setter
    def pointers(self, p) -> None:
        (
            self.cur_grad_idx,
            self.cur_param_idx,
            self.cur_weight_idx,
            self.grad_offset,
            self.param_offset,
            self.weight_offset,
        ) = (int(v) for v in p)

    def copy(self) -> "GradientBuffer":
        other = GradientBuffer(self.m)
        other.values[:] = self.values
        other.pointers = self.pointers
        return other


def _fd(objective, store, values, w, epsilon, batch, scheme, base, flat_index) -> float:
    old = values[w]
    try:
        values[w] = old + epsilon
        f_plus = objective.evaluate(store, batch)
        if not math.isfinite(f_plus):
            raise EvaluationError(
                f"non-finite loss {f_plus} at coordinate {flat_index} probed at {old + epsilon!r}",
                flat_index,
                old + epsilon,
            )
        if scheme == "central":
            values[w] = old - epsilon
            f_minus = objective.evaluate(store, batch)
            if not math.isfinite(f_minus):
                raise EvaluationError(
                    f"non-finite loss {f_minus} at coordinate {flat_index} "
                    f"probed at {old - epsilon!r}",
                    flat_index,
                    old - epsilon,
                )
            return (f_plus - f_minus) / (2.0 * epsilon)
        return (f_plus - base) / epsilon
    finally:
        values[w] = old


def coordinate_fd(
    objective: Objective,
    store: ParameterStore,
    flat_index: int,
    epsilon: float,
    batch: BatchSpec | None = None,
    scheme: str = "central",
    base: float | None = None,
) -> float:
    """Finite-difference slope along one coordinate; the store is restored.

    ``forward`` needs ``f(x)``; pass it as ``base`` to avoid a third query.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    loc = store.locate(flat_index)
    if scheme == "forward" and base is None:
        base = objective.evaluate(store, batch)
    values = store.params[loc.param_idx].values
    return _fd(objective, store, values, loc.within_idx, epsilon, batch, scheme, base, flat_index)


def fd_gradient(
    objective: Objective,
    store: ParameterStore,
    epsilon: float,
    batch: BatchSpec | None = None,
    scheme: str = "central",
) -> np.ndarray:
    """All ``n`` coordinate differences in flat order (``2n`` queries central)."""
    base = objective.evaluate(store, batch) if scheme == "forward" else None
    out = np.empty(store.n)
    k = 0
    for p in store.params:
        for w in range(p.numel):
            out[k] = _fd(objective, store, p.values, w, epsilon, batch, scheme, base, k)
            k += 1
    return out


def advance_cycle(i: int, n: int) -> int:
    """Next active coordinate, 1-based: ``(i mod n) + 1``."""
    return (i % n) + 1


def decay(buffer: GradientBuffer, gamma: float) -> None:
    if gamma == 0.0:
        buffer.values.fill(0.0)
    elif gamma != 1.0:
        buffer.values *= gamma


def _probe(buffer, objective, store, config, batch) -> np.ndarray:
    """Fresh differences for the next ``B`` coordinates.  Mutates nothing."""
    fresh = np.empty(config.budget)
    base = objective.evaluate(store, batch) if config.fd_scheme == "forward" else None
    p, w = buffer.cur_param_idx, buffer.cur_weight_idx
    params = store.params
    for k in range(config.budget):
        values = params[p].values
        fresh[k] = _fd(
            objective, store, values, w, config.epsilon, batch, config.fd_scheme, base,
            store.flat_index(p, w),
        )
        w += 1
        if w >= values.size:
            w = 0
            p = (p + 1) % len(params)
    return fresh


def _commit(buffer: GradientBuffer, store: ParameterStore, fresh: np.ndarray) -> None:
    values = buffer.values
    m = values.size
    n_params = len(store.params)
    for v in fresh:
        values[buffer.cur_grad_idx] = v
        # UpdatePointers
        buffer.cur_grad_idx = (buffer.cur_grad_idx + 1) % m
        buffer.cur_weight_idx += 1
        if buffer.cur_weight_idx >= store.params[buffer.cur_param_idx].numel:
            buffer.cur_weight_idx = 0
            buffer.cur_param_idx = (buffer.cur_param_idx + 1) % n_params


def refresh(
    buffer: GradientBuffer,
    objective: Objective,
    store: ParameterStore,
    config: OptimizerConfig,
    batch: BatchSpec | None = None,
) -> np.ndarray:
    """Overwrite the next ``B`` buffer slots with fresh differences at ``store``.

    All probes run before any slot or pointer changes, so a failed
    evaluation leaves the buffer as it was.  Returns the fresh values.
    """
    fresh = _probe(buffer, objective, store, config, batch)
    _commit(buffer, store, fresh)
    return fresh


def _window_start(buffer: GradientBuffer, store: ParameterStore) -> int:
    return store.flat_index(buffer.param_offset, buffer.weight_offset)


def optimize(buffer: GradientBuffer, store: ParameterStore, config: OptimizerConfig) -> float:
    """Descend along the ``m``-entry window; returns the step norm.

    Walks buffer-contiguous, store-contiguous runs and updates the store in
    place.  In ``sliding`` mode the window then advances by ``B``.
    """
    values = buffer.values
    m, n = values.size, store.n
    shrink = config.alpha * config.weight_decay
    g = buffer.grad_offset
    x = _window_start(buffer, store)
    count = 0
    sq = 0.0
    while count < m:
        chunk = min(m - count, m - g, n - x)
        sq += store.axpy_chunk(x, values[g:g + chunk], config.alpha, shrink)
        count += chunk
        g = (g + chunk) % m
        x = (x + chunk) % n
    if config.window == "sliding":
        _set_window(buffer, store, x_start=(_window_start(buffer, store) + config.budget) % n,
                    g_start=(buffer.grad_offset + config.budget) % m)
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise EvaluationError("descent produced a non-finite step")
    return norm


def _set_window(buffer, store, x_start: int, g_start: int) -> None:
    loc = store.locate(x_start)
    buffer.grad_offset = g_start
    buffer.param_offset = loc.param_idx
    buffer.weight_offset = loc.within_idx


def logical_gradient(
    buffer: GradientBuffer, store: ParameterStore, window: str = "sliding"
) -> np.ndarray:
    """The buffer laid out by coordinate.

    ``sliding`` places the ``m`` most recent refreshes at their coordinates
    (zero elsewhere), which is the direction the next descent applies.
    ``fixed`` reads slots from the descent offsets instead.
    """
    out = np.zeros(store.n)
    m, n = buffer.m, store.n
    if window == "sliding":
        head = store.flat_index(buffer.cur_param_idx, buffer.cur_weight_idx)
        start, g_start = (head - m) % n, buffer.cur_grad_idx
    else:
        start, g_start = _window_start(buffer, store), buffer.grad_offset
    idx = (start + np.arange(m)) % n
    out[idx] = buffer.values[(g_start + np.arange(m)) % m]
    return out


def measure_staleness_error(
    buffer: GradientBuffer,
    objective: Objective,
    store: ParameterStore,
    epsilon: float,
    batch: BatchSpec | None = None,
    scheme: str = "central",
    window: str = "sliding",
) -> float:
    """``|g_hat - full difference gradient at store|``; costs a full sweep."""
    exact = fd_gradient(objective, store, epsilon, batch, scheme)
    return float(np.linalg.norm(logical_gradient(buffer, store, window) - exact))


def step(
    buffer: GradientBuffer,
    store: ParameterStore,
    objective: Objective,
    config: OptimizerConfig,
    batch: BatchSpec | None = None,
    *,
    step_index: int = 0,
    verify: bool = False,
) -> StepTrace:
    """Decay, refresh, optimize.  ``config`` must already be resolved.

    With ``verify`` the staleness error of the refreshed buffer is measured
    at the current point before descending; those queries are reported in
    ``oracle_queries``.
    """
    q0 = objective.query_count
    fresh = _probe(buffer, objective, store, config, batch)
    queries = objective.query_count - q0

    # |g_t - g_{t-1}|^2 from the B slots about to be overwritten
    vals = buffer.values
    total_sq = float(np.dot(vals, vals))
    slot = buffer.cur_grad_idx
    m = buffer.m
    old_sq = diff_sq = 0.0
    for v in fresh:
        old = vals[slot]
        old_sq += old * old
        diff_sq += (v - old) ** 2
        slot = (slot + 1) % m
    g1 = config.gamma - 1.0
    grad_diff = math.sqrt(max(diff_sq + g1 * g1 * (total_sq - old_sq), 0.0))

    decay(buffer, config.gamma)
    _commit(buffer, store, fresh)

    trace = StepTrace(step=step_index, queries=queries, step_norm=0.0, grad_diff=grad_diff)
    if verify:
        q1 = objective.query_count
        exact = fd_gradient(objective, store, config.epsilon, batch, config.fd_scheme)
        trace.oracle_queries = objective.query_count - q1
        trace.staleness_error = float(np.linalg.norm(logical_gradient(buffer, store, config.window) - exact))
        trace.oracle_gradient = exact
    trace.step_norm = optimize(buffer, store, config)
    return trace


class CoCD:
    """Optimizer owning a buffer for one store/objective pair."""

    def __init__(self, store: ParameterStore, objective: Objective, config: OptimizerConfig):
        self.store = store
        self.objective = objective
        self.config = config.resolve(store.n)
        self.buffer = GradientBuffer(self.config.memory)
        self.t = 0
        if self.config.window == "sliding":
            m, b = self.config.memory, self.config.budget
            _set_window(self.buffer, store, x_start=(b - m) % store.n, g_start=b % m)

    @property
    def queries_per_step(self) -> int:
        return self.config.queries_per_step

    def step(self, batch: BatchSpec | None = None, verify: bool = False) -> StepTrace:
        trace = step(
            self.buffer, self.store, self.objective, self.config, batch,
            step_index=self.t + 1, verify=verify,
        )
        self.t += 1
        return trace

    def logical_gradient(self) -> np.ndarray:
        return logical_gradient(self.buffer, self.store, self.config.window)

    def state_size(self) -> tuple[int, int]:
        """(persistent float count, persistent integer count)."""
        return self.buffer.m, len(self.buffer.pointers) + 1

    def save(self, path: str | Path) -> None:
        save_state(self.buffer, self.t, path)

    def load(self, path: str | Path) -> None:
        buffer, t = load_state(path)
        if buffer.m != self.buffer.m:
            raise ConfigError(f"checkpoint has m={buffer.m}, optimizer has m={self.buffer.m}")
        self.buffer, self.t = buffer, t


def save_state(buffer: GradientBuffer, t: int, path: str | Path) -> None:
    """Step counter, six pointers, then the ``m`` buffer values, one per line."""
    with open(path, "w") as fh:
        fh.write(f"{t}\n")
        for p in buffer.pointers:
            fh.write(f"{p}\n")
        for v in buffer.values:
            fh.write(f"{float(v)!r}\n")


def load_state(path: str | Path) -> tuple[GradientBuffer, int]:
    with open(path) as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if len(lines) < 8:
        raise ValueError(f"{path}: truncated optimizer checkpoint")
    t = int(lines[0])
    values = np.array([float(v) for v in lines[7:]])
    buffer = GradientBuffer(values.size)
    buffer.values[:] = values
    buffer.pointers = [int(v) for v in lines[1:7]]
    return buffer, t
