"""Query-counted objectives: analytic test landscapes and MLP regression.

Every objective evaluates a :class:`~cocd.params.ParameterStore` and counts
its calls.  The analytic landscapes keep all ``n`` coordinates in a single
tensor of shape ``(n,)``; the MLP registers one weight matrix and one bias
vector per layer.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .params import ParameterStore, ShapedParam

__all__ = [
    "BatchSpec",
    "ConfigError",
    "Dataset",
    "DatasetError",
    "MlpRegression",
    "MlpSpec",
    "Objective",
    "OscillatoryQuadratic",
    "Quadratic",
    "Rosenbrock",
    "load_csv_dataset",
    "mlp_regression_objective",
    "next_minibatch",
    "oscillatory_quadratic",
    "quadratic_objective",
    "rosenbrock",
    "synthetic_regression",
]


class ConfigError(ValueError):
    """Invalid objective, optimizer or experiment configuration."""


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BatchSpec:
    """Row indices into a dataset.  Compared by identity."""

    rows: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)


class Objective:
    """Scalar loss of a parameter store.  Subclasses implement ``_loss``."""

    def __init__(self):
        self.query_count = 0
        self._lock = threading.Lock()

    def evaluate(self, store: ParameterStore, batch: BatchSpec | None = None) -> float:
        with self._lock:
            self.query_count += 1
        return self._loss(store, batch)

    __call__ = evaluate

    def _loss(self, store: ParameterStore, batch: BatchSpec | None) -> float:
        raise NotImplementedError

    def init_store(self, seed: int = 0, scale: float = 1.0) -> ParameterStore:
        raise NotImplementedError


class _VectorObjective(Objective):
    """Objective over one flat tensor of length ``n``."""

    n: int

    def _x(self, store: ParameterStore) -> np.ndarray:
        if store.n != self.n:
            raise ConfigError(f"store has {store.n} parameters, objective expects {self.n}")
        return store.params[0].values

    def init_store(self, seed: int = 0, scale: float = 1.0) -> ParameterStore:
        rng = np.random.default_rng(seed)
        return ParameterStore([ShapedParam((self.n,), rng.uniform(-scale, scale, self.n))])


class Quadratic(_VectorObjective):
    """``f(x) = 0.5 * sum(d * (x - b)**2)`` with all ``d > 0``."""

    def __init__(self, diag: Sequence[float], shift: Sequence[float] | None = None):
        super().__init__()
        self.diag = np.asarray(diag, dtype=np.float64)
        self.n = self.diag.size
        self.shift = np.zeros(self.n) if shift is None else np.asarray(shift, dtype=np.float64)
        if self.shift.shape != self.diag.shape:
            raise ConfigError("diag and shift must have equal length")
        if self.n == 0 or np.any(self.diag <= 0):
            raise ConfigError("quadratic curvatures must be positive")
        self.L = float(self.diag.max())
        self.mu = float(self.diag.min())
        self.minimum = 0.0

    def _loss(self, store, batch):
        r = self._x(store) - self.shift
        return 0.5 * float(np.dot(self.diag * r, r))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.diag * (np.asarray(x) - self.shift)


class Rosenbrock(_VectorObjective):
    def __init__(self, n: int):
        super().__init__()
        if n < 2:
            raise ConfigError(f"rosenbrock needs n >= 2, got {n}")
        self.n = n
        self.minimum = 0.0

    def _loss(self, store, batch):
        x = self._x(store)
        a = x[1:] - x[:-1] ** 2
        b = 1.0 - x[:-1]
        return float(100.0 * np.dot(a, a) + np.dot(b, b))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        g = np.zeros_like(x)
        a = x[1:] - x[:-1] ** 2
        g[:-1] = -400.0 * x[:-1] * a - 2.0 * (1.0 - x[:-1])
        g[1:] += 200.0 * a
        return g


class OscillatoryQuadratic(_VectorObjective):
    """``f(x) = 0.5*|x|^2 + amp * sum(sin(freq * x))``.

    Curvature of the oscillation is ``amp * freq**2``, so small finite
    difference intervals see ``L = 1 + amp * freq**2`` while an interval
    ``eps`` sees the damped ``1 + amp * freq * |sin(freq * eps)| / eps``.
    """

    def __init__(self, amp: float, freq: float, n: int):
        super().__init__()
        if amp < 0 or freq <= 0:
            raise ConfigError("need amp >= 0 and freq > 0")
        if n < 1:
            raise ConfigError("n must be positive")
        self.amp = float(amp)
        self.freq = float(freq)
        self.n = n
        self.L = 1.0 + self.amp * self.freq**2

    def _loss(self, store, batch):
        x = self._x(store)
        return 0.5 * float(np.dot(x, x)) + self.amp * float(np.sin(self.freq * x).sum())

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x + self.amp * self.freq * np.cos(self.freq * x)

    def smoothed_gradient(self, x: np.ndarray, epsilon: float) -> np.ndarray:
        """Closed-form central difference at interval ``epsilon``."""
        x = np.asarray(x, dtype=np.float64)
        return x + self.amp * np.cos(self.freq * x) * np.sin(self.freq * epsilon) / epsilon

    def smoothed_lipschitz(self, epsilon: float) -> float:
        """Coordinate-wise constant of the central difference at ``epsilon``."""
        return 1.0 + self.amp * self.freq * abs(math.sin(self.freq * epsilon)) / epsilon

    def envelope(self, x: np.ndarray) -> float:
        """Per-coordinate mean of the quadratic term, ``|x|^2 / (2n)``."""
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * float(np.dot(x, x)) / x.size


def quadratic_objective(diag, shift=None) -> Quadratic:
    return Quadratic(diag, shift)


def rosenbrock(n: int) -> Rosenbrock:
    return Rosenbrock(n)


def oscillatory_quadratic(amp: float, freq: float, n: int) -> OscillatoryQuadratic:
    return OscillatoryQuadratic(amp, freq, n)


# -- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.features.ndim != 2 or self.targets.ndim != 2:
            raise DatasetError("features and targets must be 2-D")
        if len(self.features) != len(self.targets):
            raise DatasetError(
                f"{len(self.features)} feature rows vs {len(self.targets)} target rows"
            )
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))):
            raise DatasetError("dataset entries must be finite")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_targets(self) -> int:
        return self.targets.shape[1]

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return (
            Dataset(self.features[:n_first], self.targets[:n_first]),
            Dataset(self.features[n_first:], self.targets[n_first:]),
        )


def load_csv_dataset(
    path: str | Path, n_features: int, n_targets: int, header: bool = False
) -> Dataset:
    """Read comma-separated rows, features first then targets."""
    width = n_features + n_targets
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, record in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not record or all(not t.strip() for t in record):
                continue
            if len(record) != width:
                raise DatasetError(
                    f"{path}: row {lineno} has {len(record)} fields, expected {width}"
                )
            values = []
            for col, token in enumerate(record, start=1):
                try:
                    values.append(float(token))
                except ValueError:
                    raise DatasetError(
                        f"{path}: row {lineno}, column {col}: not a number: {token!r}"
                    ) from None
            rows.append(values)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    return Dataset(data[:, :n_features], data[:, n_features:])


def synthetic_regression(
    rows: int,
    seed: int = 0,
    n_features: int = 21,
    n_targets: int = 7,
    hidden: int = 32,
    output_scale: float = 10.0,
    noise: float = 0.5,
) -> Dataset:
    """Regression rows from a fixed random tanh teacher network.

    Shaped like SARCOS (21 joint-state inputs, 7 torque outputs).  Features
    are standard normal; targets are ``output_scale * teacher(x) + noise``.
    """
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / math.sqrt(n_features), (n_features, hidden))
    b1 = rng.normal(0.0, 0.5, hidden)
    w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, n_targets))
    x = rng.normal(size=(rows, n_features))
    y = output_scale * (np.tanh(x @ w1 + b1) @ w2)
    y += rng.normal(0.0, noise, y.shape)
    return Dataset(x, y)


def next_minibatch(
    dataset: Dataset | int,
    batch_size: int,
    cursor: int = 0,
    shuffle_seed: int | None = None,
) -> BatchSpec:
    """Batch number ``cursor``.

    Sequential mode takes rows ``cursor*batch_size ...`` with wraparound;
    shuffle mode draws rows without replacement from a generator keyed on
    ``(shuffle_seed, cursor)``.  ``batch_size`` is clamped to the row count.
    """
    rows = dataset if isinstance(dataset, int) else len(dataset)
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    batch_size = min(batch_size, rows)
    if shuffle_seed is None:
        start = (cursor * batch_size) % rows if rows else 0
        idx = (start + np.arange(batch_size)) % max(rows, 1)
    else:
        rng = np.random.default_rng([shuffle_seed, cursor])
        idx = rng.choice(rows, size=batch_size, replace=False)
    return BatchSpec(idx.astype(np.intp))


# -- MLP regression -----------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ConfigError(f"invalid layer widths {self.widths}")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        out: list[tuple[int, ...]] = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            out += [(a, b), (b,)]
        return out

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))


class MlpRegression(Objective):
    """Mean squared error of a fully connected network.

    Store layout is ``[W1, b1, W2, b2, ...]`` with ``W`` of shape
    ``(fan_in, fan_out)``; hidden layers use the MlpSpec activation and the
    output layer is linear.  ``relu`` is not smooth, so the smoothness
    constants used by the analysis do not exist for it.
    """

    def __init__(self, spec: MlpSpec, dataset: Dataset):
        super().__init__()
        if spec.widths[0] != dataset.n_features or spec.widths[-1] != dataset.n_targets:
            raise ConfigError(
                f"network {spec.widths[0]}->{spec.widths[-1]} does not match dataset "
                f"{dataset.n_features}->{dataset.n_targets}"
            )
        self.spec = spec
        self.dataset = dataset
        self.n = spec.n_params
        self._batch_key: BatchSpec | None = None
        self._batch_xy: tuple[np.ndarray, np.ndarray] | None = None

    def _data(self, batch):
        if batch is None:
            return self.dataset.features, self.dataset.targets
        if batch is not self._batch_key:
            self._batch_key = batch
            self._batch_xy = (self.dataset.features[batch.rows], self.dataset.targets[batch.rows])
        return self._batch_xy

    def _loss(self, store, batch):
        if store.n != self.n:
            raise ConfigError(f"store has {store.n} parameters, network expects {self.n}")
        x, y = self._data(batch)
        if len(x) == 0:
            return 0.0
        params = store.params
        last = len(params) // 2 - 1
        h = x
        for layer in range(last + 1):
            w = params[2 * layer].array
            b = params[2 * layer + 1].values
            h = h @ w
            h += b
            if layer < last:
                if self.spec.activation == "tanh":
                    np.tanh(h, out=h)
                else:
                    np.maximum(h, 0.0, out=h)
        h -= y
        return float(np.mean(h * h))

    def init_store(self, seed: int = 0, scale: float = 1.0) -> ParameterStore:
        """Uniform in ``[-s, s]`` with ``s = scale / sqrt(fan_in)``."""
        rng = np.random.default_rng(seed)
        params = []
        for a, b in zip(self.spec.widths[:-1], self.spec.widths[1:]):
            s = scale / math.sqrt(a)
            params.append(ShapedParam((a, b), rng.uniform(-s, s, a * b)))
            params.append(ShapedParam((b,), rng.uniform(-s, s, b)))
        return ParameterStore(params)


def mlp_regression_objective(spec: MlpSpec, dataset: Dataset) -> MlpRegression:
    return MlpRegression(spec, dataset)
