"""Flat-vector view over a list of shaped parameter tensors.

Tensors keep their own storage; a flat index ``k`` addresses element
``k - offsets[p]`` (row-major) of tensor ``p``.  Tensors are visited in
declaration order.  All values are float64.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "FlatLocation",
    "ParameterStore",
    "ShapedParam",
    "load_store",
    "save_store",
    "total_params",
]

# Upper bound on temporaries created by in-place updates.
_BLOCK = 256


class ShapedParam:
    """One tensor: its extents plus a contiguous row-major float64 array."""

    __slots__ = ("dims", "values")

    def __init__(self, dims: Sequence[int], values: np.ndarray | None = None):
        dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in dims):
            raise ValueError(f"tensor extents must be positive, got {dims}")
        size = math.prod(dims)
        if values is None:
            values = np.zeros(size)
        values = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
        if values.size != size:
            raise ValueError(f"{values.size} values do not fill shape {dims}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter values must be finite")
        self.dims = dims
        self.values = values

    @property
    def numel(self) -> int:
        return self.values.size

    @property
    def array(self) -> np.ndarray:
        """Shaped view sharing memory with ``values``."""
        return self.values.reshape(self.dims)

    def __repr__(self) -> str:
        return f"ShapedParam(dims={self.dims})"


@dataclass(frozen=True)
class FlatLocation:
    param_idx: int
    within_idx: int


class ParameterStore:
    """Ordered tensors exposed as one virtual flat vector of length ``n``."""

    def __init__(self, params: Iterable[ShapedParam] = ()):
        self.params: list[ShapedParam] = list(params)
        offsets = [0]
        for p in self.params:
            offsets.append(offsets[-1] + p.numel)
        # offsets has one trailing entry equal to n
        self._bounds = offsets
        self.offsets: tuple[int, ...] = tuple(offsets[:-1])
        self.n: int = offsets[-1]

    @classmethod
    def from_arrays(cls, arrays: Iterable[np.ndarray]) -> "ParameterStore":
        """Store holding copies of ``arrays``."""
        params = []
        for a in arrays:
            a = np.array(a, dtype=np.float64)
            params.append(ShapedParam(a.shape if a.ndim else (1,), a))
        return cls(params)

    @classmethod
    def zeros(cls, shapes: Iterable[Sequence[int]]) -> "ParameterStore":
        return cls(ShapedParam(s) for s in shapes)

    def __len__(self) -> int:
        return self.n

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [p.dims for p in self.params]

    def tensors(self) -> list[np.ndarray]:
        return [p.array for p in self.params]

    def numel(self, param_idx: int) -> int:
        return self.params[param_idx].numel

    # -- index translation ------------------------------------------------

    def _check(self, flat_index: int) -> int:
        flat_index = int(flat_index)
        if not 0 <= flat_index < self.n:
            raise IndexError(f"flat index {flat_index} out of range [0, {self.n})")
        return flat_index

    def locate(self, flat_index: int) -> FlatLocation:
        flat_index = self._check(flat_index)
        p = bisect.bisect_right(self._bounds, flat_index) - 1
        return FlatLocation(p, flat_index - self._bounds[p])

    def flat_index(self, param_idx: int, within_idx: int) -> int:
        return self._bounds[param_idx] + within_idx

    def read_flat(self, flat_index: int) -> float:
        loc = self.locate(flat_index)
        return float(self.params[loc.param_idx].values[loc.within_idx])

    def write_flat(self, flat_index: int, value: float) -> None:
        loc = self.locate(flat_index)
        self.params[loc.param_idx].values[loc.within_idx] = value

    def perturb(self, flat_index: int, delta: float) -> None:
        if not math.isfinite(delta):
            raise ValueError(f"perturbation must be finite, got {delta!r}")
        loc = self.locate(flat_index)
        self.params[loc.param_idx].values[loc.within_idx] += delta

    def axpy_chunk(
        self,
        start_flat: int,
        grads: np.ndarray,
        scale: float,
        shrink: float = 0.0,
    ) -> float:
        """In place, ``x[start+k] -= scale * grads[k] + shrink * x[start+k]``.

        The span may cross tensor boundaries but must end at or before ``n``.
        Work proceeds in blocks of at most a few hundred elements, so no
        temporary anywhere near parameter size is created.  Returns the
        squared Euclidean norm of the applied change.
        """
        count = len(grads)
        if count == 0:
            return 0.0
        start_flat = self._check(start_flat)
        if start_flat + count > self.n:
            raise IndexError(
                f"span [{start_flat}, {start_flat + count}) exceeds n={self.n}"
            )
        p = bisect.bisect_right(self._bounds, start_flat) - 1
        w = start_flat - self._bounds[p]
        done = 0
        sq = 0.0
        while done < count:
            values = self.params[p].values
            chunk = min(values.size - w, count - done)
            sq += _apply(values, w, grads, done, chunk, scale, shrink)
            done += chunk
            p += 1
            w = 0
        return sq

    # -- bulk access (allocates; diagnostics and tests only) ----------------

    def to_vector(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([p.values for p in self.params])

    def assign_vector(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.n,):
            raise ValueError(f"expected vector of length {self.n}, got {vector.shape}")
        for p, start in zip(self.params, self.offsets):
            p.values[:] = vector[start:start + p.numel]

    def copy(self) -> "ParameterStore":
        return ParameterStore(ShapedParam(p.dims, p.values.copy()) for p in self.params)

    def __repr__(self) -> str:
        return f"ParameterStore(n={self.n}, shapes={self.shapes})"


def _apply(dst, dst_start, src, src_start, count, scale, shrink) -> float:
    sq = 0.0
    for k in range(0, count, _BLOCK):
        m = min(_BLOCK, count - k)
        d = dst[dst_start + k:dst_start + k + m]
        delta = scale * src[src_start + k:src_start + k + m]
        if shrink:
            delta += shrink * d
        sq += float(np.dot(delta, delta))
        d -= delta
    return sq


def total_params(store: ParameterStore) -> int:
    return store.n


def save_store(store: ParameterStore, path: str | Path) -> None:
    """Write values one per line to ``path`` and extents to ``path.shapes``."""
    path = Path(path)
    with open(path, "w") as fh:
        for p in store.params:
            for v in p.values:
                fh.write(f"{float(v)!r}\n")
    with open(path.with_name(path.name + ".shapes"), "w") as fh:
        for dims in store.shapes:
            fh.write(" ".join(str(d) for d in dims) + "\n")


def load_store(path: str | Path) -> ParameterStore:
    path = Path(path)
    shapes = []
    with open(path.with_name(path.name + ".shapes")) as fh:
        for line in fh:
            if line.strip():
                shapes.append(tuple(int(t) for t in line.split()))
    with open(path) as fh:
        values = np.array([float(line) for line in fh if line.strip()])
    store = ParameterStore.zeros(shapes)
    store.assign_vector(values)
    return store
