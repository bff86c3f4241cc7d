"""Fast self-checks run by ``cocd verify``.

Each check returns a :class:`CheckResult`; none takes more than a second.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import analysis
from .baselines import BCCD
from .harness import emit_metrics, load_record, parse_config, run_experiment
from .objectives import Dataset, MlpRegression, MlpSpec, Quadratic
from .optimizer import CoCD, OptimizerConfig, fd_gradient
from .params import ParameterStore

__all__ = ["CHECKS", "CheckResult", "run_checks"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_full_budget_exact() -> CheckResult:
    """B = m = n reproduces the complete central difference."""
    rng = np.random.default_rng(0)
    data = Dataset(rng.standard_normal((16, 4)), rng.standard_normal((16, 2)))
    f = MlpRegression(MlpSpec((4, 8, 6, 2)), data)
    store = f.init_store(1)
    expected = fd_gradient(f, store.copy(), 1e-3)
    opt = CoCD(store, f, OptimizerConfig(alpha=1e-2, epsilon=1e-3, budget=f.n))
    opt.step()
    err = _rel(opt.logical_gradient(), expected)
    return CheckResult("full-budget exactness", err <= 1e-12, f"relative error {err:.2e}")


def check_bccd_support() -> CheckResult:
    """With gamma = 0 only the refreshed block moves."""
    n, b = 12, 3
    f = Quadratic(np.linspace(1.0, 2.0, n))
    store = f.init_store(0)
    opt = BCCD(store, f, OptimizerConfig(alpha=0.1, epsilon=1e-3, budget=b))
    for t in range(2 * n // b):
        before = store.to_vector()
        opt.step()
        moved = set(np.flatnonzero(store.to_vector() != before))
        block = {(t * b + k) % n for k in range(b)}
        if not moved <= block:
            return CheckResult("bccd support", False, f"step {t + 1} moved {sorted(moved - block)}")
    return CheckResult("bccd support", True, f"{2 * n // b} steps")


def check_staleness_bound() -> CheckResult:
    """Measured staleness stays under the bound on a quadratic."""
    n, b = 16, 4
    diag = np.linspace(0.5, 1.0, n)
    f = Quadratic(diag)
    store = f.init_store(0)
    opt = CoCD(store, f, OptimizerConfig(alpha=0.2, epsilon=1e-3, budget=b))
    norms = []
    for t in range(1, 41):
        tr = opt.step(verify=True)
        if t >= n // b:
            bound = analysis.error_bound(n, b, float(diag.max()), max(norms[-(n // b):]))
            if tr.staleness_error > bound * (1 + 1e-9):
                return CheckResult("staleness bound", False, f"step {t}: {tr.staleness_error} > {bound}")
        norms.append(tr.step_norm)
    return CheckResult("staleness bound", True, "40 steps")


def check_ledger_and_replay() -> CheckResult:
    """Query ledger is conserved and deterministic runs replay byte for byte."""
    cfg = parse_config({
        "objective": {"kind": "quadratic", "n": 8},
        "optimizer": {"kind": "cocd", "budget": 2, "alpha": 0.1, "epsilon": 1e-3},
        "steps": 12,
        "verify_every": 3,
    })
    with tempfile.TemporaryDirectory() as d:
        a, b, c = (Path(d) / name for name in ("a.csv", "b.csv", "c.csv"))
        rec = run_experiment(cfg, a)
        run_experiment(cfg, b)
        emit_metrics(load_record(a), c)
        same = a.read_bytes() == b.read_bytes() == c.read_bytes()
    ok = rec.ledger.conserved and same
    return CheckResult("ledger and replay", ok, f"conserved={rec.ledger.conserved} identical={same}")


def check_bound_formulas() -> CheckResult:
    ok = (
        analysis.error_bound(8, 2, 1.0, 1.0) == 0.5 * (2 * 4 * 3)
        and analysis.error_bound(8, 8, 1.0, 1.0) == 0.0
        and analysis.stability_constants(1e-3, 1.0, 64, 7.0)[0] == 1e3 - 0.5 * (1 + 64 * 7)
        and math.isclose(analysis.max_stable_lr(1.0, 64, 7.0), 2 / 449)
    )
    return CheckResult("bound formulas", ok)


def check_store_roundtrip() -> CheckResult:
    store = ParameterStore.zeros([(2, 3), (3,), (4, 1)])
    v = np.arange(store.n, dtype=np.float64)
    store.assign_vector(v)
    ok = all(store.read_flat(i) == v[i] for i in range(store.n))
    return CheckResult("flat index round trip", ok, f"n={store.n}")


CHECKS: list[Callable[[], CheckResult]] = [
    check_store_roundtrip,
    check_full_budget_exact,
    check_bccd_support,
    check_staleness_bound,
    check_bound_formulas,
    check_ledger_and_replay,
]


def run_checks() -> list[CheckResult]:
    results = []
    for check in CHECKS:
        try:
            results.append(check())
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            results.append(CheckResult(check.__name__, False, f"{type(exc).__name__}: {exc}"))
    return results
