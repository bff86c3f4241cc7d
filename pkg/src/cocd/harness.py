"""Experiment runner: JSON configs, seeded runs, sweeps and CSV traces.

A config is a JSON object::

    {
      "objective": {"kind": "quadratic", "n": 8},
      "optimizer": {"kind": "cocd", "budget": 4},
      "steps": 10
    }

Missing keys take the defaults in ``OBJECTIVE_DEFAULTS``,
``OPTIMIZER_DEFAULTS`` and ``RUN_DEFAULTS``; unknown keys are rejected.
Every run writes one CSV row per step (``CSV_HEADER``) plus a
``<out>.config.json`` sidecar holding the resolved config.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import analysis
from .baselines import BCCD, BCCD_EPSILON, BudgetLedger, FullFD, RandomizedZO, RandomizedZoConfig
from .objectives import (
    ConfigError,
    Dataset,
    MlpRegression,
    MlpSpec,
    Objective,
    OscillatoryQuadratic,
    Quadratic,
    Rosenbrock,
    load_csv_dataset,
    next_minibatch,
    synthetic_regression,
)
from .optimizer import CoCD, EvaluationError, OptimizerConfig, StepTrace

__all__ = [
    "CSV_HEADER",
    "ComparisonRecord",
    "ExperimentConfig",
    "RunFailure",
    "RunRecord",
    "StudyRecord",
    "budget_error_study",
    "compare_budget_matched",
    "emit_metrics",
    "load_record",
    "parse_config",
    "run_experiment",
    "sweep",
    "write_audit",
]

logger = logging.getLogger(__name__)

CSV_HEADER = (
    "step", "loss", "step_norm", "queries_cum", "oracle_queries_cum",
    "staleness_error", "bound", "grad_diff",
)
AUDIT_HEADER = ("step", "measured_error", "bound", "L_eps_hat", "delta_hat", "satisfied")

OBJECTIVE_DEFAULTS: dict[str, dict[str, Any]] = {
    "quadratic": {"n": 8, "diag": None, "diag_range": [0.5, 1.0], "shift": None, "init_scale": 1.0},
    "rosenbrock": {"n": 2, "init_scale": 1.0},
    "oscillatory": {"n": 32, "amp": 0.5, "freq": 50.0, "init_scale": 1.0},
    "mlp": {
        "widths": [21, 64, 64, 64, 32, 7],
        "activation": "tanh",
        "init_scale": 1.0,
        "validation_rows": 256,
        "dataset": None,
    },
}
DATASET_DEFAULTS: dict[str, Any] = {
    "path": None,
    "n_features": None,
    "n_targets": None,
    "header": False,
    "rows": 1280,
    "seed": None,
    "output_scale": 10.0,
    "noise": 0.5,
}
_COORDINATE = {
    "alpha": 1e-3,
    "gamma": 1.0,
    "epsilon": 1.0,
    "budget": 64,
    "memory": None,
    "memory_fraction": None,
    "fd_scheme": "central",
    "weight_decay": 0.0,
    "window": "sliding",
}
_RANDOMIZED = {"alpha": 1e-3, "epsilon": 1e-3, "samples": 32, "seed": 0}
OPTIMIZER_DEFAULTS: dict[str, dict[str, Any]] = {
    "cocd": dict(_COORDINATE),
    "bccd": {**_COORDINATE, "gamma": 0.0, "epsilon": BCCD_EPSILON},
    "fullfd": {k: _COORDINATE[k] for k in ("alpha", "epsilon", "fd_scheme", "weight_decay")},
    "spsa": dict(_RANDOMIZED),
    "zosgd": dict(_RANDOMIZED),
}
VERIFICATION_DEFAULTS: dict[str, Any] = {
    "lipschitz_pairs": 2,
    "lipschitz_radius": 0.01,
    "safety": 2.0,
    "delta_window": "staleness",  # or "full"
}
RUN_DEFAULTS: dict[str, Any] = {
    "steps": 100,
    "epochs": None,  # overrides steps: passes over the training rows
    "batch_size": 0,  # 0: full batch
    "shuffle": False,
    "verify_every": 0,
    "seed": 0,
    "out": None,
    "verification": None,
}
SWEEP_AXES = {
    "epsilon": "epsilon",
    "gamma": "gamma",
    "budget": "budget",
    "memory": "memory_fraction",
}


class RunFailure(RuntimeError):
    """Evaluation failed mid-run; ``record`` holds the steps completed."""

    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


def _merge(section: str, given: dict, defaults: dict) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected an object, got {type(given).__name__}")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


@dataclass
class ExperimentConfig:
    objective: dict
    optimizer: dict
    steps: int
    epochs: int | None
    batch_size: int
    shuffle: bool
    verify_every: int
    seed: int
    out: str | None
    verification: dict
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "objective": copy.deepcopy(self.objective),
            "optimizer": copy.deepcopy(self.optimizer),
            "steps": self.steps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "shuffle": self.shuffle,
            "verify_every": self.verify_every,
            "seed": self.seed,
            "out": self.out,
            "verification": copy.deepcopy(self.verification),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def n_params(self) -> int:
        return _objective_size(self.objective)

    def with_updates(self, **optimizer) -> "ExperimentConfig":
        d = self.to_dict()
        d["optimizer"].update(optimizer)
        return parse_config(d)

    def queries_per_step(self) -> int:
        return _queries_per_step(self.optimizer, self.n_params)


def _objective_size(obj: dict) -> int:
    if obj["kind"] == "mlp":
        return MlpSpec(tuple(obj["widths"]), obj["activation"]).n_params
    return int(obj["n"])


def _resolved_memory(opt: dict, n: int) -> int:
    if opt.get("memory") is not None:
        return int(opt["memory"])
    if opt.get("memory_fraction") is not None:
        return max(1, int(round(float(opt["memory_fraction"]) * n)))
    return n


def _queries_per_step(opt: dict, n: int) -> int:
    kind = opt["kind"]
    if kind in ("spsa", "zosgd"):
        return 2 * int(opt["samples"])
    budget = n if kind == "fullfd" else min(int(opt["budget"]), n)
    return 2 * budget if opt["fd_scheme"] == "central" else budget + 1


def parse_config(text: str | dict) -> ExperimentConfig:
    """Resolve a JSON document (or already-decoded dict) to a full config."""
    if isinstance(text, dict):
        raw = copy.deepcopy(text)
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(RUN_DEFAULTS) - {"objective", "optimizer"})
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(unknown)}")
    for key in ("objective", "optimizer"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
        if not isinstance(raw[key], dict) or "kind" not in raw[key]:
            raise ConfigError(f"{key}: an object with a 'kind' is required")

    obj_raw = dict(raw["objective"])
    kind = obj_raw.pop("kind")
    if kind not in OBJECTIVE_DEFAULTS:
        raise ConfigError(f"objective.kind: unknown kind {kind!r}")
    objective = {"kind": kind, **_merge("objective", obj_raw, OBJECTIVE_DEFAULTS[kind])}
    if kind == "mlp":
        objective["dataset"] = _merge("objective.dataset", objective["dataset"] or {}, DATASET_DEFAULTS)

    opt_raw = dict(raw["optimizer"])
    okind = opt_raw.pop("kind")
    if okind not in OPTIMIZER_DEFAULTS:
        raise ConfigError(f"optimizer.kind: unknown kind {okind!r}")
    optimizer = {"kind": okind, **_merge("optimizer", opt_raw, OPTIMIZER_DEFAULTS[okind])}

    run = _merge("config", {k: v for k, v in raw.items() if k in RUN_DEFAULTS}, RUN_DEFAULTS)
    verification = _merge("verification", run["verification"] or {}, VERIFICATION_DEFAULTS)

    cfg = ExperimentConfig(
        objective=objective,
        optimizer=optimizer,
        steps=run["steps"],
        epochs=run["epochs"],
        batch_size=run["batch_size"],
        shuffle=bool(run["shuffle"]),
        verify_every=run["verify_every"],
        seed=run["seed"],
        out=run["out"],
        verification=verification,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    for key in ("steps", "batch_size", "verify_every", "seed"):
        value = getattr(cfg, key)
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise ConfigError(f"{key} must be a non-negative integer, got {value!r}")
    if cfg.epochs is not None and (not isinstance(cfg.epochs, int) or cfg.epochs < 0):
        raise ConfigError(f"epochs must be a non-negative integer, got {cfg.epochs!r}")
    if cfg.verification["delta_window"] not in ("staleness", "full"):
        raise ConfigError("verification.delta_window must be 'staleness' or 'full'")

    obj = cfg.objective
    try:
        n = _objective_size(obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"objective: {exc}") from None
    if obj["kind"] == "mlp":
        ds = obj["dataset"]
        if ds["path"] is not None and (ds["n_features"] is None or ds["n_targets"] is None):
            raise ConfigError("objective.dataset: n_features and n_targets are required with a path")
    elif obj["kind"] == "quadratic" and obj["diag"] is not None and len(obj["diag"]) != n:
        raise ConfigError(f"objective.diag: expected {n} entries, got {len(obj['diag'])}")

    opt = cfg.optimizer
    kind = opt["kind"]
    if kind in ("spsa", "zosgd"):
        try:
            RandomizedZoConfig(opt["alpha"], opt["epsilon"], opt["samples"], opt["seed"])
        except ConfigError as exc:
            raise ConfigError(f"optimizer: {exc}") from None
        return
    if kind == "bccd" and opt["gamma"] != 0.0:
        raise ConfigError("optimizer.gamma: bccd runs with gamma = 0")
    if kind == "fullfd":
        oc = OptimizerConfig(alpha=opt["alpha"], epsilon=opt["epsilon"], budget=n,
                             fd_scheme=opt["fd_scheme"], weight_decay=opt["weight_decay"])
    else:
        if opt["memory"] is not None and opt["memory_fraction"] is not None:
            raise ConfigError("optimizer: give memory or memory_fraction, not both")
        frac = opt["memory_fraction"]
        if frac is not None and not 0 < frac <= 1:
            raise ConfigError(f"optimizer.memory_fraction must lie in (0, 1], got {frac}")
        oc = _optimizer_config(opt, n)
        if oc.budget > n:
            cfg.notes.append(f"budget {oc.budget} exceeds n={n}; clamped to n")
    try:
        resolved = oc.resolve(n)
    except ConfigError as exc:
        raise ConfigError(f"optimizer: {exc}") from None
    if kind != "fullfd":
        cfg.notes.append(
            f"budget {resolved.budget} of {n} parameters "
            f"(budget ≈ {100.0 * resolved.budget / n:.1f}% of parameters), memory {resolved.memory}"
        )


def _optimizer_config(opt: dict, n: int) -> OptimizerConfig:
    return OptimizerConfig(
        alpha=opt["alpha"],
        gamma=opt["gamma"],
        epsilon=opt["epsilon"],
        budget=opt["budget"],
        memory=_resolved_memory(opt, n),
        fd_scheme=opt["fd_scheme"],
        weight_decay=opt["weight_decay"],
        window=opt["window"],
    )


# -- building runs -------------------------------------------------------------


def _dataset(obj: dict, seed: int) -> Dataset:
    ds = obj["dataset"]
    widths = obj["widths"]
    if ds["path"] is not None:
        return load_csv_dataset(ds["path"], ds["n_features"], ds["n_targets"], ds["header"])
    return synthetic_regression(
        ds["rows"],
        seed=seed if ds["seed"] is None else ds["seed"],
        n_features=widths[0],
        n_targets=widths[-1],
        output_scale=ds["output_scale"],
        noise=ds["noise"],
    )


def build_objectives(cfg: ExperimentConfig) -> tuple[Objective, Objective, Objective | None]:
    """(optimizer objective, training monitor, validation monitor or None)."""
    obj = cfg.objective
    kind = obj["kind"]
    if kind == "mlp":
        spec = MlpSpec(tuple(obj["widths"]), obj["activation"])
        data = _dataset(obj, cfg.seed)
        n_val = min(obj["validation_rows"], max(len(data) - 1, 0))
        train, val = data.split(len(data) - n_val)
        return (
            MlpRegression(spec, train),
            MlpRegression(spec, train),
            MlpRegression(spec, val) if len(val) else None,
        )

    def make() -> Objective:
        n = obj["n"]
        if kind == "quadratic":
            diag = obj["diag"]
            if diag is None:
                lo, hi = obj["diag_range"]
                diag = np.linspace(lo, hi, n)
            return Quadratic(diag, obj["shift"])
        if kind == "rosenbrock":
            return Rosenbrock(n)
        return OscillatoryQuadratic(obj["amp"], obj["freq"], n)

    return make(), make(), None


def build_optimizer(cfg: ExperimentConfig, store, objective):
    opt = cfg.optimizer
    kind = opt["kind"]
    n = store.n
    if kind == "cocd":
        return CoCD(store, objective, _optimizer_config(opt, n))
    if kind == "bccd":
        return BCCD(store, objective, _optimizer_config(opt, n))
    if kind == "fullfd":
        return FullFD(store, objective, OptimizerConfig(
            alpha=opt["alpha"], epsilon=opt["epsilon"], fd_scheme=opt["fd_scheme"],
            weight_decay=opt["weight_decay"], budget=n))
    return RandomizedZO(store, objective, RandomizedZoConfig(
        alpha=opt["alpha"], epsilon=opt["epsilon"], samples=opt["samples"], seed=opt["seed"],
        distribution="rademacher" if kind == "spsa" else "gaussian"))


# -- records and CSV -------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    traces: list[StepTrace]
    initial_loss: float
    final: dict = field(default_factory=dict)
    wall_time: float = 0.0
    ledger: BudgetLedger | None = None
    audit: list[tuple] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [self.initial_loss] + [t.loss for t in self.traces]

    def rows(self) -> list[list[str]]:
        return list(_rows(self))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def _initial_row(loss: float) -> list[str]:
    return ["0", _fmt(loss), "", "0", "0", "", "", ""]


def _trace_row(t: StepTrace, q_cum: int, oq_cum: int) -> list[str]:
    return [
        str(t.step), _fmt(t.loss), _fmt(t.step_norm), str(q_cum), str(oq_cum),
        _fmt(t.staleness_error), _fmt(t.bound), _fmt(t.grad_diff),
    ]


def _rows(record: RunRecord):
    yield _initial_row(record.initial_loss)
    q = oq = 0
    for t in record.traces:
        q += t.queries
        oq += t.oracle_queries
        yield _trace_row(t, q, oq)


def _csv_line(fields: Sequence[str]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(fields)
    return buf.getvalue()


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".config.json")


def emit_metrics(record: RunRecord, path: str | Path) -> None:
    """Write the trace CSV and the resolved-config sidecar."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(_csv_line(CSV_HEADER))
            for row in _rows(record):
                fh.write(_csv_line(row))
        with open(_sidecar(path), "w") as fh:
            fh.write(json.dumps(record.config, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def load_record(path: str | Path) -> RunRecord:
    """Rebuild a record from a CSV written by :func:`emit_metrics`."""
    path = Path(path)
    with open(_sidecar(path)) as fh:
        config = json.load(fh)

    def num(s, cast=float):
        return None if s == "" else cast(s)

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = list(reader)
    initial = float(rows[0][1])
    traces = []
    q_prev = oq_prev = 0
    for r in rows[1:]:
        q, oq = int(r[3]), int(r[4])
        traces.append(StepTrace(
            step=int(r[0]), queries=q - q_prev, step_norm=num(r[2]),
            oracle_queries=oq - oq_prev, grad_diff=num(r[7]), staleness_error=num(r[5]),
            loss=num(r[1]), bound=num(r[6]),
        ))
        q_prev, oq_prev = q, oq
    return RunRecord(config=config, traces=traces, initial_loss=initial)


def write_audit(record: RunRecord, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_csv_line(AUDIT_HEADER))
        for row in record.audit:
            fh.write(_csv_line([_fmt(v) if not isinstance(v, bool) else str(v).lower() for v in row]))


# -- running ----------------------------------------------------------------------


def run_experiment(
    cfg: ExperimentConfig | str | dict,
    out: str | Path | None = None,
    verify_start: int = 1,
) -> RunRecord:
    """Execute one run; stream CSV rows to ``out`` (or ``cfg.out``) if given.

    The loss column is the training objective on the full training set,
    evaluated by a separate monitor so it never enters the query ledger.
    When ``verify_every > 0`` every k-th step also measures the staleness
    error (a full ``2n``-query sweep, booked as oracle queries) and, once
    every coordinate has been refreshed, the staleness bound with a
    sampled ``L_eps`` times the safety factor.  Checkpoints before step
    ``verify_start`` are skipped.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = parse_config(cfg)
    out = out if out is not None else cfg.out
    for note in cfg.notes:
        logger.info(note)

    objective, monitor, validation = build_objectives(cfg)
    scale = cfg.objective["init_scale"]
    store = objective.init_store(cfg.seed, scale)
    optimizer = build_optimizer(cfg, store, objective)
    n = store.n
    rows_available = len(objective.dataset) if isinstance(objective, MlpRegression) else 0
    steps = cfg.steps
    if cfg.epochs is not None:
        per_epoch = 1
        if cfg.batch_size and rows_available:
            per_epoch = -(-rows_available // min(cfg.batch_size, rows_available))
        steps = cfg.epochs * per_epoch
    ledger = BudgetLedger(optimizer.queries_per_step)

    record = RunRecord(config=cfg.to_dict(), traces=[], initial_loss=monitor.evaluate(store),
                       ledger=ledger)
    budget = getattr(optimizer.config, "budget", None)
    coordinate_kind = cfg.optimizer["kind"] in ("cocd", "bccd")
    horizon = -(-n // budget) if budget else 1
    vcfg = cfg.verification
    smooth: analysis.SmoothnessEstimate | None = None
    last_oracle: tuple[np.ndarray, np.ndarray] | None = None
    step_norms: list[float] = []

    fh = None
    if out is not None:
        out = Path(out)
        fh = open(out, "w", newline="")
        fh.write(_csv_line(CSV_HEADER))
        fh.write(_csv_line(_initial_row(record.initial_loss)))
        with open(_sidecar(out), "w") as side:
            side.write(json.dumps(record.config, indent=2, sort_keys=True) + "\n")
    started = time.perf_counter()
    q_cum = oq_cum = 0
    try:
        for t in range(1, steps + 1):
            batch = None
            if cfg.batch_size and rows_available:
                batch = next_minibatch(objective.dataset, cfg.batch_size, t - 1,
                                       cfg.seed if cfg.shuffle else None)
            verify = cfg.verify_every > 0 and t % cfg.verify_every == 0 and t >= verify_start
            point = store.to_vector() if verify and coordinate_kind else None
            trace = optimizer.step(batch, verify=verify)

            if verify and coordinate_kind and trace.oracle_gradient is not None:
                extra_q = objective.query_count
                if smooth is None and vcfg["lipschitz_pairs"] > 0:
                    probe = store.copy()
                    probe.assign_vector(point)
                    smooth = analysis.estimate_L_eps(
                        objective, probe, optimizer.config.epsilon, vcfg["lipschitz_pairs"],
                        seed=cfg.seed, radius=vcfg["lipschitz_radius"], batch=batch,
                    )
                trace.oracle_queries += objective.query_count - extra_q
                if last_oracle is not None and batch is None:
                    sec = analysis.secant_L_eps(trace.oracle_gradient, last_oracle[0], point, last_oracle[1])
                    seen = analysis.SmoothnessEstimate(0.0, sec, 1, optimizer.config.epsilon)
                    smooth = seen if smooth is None else smooth.merge(seen)
                last_oracle = (trace.oracle_gradient, point)
                full_memory = optimizer.config.memory == n and optimizer.config.gamma == 1.0
                if full_memory and t >= horizon and step_norms and smooth is not None:
                    window = None if vcfg["delta_window"] == "full" else horizon
                    delta = analysis.track_delta(step_norms, window).delta
                    l_hat = vcfg["safety"] * smooth.L_eps
                    trace.bound = analysis.error_bound(n, budget, l_hat, delta)
                    record.audit.append((t, trace.staleness_error, trace.bound, l_hat, delta,
                                         trace.staleness_error <= trace.bound))
            trace.oracle_gradient = None
            step_norms.append(trace.step_norm)
            trace.loss = monitor.evaluate(store)
            if not math.isfinite(trace.loss):
                raise EvaluationError(f"training loss became {trace.loss} at step {t}")
            record.traces.append(trace)
            ledger.record(trace)
            q_cum += trace.queries
            oq_cum += trace.oracle_queries
            if fh is not None:
                fh.write(_csv_line(_trace_row(trace, q_cum, oq_cum)))
    except EvaluationError as exc:
        record.wall_time = time.perf_counter() - started
        raise RunFailure(f"step {len(record.traces) + 1}: {exc}", record) from exc
    finally:
        if fh is not None:
            fh.close()
    record.wall_time = time.perf_counter() - started
    record.final = {"train_loss": record.losses[-1]}
    if validation is not None:
        record.final["val_loss"] = validation.evaluate(store)
    record.final["queries"] = ledger.queries
    record.final["oracle_queries"] = ledger.oracle_queries
    return record


def sweep(
    base: ExperimentConfig | str | dict,
    axis: str,
    values: Sequence[float],
    out: str | Path | None = None,
) -> list[RunRecord]:
    """One run per value of ``axis``; every run starts from the same seed.

    ``memory`` values are fractions of ``n``.  With ``out``, each run writes
    ``<stem>_<axis>=<value>.csv`` beside a consolidated loss table at ``out``.
    """
    if not isinstance(base, ExperimentConfig):
        base = parse_config(base)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    if base.optimizer["kind"] not in ("cocd", "bccd"):
        raise ConfigError("sweeps apply to coordinate optimizers (cocd, bccd)")
    key = SWEEP_AXES[axis]
    configs = []
    for v in values:
        update = {key: int(v) if axis == "budget" else float(v)}
        if axis == "memory":
            update["memory"] = None
        try:
            configs.append(base.with_updates(**update))
        except ConfigError as exc:
            raise ConfigError(f"{axis}={v}: {exc}") from None
    out = Path(out) if out is not None else None
    records = []
    for v, cfg in zip(values, configs):
        run_out = None
        if out is not None:
            run_out = out.with_name(f"{out.stem}_{axis}={v}.csv")
        records.append(run_experiment(cfg, run_out))
    if out is not None:
        labels = [f"{axis}={v}" for v in values]
        _write_table(out, ["step"] + labels,
                     [[str(i)] + [_fmt(r.losses[i]) for r in records]
                      for i in range(len(records[0].losses))])
    return records


def _write_table(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_csv_line(header))
        for row in rows:
            fh.write(_csv_line(row))


@dataclass
class ComparisonRecord:
    methods: list[str]
    records: dict[str, list[RunRecord]]
    queries_per_step: int
    deterministic: dict[str, bool]
    variance: dict[str, float]


def compare_budget_matched(
    configs: Sequence[ExperimentConfig | str | dict],
    seeds: Sequence[int] | None = None,
    out: str | Path | None = None,
) -> ComparisonRecord:
    """Run every config on one objective at equal queries per step.

    ``seeds`` re-runs each method with those optimizer seeds (the data and
    initialization seed stays fixed) and reports the largest per-step loss
    variance across seeds; a method is deterministic when it is zero.
    """
    configs = [c if isinstance(c, ExperimentConfig) else parse_config(c) for c in configs]
    if not configs:
        raise ConfigError("nothing to compare")
    budgets = {}
    for c in configs:
        budgets[_label(c)] = c.queries_per_step()
    ref_label, ref = next(iter(budgets.items()))
    for label, q in budgets.items():
        if q != ref:
            raise ConfigError(
                f"budget mismatch: {label} uses {q} queries per step, {ref_label} uses {ref}"
            )
    first = configs[0]
    for c in configs[1:]:
        if c.objective != first.objective or c.seed != first.seed or c.steps != first.steps:
            raise ConfigError(f"{_label(c)}: objective, seed and steps must match {_label(first)}")

    seeds = list(seeds) if seeds else [None]
    records: dict[str, list[RunRecord]] = {}
    for c in configs:
        runs = []
        for s in seeds:
            run_cfg = c if s is None or "seed" not in c.optimizer else c.with_updates(seed=s)
            runs.append(run_experiment(run_cfg, None))
        records[_label(c)] = runs
    variance, deterministic = {}, {}
    for label, runs in records.items():
        losses = np.array([r.losses for r in runs])
        deterministic[label] = all(r.losses == runs[0].losses for r in runs)
        # np.var of identical values can round to a tiny nonzero
        variance[label] = 0.0 if deterministic[label] else float(np.max(np.var(losses, axis=0)))
    if out is not None:
        labels = list(records)
        length = len(records[labels[0]][0].losses)
        _write_table(Path(out), ["step", "queries_cum"] + [f"loss_{l}" for l in labels],
                     [[str(i), str(i * ref)] + [_fmt(records[l][0].losses[i]) for l in labels]
                      for i in range(length)])
    return ComparisonRecord(list(records), records, ref, deterministic, variance)


def _label(c: ExperimentConfig) -> str:
    return c.optimizer["kind"]


@dataclass
class StudyRecord:
    budgets: list[int]
    mean_errors: list[float]
    fit: analysis.LogLinearFit | None
    excluded: list[int]
    records: list[RunRecord]


def budget_error_study(
    base: ExperimentConfig | str | dict,
    budgets: Sequence[int],
    post_warmup_steps: int | None = None,
    out: str | Path | None = None,
) -> StudyRecord:
    """Mean staleness error against ``log2 B`` with a least-squares line.

    Each budget runs CoCD with ``m = n`` for ``ceil(n/B)`` warm-up steps
    (until every coordinate holds a difference) plus ``post_warmup_steps``
    (default ``base.steps``), measuring every ``verify_every`` steps (10 if
    unset) after warm-up.  ``B = n`` has zero error by construction and is
    left out of the fit.
    """
    if not isinstance(base, ExperimentConfig):
        base = parse_config(base)
    budgets = [int(b) for b in budgets]
    if budgets != sorted(budgets):
        raise ConfigError("budgets must be ascending")
    n = base.n_params
    if budgets and budgets[-1] > n:
        raise ConfigError(f"budget {budgets[-1]} exceeds n={n}")
    cadence = base.verify_every or 10
    extra = base.steps if post_warmup_steps is None else post_warmup_steps
    means, kept, excluded, records = [], [], [], []
    for b in budgets:
        warm = -(-n // b)
        d = base.to_dict()
        d["optimizer"].update(kind="cocd", budget=b, memory=None, memory_fraction=None)
        d["steps"] = warm + extra
        d["epochs"] = None
        d["verify_every"] = cadence
        cfg = parse_config(d)
        run_out = None
        if out is not None:
            run_out = Path(out).with_name(f"{Path(out).stem}_B={b}.csv")
        rec = run_experiment(cfg, run_out, verify_start=warm)
        records.append(rec)
        errs = [t.staleness_error for t in rec.traces
                if t.staleness_error is not None and t.step >= warm]
        mean = float(np.mean(errs)) if errs else float("nan")
        means.append(mean)
        if b == n:
            excluded.append(b)
        else:
            kept.append((b, mean))
    fit = None
    if len(kept) >= 2:
        fit = analysis.loglinear_fit([b for b, _ in kept], [e for _, e in kept])
    if out is not None:
        _write_table(Path(out), ["budget", "log2_budget", "mean_staleness_error", "in_fit"],
                     [[str(b), _fmt(math.log2(b)), _fmt(e), str(b not in excluded).lower()]
                      for b, e in zip(budgets, means)])
    return StudyRecord(budgets, means, fit, excluded, records)
