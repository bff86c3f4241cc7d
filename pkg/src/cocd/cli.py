"""``cocd`` command line.

Exit status is 0 on success, 2 for configuration errors and 3 when an
objective evaluation fails mid-run (the partial CSV is kept).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (
    RunFailure,
    budget_error_study,
    compare_budget_matched,
    parse_config,
    run_experiment,
    sweep,
    write_audit,
)
from .objectives import ConfigError, DatasetError
from .optimizer import EvaluationError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_EVALUATION = 0, 1, 2, 3

log = logging.getLogger("cocd")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load(path: str, args) -> dict:
    """Read a config file and apply command-line overrides."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "verify_every", None) is not None:
        raw["verify_every"] = args.verify_every
    if args.header:
        obj = raw.setdefault("objective", {})
        if isinstance(obj, dict):
            ds = obj.get("dataset") or {}
            ds["header"] = True
            obj["dataset"] = ds
    return raw


def _parse(path: str, args):
    cfg = parse_config(_load(path, args))
    for note in cfg.notes:
        log.info(note)
    return cfg


def _print_resolved(cfg) -> None:
    sys.stderr.write(cfg.to_json())


def cmd_run(args) -> int:
    cfg = _parse(args.config, args)
    if args.print_config:
        _print_resolved(cfg)
    out = args.out or cfg.out
    record = run_experiment(cfg, out)
    summary = {k: v for k, v in record.final.items()}
    summary["steps"] = len(record.traces)
    summary["wall_time_s"] = round(record.wall_time, 3)
    print(json.dumps(summary, sort_keys=True))
    if record.audit and out:
        write_audit(record, Path(out).with_suffix(".audit.csv"))
    if record.audit and not all(row[-1] for row in record.audit):
        log.warning("staleness bound violated at %d checkpoint(s)",
                    sum(not row[-1] for row in record.audit))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _parse(args.config, args)
    records = sweep(cfg, args.axis, args.values, args.out or cfg.out)
    for v, r in zip(args.values, records):
        print(f"{args.axis}={v}\tfinal_loss={r.losses[-1]!r}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfgs = [_parse(p, args) for p in args.configs]
    result = compare_budget_matched(cfgs, seeds=args.seeds, out=args.out)
    print(f"queries_per_step={result.queries_per_step}")
    for m in result.methods:
        print(f"{m}\tfinal_loss={result.records[m][0].losses[-1]!r}\t"
              f"deterministic={str(result.deterministic[m]).lower()}\tvariance={result.variance[m]!r}")
    return EXIT_OK


def cmd_bound_check(args) -> int:
    cfg = _parse(args.config, args)
    study = budget_error_study(cfg, args.budgets, out=args.out or cfg.out)
    violated = 0
    for b, e, rec in zip(study.budgets, study.mean_errors, study.records):
        bad = sum(not row[-1] for row in rec.audit)
        violated += bad
        print(f"B={b}\tmean_staleness_error={e!r}\tcheckpoints={len(rec.audit)}\tviolations={bad}")
    if study.fit is not None:
        print(f"slope={study.fit.slope!r}\tintercept={study.fit.intercept!r}\tr_squared={study.fit.r_squared!r}")
    if study.excluded:
        print(f"excluded from fit: {','.join(map(str, study.excluded))}")
    return EXIT_FAILED if violated else EXIT_OK


def cmd_verify(args) -> int:
    from .invariants import run_checks

    results = run_checks()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}" + (f"  ({r.detail})" if r.detail else ""))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="CSV output path (overrides the config)")
    common.add_argument("--verify-every", type=int, metavar="K",
                        help="measure staleness every K steps (0 = off)")
    common.add_argument("--header", action="store_true",
                        help="dataset CSV has one header line to skip")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cocd", description="Coherent coordinate descent experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="train once and write a trace CSV")
    p.add_argument("config")
    p.add_argument("--print-config", action="store_true", help="echo the resolved config to stderr")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="one run per value of an ablation axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=["epsilon", "gamma", "budget", "memory"])
    p.add_argument("--values", required=True, type=_floats, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", parents=[common], help="methods at an equal query budget")
    p.add_argument("configs", nargs="+")
    p.add_argument("--seeds", type=_ints, help="optimizer seeds to repeat each method with")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bound-check", parents=[common], help="staleness error against budget")
    p.add_argument("config")
    p.add_argument("--budgets", required=True, type=_ints, help="ascending, comma-separated")
    p.set_defaults(func=cmd_bound_check)

    p = sub.add_parser("verify", parents=[common], help="run the built-in invariant checks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailure as exc:
        print(f"evaluation failed after {len(exc.record.traces)} step(s): {exc}", file=sys.stderr)
        return EXIT_EVALUATION
    except EvaluationError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVALUATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
