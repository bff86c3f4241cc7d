import csv
import json

import numpy as np
import pytest

from cocd.harness import (
    CSV_HEADER,
    RunFailure,
    budget_error_study,
    compare_budget_matched,
    emit_metrics,
    load_record,
    parse_config,
    run_experiment,
    sweep,
)
from cocd.objectives import ConfigError

QUAD = {"objective": {"kind": "quadratic", "n": 8}, "optimizer": {"kind": "cocd", "budget": 2, "alpha": 0.1, "epsilon": 1e-3}}
SMALL_MLP = {
    "objective": {"kind": "mlp", "widths": [21, 16, 16, 7], "dataset": {"rows": 256}, "validation_rows": 64},
    "optimizer": {"kind": "cocd", "alpha": 0.005, "epsilon": 1.0, "budget": 16},
    "steps": 150,
    "batch_size": 32,
}


def config(**updates):
    d = json.loads(json.dumps(QUAD))
    d["steps"] = 10
    d.update(updates)
    return d


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestParseConfig:
    def test_minimal_defaults(self):
        cfg = parse_config('{"objective": {"kind": "quadratic", "n": 8}, "optimizer": {"kind": "cocd"}, "steps": 10}')
        assert cfg.optimizer["gamma"] == 1.0
        assert cfg.optimizer["fd_scheme"] == "central"
        assert cfg.verify_every == 0 and cfg.batch_size == 0

    def test_gamma_rejected(self):
        with pytest.raises(ConfigError, match=r"gamma must lie in \[0,1\]"):
            parse_config(config(optimizer={"kind": "cocd", "gamma": 1.5, "budget": 2}))

    def test_budget_percentage_echoed(self):
        cfg = parse_config({
            "objective": {"kind": "mlp", "widths": [21, 64, 64, 64, 32, 7]},
            "optimizer": {"kind": "cocd", "budget": 64},
        })
        assert cfg.n_params == 12039
        assert any("budget ≈ 0.5% of parameters" in note for note in cfg.notes)

    def test_syntax_error_location(self):
        with pytest.raises(ConfigError, match="line 2, column"):
            parse_config('{"steps": 1,\n "objective": }')

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key.*learning_rate"):
            parse_config(config(optimizer={"kind": "cocd", "learning_rate": 0.1}))

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="epoch_count"):
            parse_config(config(epoch_count=3))

    def test_budget_above_memory_named(self):
        with pytest.raises(ConfigError, match="budget 4 exceeds memory 2"):
            parse_config(config(optimizer={"kind": "cocd", "budget": 4, "memory": 2}))

    def test_missing_section(self):
        with pytest.raises(ConfigError, match="optimizer"):
            parse_config({"objective": {"kind": "quadratic"}})

    def test_negative_cadence(self):
        with pytest.raises(ConfigError, match="verify_every"):
            parse_config(config(verify_every=-1))

    def test_bccd_nonzero_gamma(self):
        with pytest.raises(ConfigError, match="gamma"):
            parse_config(config(optimizer={"kind": "bccd", "gamma": 0.5}))

    def test_round_trip(self):
        cfg = parse_config(config())
        assert parse_config(cfg.to_json()).to_dict() == cfg.to_dict()


class TestRunExperiment:
    def test_identical_bytes(self, tmp_path):
        run_experiment(config(verify_every=2), tmp_path / "a.csv")
        run_experiment(config(verify_every=2), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.csv.config.json").read_bytes() == (tmp_path / "b.csv.config.json").read_bytes()

    def test_zero_steps(self, tmp_path):
        rec = run_experiment(config(steps=0), tmp_path / "a.csv")
        assert rec.traces == [] and len(rec.losses) == 1
        assert len(read_rows(tmp_path / "a.csv")) == 2

    def test_ledger_conserved(self, tmp_path):
        rec = run_experiment(config(steps=7, verify_every=3), tmp_path / "a.csv")
        last = read_rows(tmp_path / "a.csv")[-1]
        assert int(last[3]) == 7 * 4
        assert int(last[4]) > 0
        assert rec.ledger.conserved

    def test_cocd_beats_bccd_on_stand_in(self):
        base = {
            "objective": {"kind": "mlp", "widths": [21, 64, 64, 64, 32, 7], "dataset": {"rows": 320}, "validation_rows": 64},
            "optimizer": {"kind": "cocd", "alpha": 0.002, "epsilon": 1.0, "budget": 64, "weight_decay": 1e-4},
            "steps": 40,
            "batch_size": 64,
        }
        cocd = run_experiment(base)
        base["optimizer"] = {"kind": "bccd", "alpha": 0.002, "budget": 64, "weight_decay": 1e-4}
        bccd = run_experiment(base)
        assert cocd.final["val_loss"] < bccd.final["val_loss"]
        assert cocd.losses[-1] < bccd.losses[-1]

    def test_failure_flushes_partial_record(self, tmp_path):
        # one step lands near 1e79, where the quartic term overflows
        cfg = {
            "objective": {"kind": "rosenbrock", "n": 4, "init_scale": 2.0},
            "optimizer": {"kind": "cocd", "budget": 4, "alpha": 1e76, "epsilon": 1e-3},
            "steps": 50,
        }
        with pytest.raises(RunFailure, match="step 1: training loss became inf") as info:
            run_experiment(cfg, tmp_path / "a.csv")
        done = len(info.value.record.traces)
        assert done == 0
        rows = read_rows(tmp_path / "a.csv")
        assert len(rows) == 1 + 1 + done

    def test_verification_columns(self, tmp_path):
        run_experiment(config(steps=8, verify_every=2), tmp_path / "a.csv")
        rows = read_rows(tmp_path / "a.csv")[1:]
        checked = [r for r in rows if r[5]]
        assert [r[0] for r in checked] == ["2", "4", "6", "8"]
        # bounds appear once every coordinate holds a difference (step 4 for n=8, B=2)
        assert [r[0] for r in rows if r[6]] == ["4", "6", "8"]
        for r in rows:
            if r[6]:
                assert float(r[5]) <= float(r[6])

    def test_epochs_set_step_count(self):
        cfg = json.loads(json.dumps(SMALL_MLP))
        cfg.update(epochs=2, batch_size=64)
        rec = run_experiment(cfg)
        assert len(rec.traces) == 2 * 3  # 192 training rows in batches of 64

    def test_shuffle_changes_trace(self):
        a = run_experiment({**SMALL_MLP, "steps": 5})
        b = run_experiment({**SMALL_MLP, "steps": 5, "shuffle": True})
        assert a.losses[0] == b.losses[0] and a.losses[-1] != b.losses[-1]

    @pytest.mark.parametrize("kind", ["spsa", "zosgd", "fullfd", "bccd"])
    def test_other_optimizers_descend(self, kind):
        opt = {"kind": kind, "alpha": 0.1}
        if kind in ("spsa", "zosgd"):
            opt["samples"] = 4
        rec = run_experiment({"objective": {"kind": "quadratic", "n": 8}, "optimizer": opt, "steps": 30})
        assert rec.losses[-1] < rec.losses[0]


class TestEmit:
    def test_row_count(self, tmp_path):
        rec = run_experiment(config(steps=3))
        emit_metrics(rec, tmp_path / "m.csv")
        rows = read_rows(tmp_path / "m.csv")
        assert tuple(rows[0]) == CSV_HEADER
        assert len(rows) == 1 + 4

    def test_disabled_columns_empty(self, tmp_path):
        emit_metrics(run_experiment(config(steps=3)), tmp_path / "m.csv")
        for r in read_rows(tmp_path / "m.csv")[1:]:
            assert r[5] == "" and r[6] == ""

    def test_reemission_identical(self, tmp_path):
        run_experiment(config(steps=6, verify_every=2), tmp_path / "a.csv")
        emit_metrics(load_record(tmp_path / "a.csv"), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_sidecar_echoes_config(self, tmp_path):
        run_experiment(config(), tmp_path / "a.csv")
        side = json.loads((tmp_path / "a.csv.config.json").read_text())
        assert side["optimizer"]["gamma"] == 1.0 and side["steps"] == 10

    def test_unwritable_path_named(self, tmp_path):
        rec = run_experiment(config(steps=1))
        with pytest.raises(OSError, match="missing"):
            emit_metrics(rec, tmp_path / "missing" / "m.csv")


class TestSweep:
    def test_gamma_zero_slowest(self):
        records = sweep(SMALL_MLP, "gamma", [0.0, 0.5, 0.9, 0.95, 1.0])
        assert len(records) == 5
        finals = [r.losses[-1] for r in records]
        assert finals[0] == max(finals)

    def test_memory_fractions_converge_smaller_is_noisier(self):
        records = sweep(dict(SMALL_MLP, steps=300), "memory", [0.25, 0.5, 1.0])
        assert [r.config["optimizer"]["memory_fraction"] for r in records] == [0.25, 0.5, 1.0]
        roughness = []
        for r in records:
            losses = np.array(r.losses)
            assert losses[-1] < losses[0]
            # curvature of the loss trace relative to its progress per step
            roughness.append(np.std(np.diff(losses, 2)) / np.mean(np.abs(np.diff(losses))))
        assert roughness == sorted(roughness, reverse=True)

    def test_single_value_equals_run(self):
        base = config(steps=6)
        (only,) = sweep(base, "epsilon", [1e-3])
        assert only.losses == run_experiment(base).losses

    def test_invalid_value_aborts_before_runs(self, tmp_path):
        with pytest.raises(ConfigError, match="gamma=1.5"):
            sweep(config(), "gamma", [0.5, 1.5], out=tmp_path / "s.csv")
        assert not list(tmp_path.iterdir())

    def test_base_not_mutated(self):
        cfg = parse_config(config())
        before = cfg.to_dict()
        sweep(cfg, "gamma", [0.0, 0.5])
        assert cfg.to_dict() == before

    def test_consolidated_table(self, tmp_path):
        sweep(config(steps=4), "budget", [1, 2], out=tmp_path / "s.csv")
        rows = read_rows(tmp_path / "s.csv")
        assert rows[0] == ["step", "budget=1", "budget=2"]
        assert len(rows) == 1 + 5
        assert (tmp_path / "s_budget=1.csv").exists()

    def test_unknown_axis(self):
        with pytest.raises(ConfigError):
            sweep(config(), "alpha", [0.1])


class TestCompare:
    def quad(self, kind, **kw):
        return {"objective": {"kind": "quadratic", "n": 64}, "optimizer": {"kind": kind, "alpha": 0.05, **kw}, "steps": 20}

    def test_matched_accepted(self):
        result = compare_budget_matched([self.quad("cocd", budget=32, epsilon=1e-3), self.quad("spsa", samples=32)])
        assert result.queries_per_step == 64

    def test_mismatch_names_method(self):
        with pytest.raises(ConfigError, match="zosgd uses 66 queries per step, cocd uses 64"):
            compare_budget_matched([self.quad("cocd", budget=32), self.quad("zosgd", samples=33)])

    def test_determinism_column(self, tmp_path):
        result = compare_budget_matched(
            [self.quad("cocd", budget=32, epsilon=1e-3), self.quad("spsa", samples=32), self.quad("zosgd", samples=32)],
            seeds=[0, 1, 2, 3, 4],
            out=tmp_path / "c.csv",
        )
        assert result.deterministic["cocd"] and result.variance["cocd"] == 0.0
        assert result.variance["spsa"] > 0 and result.variance["zosgd"] > 0
        ledgers = {m: (r[0].ledger.queries, r[0].ledger.steps) for m, r in result.records.items()}
        assert len(set(ledgers.values())) == 1
        rows = read_rows(tmp_path / "c.csv")
        assert rows[0] == ["step", "queries_cum", "loss_cocd", "loss_spsa", "loss_zosgd"]
        assert rows[-1][1] == str(20 * 64)

    def test_objective_must_match(self):
        other = self.quad("spsa", samples=32)
        other["objective"]["n"] = 32
        with pytest.raises(ConfigError):
            compare_budget_matched([self.quad("cocd", budget=32), other])


class TestBudgetStudy:
    BASE = {
        "objective": {"kind": "quadratic", "n": 32, "diag_range": [0.5, 1.0]},
        "optimizer": {"kind": "cocd", "alpha": 0.1, "epsilon": 1e-3},
        "steps": 20,
        "verify_every": 5,
    }

    def test_full_budget_excluded(self, tmp_path):
        study = budget_error_study(self.BASE, [4, 8, 32], out=tmp_path / "s.csv")
        assert study.excluded == [32]
        assert study.mean_errors[-1] == 0.0
        rows = read_rows(tmp_path / "s.csv")
        assert rows[-1][-1] == "false"

    def test_two_budgets_secant(self):
        study = budget_error_study(self.BASE, [4, 16])
        secant = (study.mean_errors[1] - study.mean_errors[0]) / 2.0
        assert np.isclose(study.fit.slope, secant, rtol=1e-12)

    def test_error_decreases_with_budget(self):
        study = budget_error_study(self.BASE, [2, 4, 8, 16])
        assert study.fit.slope < 0

    def test_rejects_unsorted(self):
        with pytest.raises(ConfigError):
            budget_error_study(self.BASE, [8, 4])

    def test_rejects_budget_above_n(self):
        with pytest.raises(ConfigError):
            budget_error_study(self.BASE, [4, 64])
