import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from nlrenewal import cli, harness
from nlrenewal.errors import ConfigError, NumericsError
from nlrenewal.harness import ExperimentConfig

ROOT = Path(__file__).resolve().parents[1]

LINEAR = {
    "experiment": "linear-renewal",
    "b_grid": [5, 10],
    "reps": 10_000,
    "master_seed": 3,
    "increments": {"kind": "exponential", "mean": 1.0},
}

EXPANSION = {
    "experiment": "perturbed-expansion",
    "b_grid": [10, 20],
    "reps": 2000,
    "master_seed": 4,
    "increments": {"kind": "exponential", "mean": 1.0},
    "perturbation": {"kind": "scaled_partial_sum"},
    "options": {"constants_reps": 2000},
}

DIAGNOSTICS = {
    "experiment": "diagnostics",
    "reps": 1000,
    "master_seed": 5,
    "increments": {"kind": "exponential", "mean": 1.0},
    "perturbation": {"kind": "scaled_partial_sum"},
    "options": {"grid": [20, 40, 80]},
}


def write_toml(path: Path, d: dict) -> Path:
    lines = []
    tables = {}
    for k, v in d.items():
        if isinstance(v, dict):
            tables[k] = v
        else:
            lines.append(f"{k} = {json.dumps(v)}")
    for name, t in tables.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {json.dumps(v)}" for k, v in t.items())
    path.write_text("\n".join(lines) + "\n")
    return path


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig.from_dict(EXPANSION)
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("patch", [
        {"b_grid": []},
        {"b_grid": [10, 5]},
        {"reps": 0},
        {"experiment": "bogus"},
        {"surprise": 1},
        {"master_seed": -1},
        {"increments": {"kind": "cauchy"}},
    ])
    def test_invalid(self, patch):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({**LINEAR, **patch})

    def test_missing_experiment(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"reps": 10})

    def test_rank_table_required(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"experiment": "rank-sprt-et"})

    def test_load_toml(self, tmp_path):
        cfg = ExperimentConfig.load(write_toml(tmp_path / "c.toml", LINEAR))
        assert cfg.b_grid == (5.0, 10.0) and cfg.increments.kind == "exponential"

    def test_bad_toml(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("experiment = \n")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(p)

    def test_overrides(self):
        cfg = ExperimentConfig.from_dict(LINEAR).with_overrides(seed=99, exact_repro=True)
        assert cfg.master_seed == 99 and cfg.exact_repro

    @pytest.mark.parametrize("name", sorted(p.name for p in (ROOT / "configs").glob("*.toml")))
    def test_shipped_configs_parse(self, name):
        ExperimentConfig.load(ROOT / "configs" / name)


class TestRun:
    def test_linear(self):
        s = harness.run(ExperimentConfig.from_dict(LINEAR))
        for row, target in zip(s.rows, (6.0, 11.0)):
            assert abs(row["mc"] - target) <= 4 * row["se"]
            assert row["predicted"] == pytest.approx(target, abs=0.05)
        assert s.all_passed and s.censored == 0

    def test_constants(self):
        cfg = ExperimentConfig.from_dict({"experiment": "constants", "options": {"Delta": 2.0, "A": 1.0}})
        s = harness.run(cfg)
        assert s.meta["mu"] == pytest.approx(math.log(8 / 9), abs=1e-8)
        assert s.meta["h_integral"] is None
        assert [r["name"] for r in s.rows] == ["mu", "h_integral", "xi_mean_limit", "c_eta"]

    def test_expansion_csv_header(self):
        s = harness.run(ExperimentConfig.from_dict(EXPANSION))
        assert harness.render(s, "csv").splitlines()[0] == "b,predicted,mc,se,residual,band_lo,band_hi"
        assert set(s.flags) == {"residual_decay", "final_residual"}

    def test_diagnostics_json_array(self):
        s = harness.run(ExperimentConfig.from_dict(DIAGNOSTICS))
        data = json.loads(harness.render(s, "json"))
        assert isinstance(data, list) and len(data) > 0
        assert all(set(r) == {"condition", "n", "estimate", "std_error", "pass"} for r in data)

    def test_byte_identical_reruns_and_thread_counts(self):
        cfg = ExperimentConfig.from_dict({**EXPANSION, "exact_repro": True})
        a = harness.render(harness.run(cfg, 1), "json")
        b = harness.render(harness.run(cfg, 1), "json")
        c = harness.render(harness.run(cfg, 3), "json")
        assert a == b == c

    def test_seed_changes_output(self):
        cfg = ExperimentConfig.from_dict(LINEAR)
        a = harness.render(harness.run(cfg), "csv")
        b = harness.render(harness.run(cfg.with_overrides(seed=4)), "csv")
        assert a != b

    def test_sprt_rows(self):
        cfg = ExperimentConfig.from_dict({"experiment": "rank-sprt-et", "reps": 5,
                                          "rank_sprt": {"Delta": 2, "A": 2, "a": 2, "b": 2}})
        s = harness.run_sprt_rows(cfg)
        assert harness.render(s, "csv").splitlines()[0] == "rep,stop_n,boundary,overshoot"
        assert len(s.rows) == 5

    def test_rank_et_reflects_negative_drift(self):
        cfg = ExperimentConfig.from_dict({"experiment": "rank-sprt-et", "reps": 400, "master_seed": 2,
                                          "rank_sprt": {"Delta": 2, "A": 1, "a": 4, "b": 4},
                                          "options": {"constants_reps": 2000, "n_max": 400}})
        s = harness.run(cfg)
        assert s.meta["reflect"] and s.meta["mu"] < 0
        assert s.rows[0]["predicted"] > 0

    def test_unknown_format(self):
        s = harness.run(ExperimentConfig.from_dict(LINEAR))
        with pytest.raises(ConfigError):
            harness.render(s, "xml")

    def test_json_safe(self):
        import numpy as np

        assert harness.json_safe({"a": np.float64(1.5), "b": [float("nan")], 3: np.int64(2)}) == \
            {"a": 1.5, "b": ["nan"], "3": 2}


class TestCli:
    def test_simulate_writes_file(self, tmp_path):
        cfg = write_toml(tmp_path / "c.toml", LINEAR)
        out = tmp_path / "o.csv"
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(out), "--exact-repro"]) == 0
        assert out.read_text().startswith("b,predicted,mc,se,residual,overshoot")

    def test_simulate_json_and_report(self, tmp_path, capsys):
        cfg = write_toml(tmp_path / "c.toml", LINEAR)
        out = tmp_path / "o.json"
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(out), "--format", "json"]) == 0
        assert cli.main(["report", str(out)]) == 0
        assert "linear-renewal wald_b5: PASS" in capsys.readouterr().out

    def test_diagnose_and_report(self, tmp_path, capsys):
        cfg = write_toml(tmp_path / "d.toml", DIAGNOSTICS)
        out = tmp_path / "d.json"
        assert cli.main(["diagnose", "--config", str(cfg), "--out", str(out)]) == 0
        assert isinstance(json.loads(out.read_text()), list)
        assert cli.main(["report", str(out)]) == 0
        assert "diagnostics upper_tail" in capsys.readouterr().out

    def test_sprt(self, tmp_path, capsys):
        cfg = write_toml(tmp_path / "s.toml", {"experiment": "rank-sprt-et", "reps": 3,
                                               "rank_sprt": {"Delta": 2.0, "A": 2.0, "a": 2.0, "b": 2.0}})
        assert cli.main(["sprt", "--config", str(cfg)]) == 0
        assert capsys.readouterr().out.splitlines()[0] == "rep,stop_n,boundary,overshoot"

    def test_constants_flags(self, capsys):
        assert cli.main(["constants", "--Delta", "2", "--A", "1", "--n-max", "400"]) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["mu"] == pytest.approx(math.log(8 / 9), abs=1e-8)
        assert set(data) >= {"mu", "h_integral", "c_eta", "err_estimates"}

    def test_constants_needs_parameters(self):
        assert cli.main(["constants"]) == 2

    def test_config_error_exit_code(self, tmp_path):
        cfg = write_toml(tmp_path / "c.toml", {**LINEAR, "b_grid": []})
        assert cli.main(["simulate", "--config", str(cfg)]) == 2

    def test_numerics_error_exit_code(self, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise NumericsError("quadrature did not converge")

        monkeypatch.setattr(harness, "run", boom)
        cfg = write_toml(tmp_path / "c.toml", LINEAR)
        assert cli.main(["simulate", "--config", str(cfg)]) == 3

    def test_io_error_exit_codes(self, tmp_path):
        assert cli.main(["simulate", "--config", str(tmp_path / "missing.toml")]) == 4
        cfg = write_toml(tmp_path / "c.toml", {"experiment": "constants", "options": {"Delta": 2.0, "A": 2.0}})
        bad_out = tmp_path / "no_such_dir" / "o.csv"
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(bad_out)]) == 4

    def test_acceptance_flags_do_not_change_exit_code(self, tmp_path):
        # a tiny run whose intermediate band is deliberately too narrow
        cfg = write_toml(tmp_path / "c.toml", {
            "experiment": "intermediate", "b_grid": [10], "reps": 1000,
            "increments": {"kind": "exponential", "mean": 1.0},
            "options": {"band_multiplier": 1e-9, "constants_reps": 1000},
        })
        out = tmp_path / "o.json"
        assert cli.main(["simulate", "--config", str(cfg), "--out", str(out), "--format", "json"]) == 0
        assert json.loads(out.read_text())["flags"]["band_b10"] is False

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "nlrenewal", "constants", "--Delta", "2", "--A", "2",
                            "--n-max", "200"], capture_output=True, text=True, check=True)
        assert json.loads(r.stdout)["h_integral"] == pytest.approx(0.5 * math.log(1.5), abs=1e-10)
