import csv
import json
import math

import numpy as np
import pytest

from thzvlc import env, harness, policy_net
from thzvlc.harness import ConfigError, build_task_stream, load_spec, main, parse_config_text, run, serialize_spec

TOY_CONFIG = """
[scenario]
num_users = 2
cells_per_side = 3
slots_per_period = 2
vap_positions = 2,2; 4,2; 2,4; 4,4
sbs_positions = 2,3; 4,3

[learning]
inner_rollouts = 3
outer_rollouts = 2
meta_iterations = 2
tasks_per_batch = 2
hidden_sizes = 8

[tasks]
count = 3
locality_radius = 1

[run]
algorithm = mpg
master_seed = 0
eval_periods = 2
"""


def toy_spec(tmp_path, out_name="out", extra=None):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(TOY_CONFIG)
    overrides = {("run", "output_dir"): str(tmp_path / out_name)}
    overrides.update(extra or {})
    return load_spec(cfg, environ={}, overrides=overrides)


class TestLoadSpec:
    def test_empty_file_gives_reference_defaults(self, tmp_path):
        cfg = tmp_path / "empty.cfg"
        cfg.write_text("")
        spec = load_spec(cfg, environ={})
        radio = spec.scenario.radio
        assert radio.carrier_freq_hz == 1e12
        assert radio.tx_power_w == 1.0
        assert radio.image_size_bits == 2e7
        assert radio.noise_density_w_per_hz == pytest.approx(10 ** ((-174 - 30) / 10))
        assert spec.scenario.slots_per_period == 3
        assert spec.scenario.room_side == 6.0
        assert spec.scenario.ceiling_z == 3.0
        assert spec.scenario.num_vaps == 7
        assert spec.scenario.num_sbs == 7
        assert spec.scenario.num_users == 20
        assert spec.learning.inner_rollouts == 50
        assert spec.learning.outer_rollouts == 10
        assert spec.learning.inner_lr == 0.1
        assert spec.learning.meta_lr == 0.01

    def test_misspelled_key_named(self):
        with pytest.raises(ConfigError, match="inner_lrr"):
            parse_config_text("[learning]\ninner_lrr = 0.1\n")

    def test_unknown_section_named(self):
        with pytest.raises(ConfigError, match="radioo"):
            parse_config_text("[radioo]\n")

    def test_parse_error_carries_line_number(self):
        with pytest.raises(ConfigError, match="line 3"):
            parse_config_text("[learning]\ninner_lr = 0.1\ninner_rollouts = many\n")

    def test_constraint_violation_names_field(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[radio]\ntx_power_w = -1\n")
        with pytest.raises(ConfigError, match="tx_power_w"):
            load_spec(cfg, environ={})

    def test_round_trip_canonical(self, tmp_path):
        cfg = tmp_path / "toy.cfg"
        cfg.write_text(TOY_CONFIG)
        once = serialize_spec(parse_config_text(TOY_CONFIG))
        twice = serialize_spec(parse_config_text(once))
        assert once == twice

    def test_env_overrides(self, tmp_path):
        cfg = tmp_path / "toy.cfg"
        cfg.write_text(TOY_CONFIG)
        spec = load_spec(cfg, environ={"THZVLC_RUN__MASTER_SEED": "9"})
        assert spec.master_seed == 9

    def test_unknown_env_override_rejected(self, tmp_path):
        cfg = tmp_path / "toy.cfg"
        cfg.write_text("")
        with pytest.raises(ConfigError, match="THZVLC_RUN__MASTRE_SEED"):
            load_spec(cfg, environ={"THZVLC_RUN__MASTRE_SEED": "9"})

    def test_mpg_over_cap_rejected(self, tmp_path):
        cfg = tmp_path / "big.cfg"
        cfg.write_text("[scenario]\nnum_users = 20\n[run]\nalgorithm = mpg\n")
        with pytest.raises(ConfigError, match="dual"):
            load_spec(cfg, environ={})

    def test_dmpg_defaults_load(self, tmp_path):
        cfg = tmp_path / "default.cfg"
        cfg.write_text("")
        spec = load_spec(cfg, environ={})
        assert spec.algorithm == "dmpg"


class TestRun:
    def test_artifacts_and_metrics_length(self, tmp_path):
        spec = toy_spec(tmp_path)
        result = run(spec)
        out = tmp_path / "out"
        assert len(result.iterations) == spec.learning.meta_iterations
        for name in ("metrics.csv", "timing.csv", "checkpoint.bin", "trajectories.csv", "summary.json", "config.txt"):
            assert (out / name).exists()
        with open(out / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "mean_reward", "std_reward"]
        assert len(rows) == 1 + spec.learning.meta_iterations

    def test_metrics_byte_identical_across_runs(self, tmp_path):
        spec_a = toy_spec(tmp_path, out_name="a")
        run(spec_a)
        spec_b = toy_spec(tmp_path, out_name="b")
        run(spec_b)
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_reliability_recomputable_from_trajectory_log(self, tmp_path):
        spec = toy_spec(tmp_path)
        result = run(spec)
        served = 0
        periods = set()
        with open(tmp_path / "out" / "trajectories.csv") as fh:
            for row in csv.DictReader(fh):
                served += int(row["newly_served"])
                periods.add(row["period"])
        recomputed = served / (spec.scenario.num_users * len(periods))
        assert recomputed == pytest.approx(result.avg_reliability_per_user)
        assert 0.0 <= result.avg_reliability_per_user <= 1.0

    def test_dmpg_run_writes_dual_column(self, tmp_path):
        spec = toy_spec(tmp_path, out_name="dual", extra={("run", "algorithm"): "dmpg"})
        run(spec)
        with open(tmp_path / "dual" / "trajectories.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert all(row["dual_lambda"] != "" for row in rows)
        assert all(float(row["dual_lambda"]) >= 0.0 for row in rows)

    def test_baseline_pg_runs(self, tmp_path):
        spec = toy_spec(tmp_path, out_name="pg", extra={("run", "algorithm"): "pg"})
        result = run(spec)
        assert len(result.iterations) == spec.learning.meta_iterations


class TestCli:
    def test_print_config_reports_reference_defaults(self, capsys):
        assert main(["train", "--print-config"]) == 0
        text = capsys.readouterr().out
        values = parse_config_text(text)
        assert values["radio"]["carrier_freq_hz"] == 1e12
        assert values["radio"]["tx_power_w"] == 1.0
        assert values["radio"]["image_size_bits"] == 2e7
        assert values["radio"]["noise_density_dbm_per_hz"] == -174.0
        assert values["scenario"]["slots_per_period"] == 3
        assert values["scenario"]["room_side"] == 6.0
        assert values["scenario"]["ceiling"] == 3.0
        assert values["scenario"]["num_vaps"] == 7
        assert values["scenario"]["num_sbs"] == 7
        assert values["learning"]["inner_rollouts"] == 50
        assert values["learning"]["outer_rollouts"] == 10
        assert values["learning"]["inner_lr"] == 0.1
        assert values["learning"]["meta_lr"] == 0.01

    def test_usage_error_exit_code_2(self):
        with pytest.raises(SystemExit) as err:
            main(["train", "--algo", "nonsense"])
        assert err.value.code == 2

    def test_missing_subcommand_exit_code_2(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 2

    def test_config_error_exit_code_1(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[radio]\ntx_power_w = -1\n")
        assert main(["train", "--config", str(cfg)]) == 1
        assert "tx_power_w" in capsys.readouterr().err

    def _write_toy(self, tmp_path):
        cfg = tmp_path / "toy.cfg"
        cfg.write_text(TOY_CONFIG)
        return cfg

    def test_train_then_adapt_zero_steps_preserves_params(self, tmp_path, capsys):
        cfg = self._write_toy(tmp_path)
        out = tmp_path / "run1"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        ckpt = out / "checkpoint.bin"
        out2 = tmp_path / "run2"
        assert main([
            "adapt", "--config", str(cfg), "--checkpoint", str(ckpt),
            "--task-seed", "77", "--steps", "0", "--out", str(out2),
        ]) == 0
        before, _ = policy_net.load_params(ckpt)
        after, _ = policy_net.load_params(out2 / "adapted_checkpoint.bin")
        assert np.array_equal(before.flat, after.flat)
        with open(out2 / "adapt_curve.csv") as fh:
            assert len(list(csv.reader(fh))) == 1  # header only

    def test_eval_reports_bounded_reliability(self, tmp_path, capsys):
        cfg = self._write_toy(tmp_path)
        out = tmp_path / "run"
        main(["train", "--config", str(cfg), "--out", str(out)])
        capsys.readouterr()
        out2 = tmp_path / "eval"
        assert main([
            "eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.bin"),
            "--periods", "3", "--out", str(out2),
        ]) == 0
        with open(out2 / "summary.json") as fh:
            summary = json.load(fh)
        assert 0.0 <= summary["avg_reliability_per_user"] <= 1.0

    def test_oracle_matches_direct_computation(self, tmp_path, capsys):
        cfg = self._write_toy(tmp_path)
        assert main(["oracle", "--config", str(cfg), "--task-seed", "5"]) == 0
        text = capsys.readouterr().out
        spec = load_spec(cfg, environ={})
        task = env.sample_task(spec.scenario.grid, seed=5, concentration=1.0, locality_radius=1, task_id=5)
        best, _ = env.brute_force_oracle(task, spec.scenario, 0)
        assert f"oracle optimum: {best}" in text

    def test_simulate_writes_log(self, tmp_path, capsys):
        cfg = self._write_toy(tmp_path)
        out = tmp_path / "sim"
        assert main(["simulate", "--config", str(cfg), "--periods", "2", "--out", str(out)]) == 0
        with open(out / "trajectories.csv") as fh:
            rows = list(csv.DictReader(fh))
        spec = load_spec(cfg, environ={})
        assert len(rows) == 2 * spec.scenario.slots_per_period * spec.scenario.num_users
