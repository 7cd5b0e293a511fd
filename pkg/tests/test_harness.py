import json
from pathlib import Path

import numpy as np
import pytest

from vrvi import (
    ComparisonTable,
    ConfigError,
    ExperimentConfig,
    GeneratorSpec,
    GridSearchError,
    Method,
    emit_plot,
    grid_search,
    parse_config,
    run_experiment,
)
from vrvi.analysis import AggregateStats
from vrvi.cli import main
from vrvi.harness import load_table

from conftest import shifted_identity_problem


MINIMAL_CONFIG = """\
config_version = 1
n = 3
d = 4
lambda = 1.0
regime = small
problem_seed = 5
methods = sarah
seeds = 1,2
oracle_budget = 600
checkpoint_every = 100
output_dir = {out}
"""


def write_config(tmp_path, text=None, **extra):
    out_dir = tmp_path / "out"
    body = (text or MINIMAL_CONFIG).format(out=out_dir)
    for key, value in extra.items():
        body += f"{key} = {value}\n"
    path = tmp_path / "config.txt"
    path.write_text(body)
    return path


class TestParseConfig:
    def test_minimal_valid(self, tmp_path):
        config = parse_config(write_config(tmp_path))
        assert config.generator == GeneratorSpec(n=3, d=4, lam=1.0,
                                                 target_ell=1e2, seed=5)
        assert config.methods == (Method.SARAH,)
        assert config.seeds == (1, 2)
        assert config.gamma_grid is None

    def test_unknown_key_names_key_and_line(self, tmp_path):
        path = write_config(tmp_path, regmie="huge")
        with pytest.raises(ConfigError, match=r"line 12: unknown key 'regmie'"):
            parse_config(path)

    def test_invalid_regime_names_field(self, tmp_path):
        text = MINIMAL_CONFIG.replace("regime = small", "regime = huge")
        with pytest.raises(ConfigError, match="regime"):
            parse_config(write_config(tmp_path, text=text))

    def test_nonpositive_budget_names_key_and_line(self, tmp_path):
        text = MINIMAL_CONFIG.replace("oracle_budget = 600", "oracle_budget = 0")
        with pytest.raises(ConfigError, match=r"line 9: key 'oracle_budget'"):
            parse_config(write_config(tmp_path, text=text))

    def test_duplicate_seeds_rejected(self, tmp_path):
        text = MINIMAL_CONFIG.replace("seeds = 1,2", "seeds = 7,7")
        with pytest.raises(ConfigError, match="duplicate seeds"):
            parse_config(write_config(tmp_path, text=text))

    def test_missing_required_key(self, tmp_path):
        text = MINIMAL_CONFIG.replace("methods = sarah\n", "")
        with pytest.raises(ConfigError, match="missing required key 'methods'"):
            parse_config(write_config(tmp_path, text=text))

    def test_duplicate_key_rejected(self, tmp_path):
        path = write_config(tmp_path, n=9)
        with pytest.raises(ConfigError, match="duplicate key 'n'"):
            parse_config(path)

    def test_unknown_method_listed(self, tmp_path):
        text = MINIMAL_CONFIG.replace("methods = sarah", "methods = sarah,adam")
        with pytest.raises(ConfigError, match="unknown method 'adam'"):
            parse_config(write_config(tmp_path, text=text))

    def test_gamma_grid_parsed(self, tmp_path):
        config = parse_config(write_config(tmp_path, gamma_grid="0.001,0.01"))
        assert config.gamma_grid == (0.001, 0.01)

    def test_overrides_applied_before_validation(self, tmp_path):
        path = write_config(tmp_path)
        config = parse_config(path, {"regime": "medium", "seeds": "4,5,6"})
        assert config.regime == "medium"
        assert config.generator.target_ell == 1e3
        assert config.seeds == (4, 5, 6)
        with pytest.raises(ConfigError):
            parse_config(path, {"seeds": "4,4"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "absent.txt")


class TestGridSearch:
    def test_equal_contraction_ties_break_to_smaller_step(self):
        # |1 - 0.5| = |1 - 1.5| = 0.5: identical final residuals, exactly
        p = shifted_identity_problem(dim=3, shift=2.0)
        best = grid_search(p, Method.SARAH, budget=20, seeds=[0],
                           gamma_grid=[1.5, 0.5], checkpoint_every=5)
        assert best == 0.5

    def test_single_candidate_returned_after_validation_run(self):
        p = shifted_identity_problem(dim=3, shift=2.0)
        assert grid_search(p, Method.SARAH, 20, [0], gamma_grid=[0.25]) == 0.25

    def test_all_divergent_candidates_error(self):
        p = shifted_identity_problem(dim=3, shift=2.0)
        with pytest.raises(GridSearchError, match="smaller gamma_grid"):
            grid_search(p, Method.SARAH, budget=200, seeds=[0],
                        gamma_grid=[3.0, 4.0], checkpoint_every=1)

    def test_divergent_candidate_excluded_not_fatal(self):
        p = shifted_identity_problem(dim=3, shift=2.0)
        best = grid_search(p, Method.SARAH, budget=100, seeds=[0, 1],
                           gamma_grid=[3.0, 0.5], checkpoint_every=1)
        assert best == 0.5

    def test_tuned_step_at_least_theorem_preset(self):
        from vrvi import generate_bilinear

        p = generate_bilinear(GeneratorSpec(n=4, d=10, lam=1.0, target_ell=50.0, seed=4))
        best = grid_search(p, Method.SARAH, budget=4000, seeds=[1, 2], checkpoint_every=500)
        assert best >= 2.0 / (9.0 * p.ell) - 1e-15


def tiny_experiment_config(tmp_path, **overrides):
    kwargs = dict(
        generator=GeneratorSpec(n=3, d=4, lam=1.0, target_ell=100.0, seed=5),
        methods=(Method.SARAH, Method.SGD),
        regime="small",
        oracle_budget=2000,
        seeds=(1, 2),
        output_dir=tmp_path / "out",
        checkpoint_every=200,
    )
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


class TestRunExperiment:
    def test_outputs_written(self, tmp_path):
        config = tiny_experiment_config(tmp_path)
        table = run_experiment(config)
        out = config.output_dir
        assert (out / "problem.txt").exists()
        assert (out / "manifest.json").exists()
        assert (out / "aggregate_sarah.csv").exists()
        assert (out / "comparison_small.svg").exists()
        assert (out / "runs" / "sarah" / "seed_1.csv").exists()
        assert (out / "runs" / "sgd" / "seed_2.json").exists()
        assert set(table.stats) == {"sarah", "sgd"}
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["problem_hash"] == table.problem_hash
        assert manifest["seeds"] == [1, 2]

    def test_aggregate_rows_match_grid(self, tmp_path):
        config = tiny_experiment_config(tmp_path)
        run_experiment(config)
        lines = (config.output_dir / "aggregate_sarah.csv").read_text().splitlines()
        expected_grid = np.arange(0, config.oracle_budget + 1, config.checkpoint_every)
        assert len(lines) == 1 + expected_grid.shape[0]

    def test_duplicate_seeds_rejected(self, tmp_path):
        config = tiny_experiment_config(tmp_path, seeds=(7, 7))
        with pytest.raises(ConfigError, match="duplicate"):
            run_experiment(config)

    def test_partial_outputs_removed_on_abort(self, tmp_path, monkeypatch):
        import vrvi.harness as harness

        def boom(table, path):
            raise RuntimeError("plot backend unavailable")

        monkeypatch.setattr(harness, "emit_plot", boom)
        config = tiny_experiment_config(tmp_path)
        with pytest.raises(RuntimeError, match="plot backend"):
            run_experiment(config)
        leftovers = list(config.output_dir.rglob("*")) if config.output_dir.exists() else []
        assert leftovers == []


class TestPlot:
    @staticmethod
    def table(residuals):
        stats = AggregateStats(
            grid=np.array([0, 10, 20]),
            mean_residual_sq=np.asarray(residuals, dtype=float),
            std_residual_sq=np.zeros(3),
            mean_dist_sq=np.zeros(3),
            n_seeds=2,
        )
        return ComparisonTable(stats={"sarah": stats}, gammas={"sarah": 0.1},
                               problem_hash="h", oracle_budget=20, regime="small")

    def test_single_series_renders_deterministically(self, tmp_path):
        table = self.table([4.0, 2.0, 1.0])
        a = emit_plot(table, tmp_path / "a.svg")
        b = emit_plot(table, tmp_path / "b.svg")
        assert a.read_bytes() == b.read_bytes()
        assert b"<svg" in a.read_bytes()

    def test_zero_residual_clamped_with_annotation(self, tmp_path):
        table = self.table([4.0, 1.0, 0.0])
        path = emit_plot(table, tmp_path / "c.svg")
        assert b"clamped at numeric floor" in path.read_bytes()

    def test_empty_table_rejected(self, tmp_path):
        empty = ComparisonTable(stats={}, gammas={}, problem_hash="h",
                                oracle_budget=1, regime="small")
        with pytest.raises(ValueError):
            emit_plot(empty, tmp_path / "d.svg")


SMOKE_CONFIG = """\
config_version = 1
n = 1
d = 1
lambda = 1.0
regime = small
problem_seed = 3
methods = sarah
seeds = 1
oracle_budget = 400
checkpoint_every = 100
output_dir = {out}
theorem_seeds = 4
lemma_seeds = 4
checker_trials = 400
"""


class TestCli:
    def test_generate_writes_problem_file(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["generate", "--config", str(path)]) == 0
        assert (tmp_path / "out" / "problem.txt").exists()

    def test_run_and_replot(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert main(["run", "--config", str(path)]) == 0
        out = tmp_path / "out"
        svg = out / "comparison_small.svg"
        first = svg.read_bytes()
        assert main(["plot", "--output", str(out)]) == 0
        assert svg.read_bytes() == first
        assert "final mean residual_sq" in capsys.readouterr().out

    def test_config_error_exit_code(self, tmp_path):
        path = write_config(tmp_path, regmie="huge")
        assert main(["run", "--config", str(path)]) == 2

    def test_budget_override(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["run", "--config", str(path), "--budget", "0"]) == 2

    def test_scalar_smoke_verification_passes(self, tmp_path, capsys):
        path = tmp_path / "smoke.txt"
        path.write_text(SMOKE_CONFIG.format(out=tmp_path / "vout"))
        assert main(["verify", "--config", str(path)]) == 0
        report = json.loads((tmp_path / "vout" / "verification_report.json").read_text())
        assert report["all_passed"] is True
        printed = capsys.readouterr().out
        assert "strong_monotonicity" in printed and "PASS" in printed

    def test_verify_rejects_non_preset_theorem_step(self, tmp_path):
        path = tmp_path / "smoke.txt"
        path.write_text(SMOKE_CONFIG.format(out=tmp_path / "vout")
                        + "theorem_gamma = 0.01\n")
        assert main(["verify", "--config", str(path)]) == 2

    def test_verify_reports_drift_bound_failure_on_multi_component(self, tmp_path):
        # the per-epoch drift of the recursive direction genuinely exceeds
        # the aggregate-constant bound on generated multi-component
        # instances, so the suite reports that check as the (only) failure
        config_text = SMOKE_CONFIG.replace("\nn = 1\n", "\nn = 10\n").replace(
            "\nd = 1\n", "\nd = 10\n")
        path = tmp_path / "multi.txt"
        path.write_text(config_text.format(out=tmp_path / "vout2"))
        assert main(["verify", "--config", str(path)]) == 1
        report = json.loads((tmp_path / "vout2" / "verification_report.json").read_text())
        by_name = {c["name"]: c for c in report["checks"]}
        assert by_name["lemma2_direction_drift"]["passed"] is False
        for name in ("strong_monotonicity", "exact_solution_residual",
                     "lemma1_direction_decay", "theorem1_contraction",
                     "oracle_complexity_audit"):
            assert by_name[name]["passed"] is True, name


class TestLoadTable:
    def test_round_trip(self, tmp_path):
        config = tiny_experiment_config(tmp_path)
        table = run_experiment(config)
        loaded = load_table(config.output_dir)
        assert set(loaded.stats) == set(table.stats)
        assert loaded.problem_hash == table.problem_hash
        np.testing.assert_array_equal(loaded.stats["sarah"].grid,
                                      table.stats["sarah"].grid)
        np.testing.assert_array_equal(loaded.stats["sarah"].mean_residual_sq,
                                      table.stats["sarah"].mean_residual_sq)
