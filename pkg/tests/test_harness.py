import csv
import json

import numpy as np
import pytest

from momest.cli import main
from momest.harness import ExperimentConfig, run_experiment


def read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


class TestConfig:
    def test_requires_known_experiment(self):
        with pytest.raises(ValueError):
            ExperimentConfig(experiment="nope", seed=1, out="x.csv")

    def test_rejects_nonpositive_grids(self):
        with pytest.raises(ValueError):
            ExperimentConfig(
                experiment="audit", seed=1, out="x.csv", alphas=(0.0, 1.0)
            )
        with pytest.raises(ValueError):
            ExperimentConfig(experiment="audit", seed=1, out="x.csv", ns=(0,))

    def test_extra_fields_collect_into_options(self):
        config = ExperimentConfig.from_dict(
            {"experiment": "region_count", "seed": 3, "vocab_size": 9}
        )
        assert config.options["vocab_size"] == 9


class TestEfficiencyCurve:
    def test_known_rows(self, tmp_path):
        out = tmp_path / "eff.csv"
        config = ExperimentConfig.from_dict(
            {
                "experiment": "efficiency_curve",
                "seed": 0,
                "out": str(out),
                "epsilons": [0.2, 0.5, 1.0],
            }
        )
        assert run_experiment(config) == 0
        rows = read_rows(out)
        assert len(rows) == 9
        for row in rows:
            eff = float(row["efficiency"])
            if row["epsilon"] == "1.0":
                assert abs(eff - 1.0) < 1e-10
            if row["theta"] == "[0.0,0.0]":
                assert abs(eff - 1.0) < 1e-8
            assert row["error"] == ""


class TestAudit:
    def test_structured_channels_stay_within_level(self, tmp_path):
        out = tmp_path / "audit.csv"
        config = ExperimentConfig.from_dict(
            {"experiment": "audit", "seed": 0, "out": str(out), "alphas": [1.0]}
        )
        assert run_experiment(config) == 0
        for row in read_rows(out):
            if row["channel"] in ("per_value", "coordinate_release"):
                assert float(row["max_log_ratio"]) <= float(row["param"]) + 1e-9

    def test_model_file_config(self, tmp_path):
        model_path = tmp_path / "model.json"
        model_path.write_text(
            json.dumps({"phi": [[0, 0, 1, 1], [0, 1, 0, 1]], "upper_bound": 1.0})
        )
        out = tmp_path / "audit_file.csv"
        config = ExperimentConfig.from_dict(
            {
                "experiment": "audit",
                "seed": 7,
                "out": str(out),
                "model": {"path": str(model_path)},
            }
        )
        assert run_experiment(config) == 0
        assert read_rows(out)

    def test_four_dimensional_model_config(self, tmp_path):
        phi = np.zeros((4, 16))
        for y in range(16):
            for i in range(4):
                phi[i, y] = (y >> (3 - i)) & 1
        out = tmp_path / "audit4.csv"
        config = ExperimentConfig.from_dict(
            {
                "experiment": "audit",
                "seed": 0,
                "out": str(out),
                "alphas": [1.0],
                "model": {"phi": phi.tolist()},
            }
        )
        assert run_experiment(config) == 0
        rows = [r for r in read_rows(out) if r["channel"] == "per_value"]
        assert rows and rows[0]["dimension"] == "4"
        assert float(rows[0]["max_log_ratio"]) <= 1.0 + 1e-9


class TestMCValidate:
    def test_classic_rr_grid_tracks_formulas(self, tmp_path):
        out = tmp_path / "mc.csv"
        config = ExperimentConfig.from_dict(
            {
                "experiment": "mc_validate",
                "seed": 9,
                "out": str(out),
                "ns": [100_000],
                "trials": 200,
                "options": {
                    "settings": [
                        {
                            "estimator": "moment",
                            "channel": {"kind": "classic_rr", "epsilon": eps},
                        }
                        for eps in (0.3, 0.8)
                    ]
                },
            }
        )
        assert run_experiment(config) == 0
        rows = read_rows(out)
        assert {r["param"] for r in rows} == {"0.3", "0.8"}
        assert all(float(r["rel_frobenius"]) < 0.15 for r in rows)

    def test_single_channel_field(self, tmp_path):
        out = tmp_path / "mc_one.csv"
        config = ExperimentConfig.from_dict(
            {
                "experiment": "mc_validate",
                "seed": 6,
                "out": str(out),
                "ns": [5000],
                "trials": 30,
                "channel": {"kind": "classic_rr", "epsilon": 1.0},
            }
        )
        assert run_experiment(config) == 0
        rows = read_rows(out)
        assert len(rows) == 1 and rows[0]["estimator"] == "moment"


class TestGeometry:
    def test_equivalence_and_nonconcavity(self, tmp_path):
        out = tmp_path / "geo.csv"
        config = ExperimentConfig.from_dict(
            {"experiment": "geometry", "seed": 5, "out": str(out), "instances": 10}
        )
        assert run_experiment(config) == 0
        rows = read_rows(out)
        distances = [
            float(r["value"]) for r in rows if r["check"] == "one_em_step_distance"
        ]
        assert len(distances) == 10 and max(distances) <= 1e-8
        probe = [r for r in rows if r["check"] == "marginal_ll_nonconcave"]
        assert probe and float(probe[0]["value"]) == 1.0


class TestPrivateRegressionSchema:
    def test_fixed_column_set(self, tmp_path):
        out = tmp_path / "pr.csv"
        config = ExperimentConfig.from_dict(
            {
                "experiment": "private_regression",
                "seed": 4,
                "out": str(out),
                "ns": [2000],
                "alphas": [2.0],
                "trials": 2,
                "options": {"d": 2},
            }
        )
        run_experiment(config)
        with open(out, newline="") as handle:
            header = handle.readline().strip()
        assert header == "alpha,trial,scheme,r2_residual,r2_standard,n"


class TestErrorsAndExitCodes:
    def test_failing_trials_set_exit_code(self, tmp_path):
        out = tmp_path / "rc.csv"
        config = ExperimentConfig.from_dict(
            {
                "experiment": "region_count",
                "seed": 2,
                "out": str(out),
                "ns": [10],
                "options": {"window": 40, "n_train": 20, "n_test": 10},
            }
        )
        assert run_experiment(config) == 1
        rows = read_rows(out)
        assert any(r["error"] for r in rows)
        manifest = json.loads((tmp_path / "rc.csv.manifest.json").read_text())
        assert manifest["errors"] >= 1


class TestManifest:
    def test_written_with_config_echo(self, tmp_path):
        out = tmp_path / "audit.csv"
        config = ExperimentConfig.from_dict(
            {"experiment": "audit", "seed": 9, "out": str(out)}
        )
        run_experiment(config)
        manifest = json.loads((tmp_path / "audit.csv.manifest.json").read_text())
        assert manifest["config"]["seed"] == 9
        assert manifest["package_version"]
        assert manifest["wall_clock_seconds"] > 0
        assert manifest["rows"] > 0


class TestThreadDeterminism:
    @pytest.mark.parametrize(
        "experiment,extra",
        [
            ("efficiency_curve", {"epsilons": [0.3, 1.0]}),
            ("geometry", {"instances": 6}),
            ("audit", {}),
        ],
    )
    def test_bitwise_identical_across_threads(self, tmp_path, experiment, extra):
        outputs = []
        for threads in (1, 4):
            out = tmp_path / f"{experiment}_{threads}.csv"
            config = ExperimentConfig.from_dict(
                {
                    "experiment": experiment,
                    "seed": 13,
                    "out": str(out),
                    "threads": threads,
                    **extra,
                }
            )
            run_experiment(config)
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]


class TestCLI:
    def test_subcommand_runs(self, tmp_path, capsys):
        out = tmp_path / "audit.csv"
        code = main(["audit", "--seed", "1", "--out", str(out)])
        assert code == 0
        assert out.exists()
        assert "wrote" in capsys.readouterr().out

    def test_seed_required(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["audit", "--out", str(tmp_path / "x.csv")])

    def test_config_file_with_overrides(self, tmp_path):
        config_path = tmp_path / "config.json"
        config_path.write_text(
            json.dumps({"seed": 5, "epsilons": [0.4, 1.0], "out": "ignored.csv"})
        )
        out = tmp_path / "eff.csv"
        code = main(
            ["efficiency-curve", "--config", str(config_path), "--out", str(out)]
        )
        assert code == 0
        rows = read_rows(out)
        assert {r["epsilon"] for r in rows} == {"0.4", "1.0"}
