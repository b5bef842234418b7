"""Experiment runner: config validation, runs, sweeps, reports, exit codes."""

import csv
import json
from pathlib import Path

import pytest

from dts_ssl.cli import (
    ENV_OUT_ROOT,
    ExperimentConfig,
    RunManifest,
    emit_report,
    load_config,
    main,
    run_experiment,
    sweep,
)
from dts_ssl.errors import ValidationError

TINY_CONFIG = {
    "dataset": {
        "kind": "synthetic",
        "name": "tiny-blobs",
        "k_seen": 3,
        "k_unseen": 1,
        "dim": 5,
        "per_class": 120,
        "separation": 3.0,
        "noise": 1.0,
    },
    "split": {
        "seen_class_ids": [1, 2, 3],
        "mismatch_ratio": 0.4,
        "labeled_size": 24,
        "unlabeled_size": 90,
        "test_fraction": 0.2,
    },
    "train": {
        "pretrain_epochs": 3,
        "epochs_per_iteration": 2,
        "iterations": 2,
        "batch_size": 12,
        "mu": 2,
        "hidden_widths": [10],
        "feature_dim": 5,
        "lr": 0.08,
    },
    "seeds": [0],
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


class TestConfigLoading:
    def test_valid_config_loads(self, config_file):
        config = load_config(config_file)
        assert config.dataset.k_seen == 3
        assert config.train.iterations == 2

    def test_layering_defaults_under_file(self, config_file):
        config = load_config(config_file)
        # untouched fields keep the reference defaults
        assert config.train.tau == 0.85
        assert config.train.gamma == 0.5

    def test_overrides_applied_and_typed(self, config_file):
        config = load_config(config_file, ["train.tau=0.9", "split.labeled_size=30"])
        assert config.train.tau == 0.9
        assert config.split.labeled_size == 30

    def test_bad_override_field(self, config_file):
        with pytest.raises(ValidationError, match="unknown field"):
            load_config(config_file, ["train.not_a_knob=1"])

    def test_bad_override_type(self, config_file):
        with pytest.raises(ValidationError, match="expected a number"):
            load_config(config_file, ["train.tau=high"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_config(tmp_path / "absent.json")

    def test_schema_violation_reports_field_path(self, tmp_path, config_file):
        raw = json.loads(config_file.read_text())
        raw["split"]["mismatch_ratio"] = 2.0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(raw))
        with pytest.raises(ValidationError, match="split.mismatch_ratio"):
            load_config(bad)

    def test_roundtrip(self, config_file):
        config = load_config(config_file)
        again = ExperimentConfig.from_dict(json.loads(json.dumps(config.to_dict())))
        assert again.to_dict() == config.to_dict()


class TestRunVerb:
    def test_run_writes_manifest_and_outputs(self, config_file, tmp_path):
        out = tmp_path / "out"
        code = main(["run", "--config", str(config_file), "--out-dir", str(out),
                     "--ablation", "supervised_only", "--seeds", "2"])
        assert code == 0
        manifest_files = list(out.rglob("manifest.json"))
        assert len(manifest_files) == 1
        manifest = RunManifest.load(manifest_files[0])
        assert [r["seed"] for r in manifest.runs] == [0, 1]
        assert all(r["status"] == "completed" for r in manifest.runs)
        base = manifest_files[0].parent
        with open(base / "report_runs.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        for r in manifest.runs:
            run_dir = Path(r["run_dir"])
            assert (run_dir / "metrics.jsonl").exists()
            assert (run_dir / "summary.json").exists()
            assert (run_dir / "effective_config.json").exists()

    def test_override_persisted_in_effective_config(self, config_file, tmp_path):
        out = tmp_path / "out"
        manifest = run_experiment(config_file, ["train.tau=0.9"], out_dir=out)
        effective = json.loads(
            (Path(manifest.runs[0]["run_dir"]) / "effective_config.json").read_text()
        )
        assert effective["train"]["tau"] == 0.9

    def test_effective_config_reproduces_run_bit_exactly(self, config_file, tmp_path):
        manifest = run_experiment(config_file, out_dir=tmp_path / "first")
        run_dir = Path(manifest.runs[0]["run_dir"])
        effective = run_dir / "effective_config.json"
        # the persisted config re-validates and replays to the same metrics stream
        replay = tmp_path / "replay.json"
        replay.write_text(effective.read_text())
        manifest2 = run_experiment(replay, out_dir=tmp_path / "second")
        first = (run_dir / "metrics.jsonl").read_bytes()
        second = (Path(manifest2.runs[0]["run_dir"]) / "metrics.jsonl").read_bytes()
        assert first == second

    def test_missing_dataset_path_fails_before_training(self, tmp_path, config_file):
        raw = json.loads(config_file.read_text())
        raw["dataset"] = {"kind": "csv", "path": str(tmp_path / "nope.csv")}
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(raw))
        code = main(["run", "--config", str(bad), "--out-dir", str(tmp_path / "o")])
        assert code == 2
        assert not (tmp_path / "o").exists()

    def test_env_var_output_root(self, config_file, tmp_path, monkeypatch):
        monkeypatch.setenv(ENV_OUT_ROOT, str(tmp_path / "envroot"))
        manifest = run_experiment(config_file, ["train.ablation_mode=supervised_only"])
        assert str(tmp_path / "envroot") in manifest.out_dir


class TestSweepVerb:
    def test_mismatch_ratio_sweep_table(self, config_file, tmp_path):
        manifest = sweep(
            config_file, "split.mismatch_ratio", ["0.3", "0.6"],
            overrides=["train.ablation_mode=supervised_only"],
            out_dir=tmp_path / "out", seeds=[0, 1],
        )
        assert len(manifest.runs) == 4
        base = Path(manifest.out_dir)
        with open(base / "report_aggregate.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["group"] for r in rows] == ["0.3", "0.6"]
        assert all(int(r["runs"]) == 2 for r in rows)

    def test_bare_axis_names_resolve(self, config_file, tmp_path):
        manifest = sweep(
            config_file, "lambda_seen", ["0.15", "0.25"],
            overrides=["train.ablation_mode=supervised_only"],
            out_dir=tmp_path / "out",
        )
        assert all(r["axis"] == "train.lambda_seen" for r in manifest.runs)

    def test_empty_values_rejected(self, config_file):
        with pytest.raises(ValidationError):
            sweep(config_file, "train.tau", [])

    def test_non_numeric_value_rejected(self, config_file):
        code = main(["sweep", "--config", str(config_file), "--axis", "train.tau",
                     "--values", "a,b"])
        assert code == 2


class TestReportVerb:
    def make_manifest(self, config_file, tmp_path, seeds):
        return run_experiment(
            config_file, ["train.ablation_mode=supervised_only"],
            out_dir=tmp_path / "out", seeds=seeds,
        )

    def test_single_seed_std_zero(self, config_file, tmp_path):
        manifest = self.make_manifest(config_file, tmp_path, [0])
        base = Path(manifest.out_dir)
        with open(base / "report_aggregate.csv") as fh:
            row = next(csv.DictReader(fh))
        assert float(row["acc_std"]) == 0.0
        assert float(row["auroc_std"]) == 0.0

    def test_aggregate_matches_recomputation(self, config_file, tmp_path):
        manifest = self.make_manifest(config_file, tmp_path, [0, 1, 2])
        base = Path(manifest.out_dir)
        accs = [r["accuracy"] for r in manifest.runs]
        with open(base / "report_aggregate.csv") as fh:
            row = next(csv.DictReader(fh))
        assert float(row["acc_mean"]) == pytest.approx(sum(accs) / 3, abs=1e-12)
        assert int(row["runs"]) == 3

    def test_regeneration_idempotent(self, config_file, tmp_path):
        manifest = self.make_manifest(config_file, tmp_path, [0, 1])
        base = Path(manifest.out_dir)
        first = (base / "report_runs.csv").read_bytes(), (base / "report_aggregate.csv").read_bytes()
        emit_report(base / "manifest.json")
        second = (base / "report_runs.csv").read_bytes(), (base / "report_aggregate.csv").read_bytes()
        assert first == second

    def test_auroc_series_emitted(self, config_file, tmp_path):
        manifest = self.make_manifest(config_file, tmp_path, [0])
        base = Path(manifest.out_dir)
        series = list((base / "auroc_by_epoch").glob("*.csv"))
        assert len(series) == 1
        with open(series[0]) as fh:
            rows = list(csv.DictReader(fh))
        # pretrain + train epochs
        assert len(rows) == 3 + 4


class TestValidateConfigVerb:
    def test_ok_exit_zero(self, config_file):
        assert main(["validate-config", "--config", str(config_file)]) == 0

    def test_invalid_exit_two(self, tmp_path, config_file):
        raw = json.loads(config_file.read_text())
        raw["train"]["tau"] = 5.0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(raw))
        assert main(["validate-config", "--config", str(bad)]) == 2

    def test_unparseable_exit_two(self, tmp_path):
        bad = tmp_path / "mangled.json"
        bad.write_text("{not json")
        assert main(["validate-config", "--config", str(bad)]) == 2
