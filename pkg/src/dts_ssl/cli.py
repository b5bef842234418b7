"""Experiment runner: config loading, runs, sweeps, and CSV report emission.

Verbs:
    run             train + evaluate for each seed of a config
    sweep           repeat `run` along one config axis
    report          regenerate summary CSVs from an existing manifest
    validate-config check a config file and exit

Exit codes: 0 success, 2 validation failure, 3 runtime failure. The default
output root comes from --out-dir, the config, or $DTS_SSL_OUT_ROOT.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, build_mismatch_split, generate_synthetic, load_cifar10_dir, load_dataset
from .errors import DtsError, ValidationError
from .trainer import TrainConfig, config_hash, run_training

ENV_OUT_ROOT = "DTS_SSL_OUT_ROOT"


@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | csv | cifar10
    name: str = "synthetic"
    path: str | None = None
    k_seen: int = 4
    k_unseen: int = 2
    dim: int = 16
    per_class: int = 600
    separation: float = 3.0
    noise: float = 1.6
    max_per_class: int | None = None

    def validate(self, errors: list[str]) -> None:
        if self.kind not in ("synthetic", "csv", "cifar10"):
            errors.append(f"dataset.kind: unknown kind {self.kind!r}")
        if self.kind in ("csv", "cifar10"):
            if not self.path:
                errors.append("dataset.path: required for csv/cifar10 datasets")
            elif not Path(self.path).exists():
                errors.append(f"dataset.path: {self.path} does not exist")
        if self.kind == "synthetic":
            if self.k_seen < 2:
                errors.append("dataset.k_seen: must be >= 2")
            if self.dim < 2:
                errors.append("dataset.dim: must be >= 2")

    def load(self, seed: int) -> Dataset:
        if self.kind == "synthetic":
            return generate_synthetic(
                self.k_seen, self.k_unseen, self.dim, self.per_class,
                separation=self.separation, noise=self.noise, seed=seed, name=self.name,
            )
        if self.kind == "csv":
            return load_dataset(self.path)
        return load_cifar10_dir(self.path, max_per_class=self.max_per_class)


@dataclass
class SplitSpec:
    seen_class_ids: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    mismatch_ratio: float = 0.5
    labeled_size: int = 80
    unlabeled_size: int = 2000
    test_fraction: float = 0.2

    def validate(self, errors: list[str]) -> None:
        if not 0.0 <= self.mismatch_ratio <= 1.0:
            errors.append("split.mismatch_ratio: must lie in [0, 1]")
        if self.labeled_size < 1:
            errors.append("split.labeled_size: must be >= 1")
        if self.unlabeled_size < 1:
            errors.append("split.unlabeled_size: must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            errors.append("split.test_fraction: must lie in (0, 1)")
        if not self.seen_class_ids:
            errors.append("split.seen_class_ids: must be nonempty")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str | None = None

    def validate(self) -> None:
        errors: list[str] = []
        self.dataset.validate(errors)
        self.split.validate(errors)
        try:
            self.train.validate()
        except ValidationError as exc:
            errors.extend(f"train.{part.strip()}" for part in str(exc).split(";"))
        if not self.seeds:
            errors.append("seeds: must list at least one seed")
        if errors:
            raise ValidationError("; ".join(errors))

    def to_dict(self) -> dict:
        return {
            "dataset": dataclasses.asdict(self.dataset),
            "split": dataclasses.asdict(self.split),
            "train": self.train.to_dict(),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {"dataset", "split", "train", "seeds", "out_dir"}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        if "dataset" in raw:
            cfg.dataset = _build_section(DatasetSpec, raw["dataset"], "dataset")
        if "split" in raw:
            cfg.split = _build_section(SplitSpec, raw["split"], "split")
        if "train" in raw:
            base = TrainConfig.desk().to_dict()
            base.update(raw["train"])
            try:
                cfg.train = TrainConfig.from_dict(base)
            except (TypeError, ValidationError) as exc:
                raise ValidationError(f"train: {exc}") from exc
        if "seeds" in raw:
            cfg.seeds = [int(s) for s in raw["seeds"]]
        cfg.out_dir = raw.get("out_dir")
        return cfg


def _build_section(cls, raw: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"{name}: unknown fields {sorted(unknown)}")
    return cls(**raw)


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    """Layered config: desk defaults <- JSON file <- --set key=value overrides."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    config = ExperimentConfig.from_dict(raw)
    for item in overrides or []:
        _apply_override(config, item)
    config.validate()
    return config


def _apply_override(config: ExperimentConfig, item: str) -> None:
    if "=" not in item:
        raise ValidationError(f"override {item!r} must look like section.key=value")
    dotted, value = item.split("=", 1)
    parts = dotted.split(".")
    target = config
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ValidationError(f"override {dotted!r}: unknown section {part!r}")
        target = getattr(target, part)
    key = parts[-1]
    if not hasattr(target, key):
        raise ValidationError(f"override {dotted!r}: unknown field {key!r}")
    current = getattr(target, key)
    setattr(target, key, _coerce(value, current, dotted))


def _coerce(value: str, current, dotted: str):
    if isinstance(current, bool):
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"override {dotted!r}: expected a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(value)
        except ValueError as exc:
            raise ValidationError(f"override {dotted!r}: expected an integer, got {value!r}") from exc
    if isinstance(current, float):
        try:
            return float(value)
        except ValueError as exc:
            raise ValidationError(f"override {dotted!r}: expected a number, got {value!r}") from exc
    if isinstance(current, (list, tuple)):
        items = [part for part in value.split(",") if part]
        caster = type(current[0]) if len(current) else int
        return type(current)(caster(p) for p in items)
    return value


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    config_hash: str
    artifact_version: str
    dataset_id: str
    seeds: list[int]
    out_dir: str
    runs: list[dict] = field(default_factory=list)  # {seed, ablation, axis?, status, run_dir}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        raw = json.loads(Path(path).read_text())
        return cls(**raw)


def _resolve_out_dir(config: ExperimentConfig, cli_out: str | None, tag: str) -> Path:
    root = cli_out or config.out_dir or os.environ.get(ENV_OUT_ROOT) or "runs"
    return Path(root) / f"{tag}-{config_hash(config.train)}"


def _execute_single(config: ExperimentConfig, seed: int, run_dir: Path) -> dict:
    dataset = config.dataset.load(seed)
    split = build_mismatch_split(
        dataset,
        seen_class_ids=config.split.seen_class_ids,
        ratio=config.split.mismatch_ratio,
        m=config.split.labeled_size,
        n=config.split.unlabeled_size,
        test_fraction=config.split.test_fraction,
        seed=seed,
    )
    train_cfg = dataclasses.replace(config.train, seed=seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    effective = config.to_dict()
    effective["train"]["seed"] = seed
    (run_dir / "effective_config.json").write_text(json.dumps(effective, indent=2))
    result = run_training(train_cfg, split, out_dir=run_dir)
    return {
        "seed": seed,
        "ablation": train_cfg.ablation_mode,
        "status": "completed",
        "run_dir": str(run_dir),
        "accuracy": result.final_eval.accuracy,
        "auroc": result.final_eval.auroc,
    }


def run_experiment(config_path: str | Path, overrides: list[str] | None = None,
                   out_dir: str | None = None, seeds: list[int] | None = None) -> RunManifest:
    """Execute training + inference for every seed of the config; write a manifest."""
    config = load_config(config_path, overrides)
    if seeds is not None:
        config.seeds = list(seeds)
    base = _resolve_out_dir(config, out_dir, "run")
    base.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config_hash=config_hash(config.train),
        artifact_version=__version__,
        dataset_id=config.dataset.name if config.dataset.kind == "synthetic" else str(config.dataset.path),
        seeds=list(config.seeds),
        out_dir=str(base),
    )
    failures = 0
    for seed in config.seeds:
        run_dir = base / f"seed{seed}"
        try:
            manifest.runs.append(_execute_single(config, seed, run_dir))
        except Exception as exc:  # noqa: BLE001 - run status must be recorded
            failures += 1
            manifest.runs.append({
                "seed": seed,
                "ablation": config.train.ablation_mode,
                "status": "failed",
                "run_dir": str(run_dir),
                "error": f"{type(exc).__name__}: {exc}",
            })
    manifest.save(base / "manifest.json")
    emit_report(base / "manifest.json")
    if failures:
        raise DtsError(f"{failures} of {len(config.seeds)} runs failed; see {base / 'manifest.json'}")
    return manifest


def sweep(config_path: str | Path, axis: str, values: list[str],
          overrides: list[str] | None = None, out_dir: str | None = None,
          seeds: list[int] | None = None) -> RunManifest:
    """One run per (axis value, seed); axis names a dotted config field."""
    if not values:
        raise ValidationError("sweep: values list must be nonempty")
    config = load_config(config_path, overrides)
    if seeds is not None:
        config.seeds = list(seeds)
    # resolve the axis against the config to validate the field and its type
    probe = load_config(config_path, overrides)
    try:
        _apply_override(probe, f"{axis}={values[0]}")
    except ValidationError:
        # convenience: allow bare field names for train.* and split.* axes
        resolved = None
        for prefix in ("train", "split", "dataset"):
            try:
                _apply_override(probe, f"{prefix}.{axis}={values[0]}")
                resolved = f"{prefix}.{axis}"
                break
            except ValidationError:
                continue
        if resolved is None:
            raise
        axis = resolved

    base = _resolve_out_dir(config, out_dir, "sweep")
    base.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config_hash=config_hash(config.train),
        artifact_version=__version__,
        dataset_id=config.dataset.name if config.dataset.kind == "synthetic" else str(config.dataset.path),
        seeds=list(config.seeds),
        out_dir=str(base),
    )
    failures = 0
    for value in values:
        point = load_config(config_path, (overrides or []) + [f"{axis}={value}"])
        if seeds is not None:
            point.seeds = list(seeds)
        for seed in point.seeds:
            run_dir = base / f"{axis.replace('.', '_')}={value}" / f"seed{seed}"
            try:
                record = _execute_single(point, seed, run_dir)
            except Exception as exc:  # noqa: BLE001
                failures += 1
                record = {
                    "seed": seed,
                    "ablation": point.train.ablation_mode,
                    "status": "failed",
                    "run_dir": str(run_dir),
                    "error": f"{type(exc).__name__}: {exc}",
                }
            record["axis"] = axis
            record["axis_value"] = value
            manifest.runs.append(record)
    manifest.save(base / "manifest.json")
    emit_report(base / "manifest.json")
    if failures:
        raise DtsError(f"{failures} sweep runs failed; see {base / 'manifest.json'}")
    return manifest


def emit_report(manifest_path: str | Path, include_incomplete: bool = False) -> list[Path]:
    """Per-run and aggregated CSVs plus AUROC-vs-epoch series. Idempotent."""
    manifest_path = Path(manifest_path)
    manifest = RunManifest.load(manifest_path)
    base = manifest_path.parent
    completed = [r for r in manifest.runs if r["status"] == "completed" or include_incomplete]

    runs_csv = base / "report_runs.csv"
    with open(runs_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_dir", "seed", "ablation", "axis", "axis_value", "status", "accuracy", "auroc"])
        for r in sorted(completed, key=lambda r: (str(r.get("axis_value", "")), r["seed"])):
            writer.writerow([
                r["run_dir"], r["seed"], r.get("ablation", ""), r.get("axis", ""),
                r.get("axis_value", ""), r["status"], r.get("accuracy", ""), r.get("auroc", ""),
            ])

    agg_csv = base / "report_aggregate.csv"
    groups: dict[str, list[dict]] = {}
    for r in completed:
        if r["status"] != "completed":
            continue
        groups.setdefault(str(r.get("axis_value", "all")), []).append(r)
    with open(agg_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "runs", "acc_mean", "acc_std", "auroc_mean", "auroc_std"])
        for key in sorted(groups):
            accs = np.array([r["accuracy"] for r in groups[key]])
            aurocs = np.array([r["auroc"] for r in groups[key]])
            writer.writerow([
                key, len(groups[key]),
                repr(float(accs.mean())), repr(float(accs.std())),
                repr(float(aurocs.mean())), repr(float(aurocs.std())),
            ])

    series_paths = []
    series_dir = base / "auroc_by_epoch"
    series_dir.mkdir(exist_ok=True)
    for r in completed:
        metrics = Path(r["run_dir"]) / "metrics.jsonl"
        if not metrics.exists():
            continue
        rows = [json.loads(line) for line in metrics.read_text().splitlines()]
        tag = Path(r["run_dir"]).relative_to(base)
        out = series_dir / (str(tag).replace(os.sep, "__") + ".csv")
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "global_epoch", "auroc", "test_accuracy"])
            for row in rows:
                writer.writerow([row["phase"], row["global_epoch"], repr(row["auroc"]), repr(row["test_accuracy"])])
        series_paths.append(out)
    return [runs_csv, agg_csv, *series_paths]


# ---------------------------------------------------------------------------
# argparse front end
# ---------------------------------------------------------------------------


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="path to a JSON experiment config")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override a config field (dotted path)")
    sub.add_argument("--seed", type=int, default=None, help="run a single seed")
    sub.add_argument("--seeds", type=int, default=None, help="run seeds 0..N-1")
    sub.add_argument("--ablation", default=None, help="ablation mode override")
    sub.add_argument("--dataset", default=None, help="dataset path override (csv/cifar10)")
    sub.add_argument("--mismatch-ratio", type=float, default=None)
    sub.add_argument("--labeled-size", type=int, default=None)
    sub.add_argument("--out-dir", default=None)


def _flag_overrides(args: argparse.Namespace) -> list[str]:
    overrides = list(args.overrides)
    if args.ablation is not None:
        overrides.append(f"train.ablation_mode={args.ablation}")
    if args.dataset is not None:
        overrides.append(f"dataset.path={args.dataset}")
    if args.mismatch_ratio is not None:
        overrides.append(f"split.mismatch_ratio={args.mismatch_ratio}")
    if args.labeled_size is not None:
        overrides.append(f"split.labeled_size={args.labeled_size}")
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="dts-ssl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="train and evaluate each seed of a config")
    _common_flags(run_p)

    sweep_p = sub.add_parser("sweep", help="run a config across values of one field")
    _common_flags(sweep_p)
    sweep_p.add_argument("--axis", required=True, help="config field to vary, e.g. split.mismatch_ratio")
    sweep_p.add_argument("--values", required=True, help="comma-separated axis values")

    report_p = sub.add_parser("report", help="regenerate CSV reports from a manifest")
    report_p.add_argument("--manifest", required=True)
    report_p.add_argument("--include-incomplete", action="store_true")

    check_p = sub.add_parser("validate-config", help="validate a config file and exit")
    check_p.add_argument("--config", required=True)

    args = parser.parse_args(argv)
    try:
        if args.verb == "validate-config":
            load_config(args.config)
            print(f"{args.config}: OK")
            return 0
        if args.verb == "report":
            paths = emit_report(args.manifest, include_incomplete=args.include_incomplete)
            for p in paths:
                print(p)
            return 0

        overrides = _flag_overrides(args)
        seeds_override = None
        if args.seed is not None and args.seeds is not None:
            raise ValidationError("--seed and --seeds are mutually exclusive")
        if args.seed is not None:
            seeds_override = [args.seed]
        elif args.seeds is not None:
            seeds_override = list(range(args.seeds))

        if args.verb == "run":
            manifest = run_experiment(args.config, overrides, args.out_dir, seeds=seeds_override)
            print(Path(manifest.out_dir) / "manifest.json")
            return 0
        if args.verb == "sweep":
            values = [v for v in args.values.split(",") if v]
            manifest = sweep(args.config, args.axis, values, overrides, args.out_dir,
                             seeds=seeds_override)
            print(Path(manifest.out_dir) / "manifest.json")
            return 0
        parser.error(f"unknown verb {args.verb}")
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except (DtsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
