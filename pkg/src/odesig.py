"""Core run engine.

Owns the merged configuration and wires generation, training,
reconstruction, evaluation and runtime measurement to their artifacts.
Every artifact records the config hash and master seed.
"""

import json
from collections.abc import Callable
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .datagen import (
    Dataset,
    GeneratorSpec,
    SignalSample,
    apply_rq1_corruption,
    corrupt_frequency,
    corrupt_missing,
    corrupt_offset,
    generate,
    load_dataset,
    provenance_line,
    read_signals_csv,
    split,
    write_manifest,
    write_signals_csv,
)
from .evalnet import (
    EvalReport,
    ExperimentConfig,
    RuntimeReport,
    SweepResult,
    pearson_network,
    run_experiment,
    run_sweep,
    runtime_report,
)
from .training import (
    LatentODEModel,
    ModelParams,
    TrainConfig,
    TrainResult,
    load_checkpoint,
    train,
    write_loss_trace,
)
from .utils import config_hash, deep_merge

CORRUPTION_KINDS = (None, "missing", "offset", "frequency", "rq1-mixed")


class ConfigError(Exception):
    """Raised when the config file cannot be read or has the wrong shape."""
    pass


def default_config() -> dict:
    """Built-in defaults; config files are deep-merged over these."""
    return {
        "seed": 0,
        "threads": 1,
        "generator": GeneratorSpec().to_dict() | {"seed": None},
        "corruption": {
            "kind": None,  # null, missing, offset, frequency, rq1-mixed
            "mode": "interpolation",
            "steps": 3,
            "offset": 0.1,
            "period": "1/2",
            "missing_fraction": 0.2,
            "misaligned_fraction": 0.2,
            "jitter": 0.05,
        },
        "split": [6, 2, 2],
        "train": TrainConfig().to_dict() | {"seed": None},
        "reconstruct": {
            "points": 50,
            "start": None,  # null = each sample's first timestamp
            "stop": None,  # null = each sample's last timestamp
        },
        "experiment": {
            "kind": "missing-interp",
            "values": [],
            "seeds": 5,
            "variants": ["ours"],
            "poly_degrees": [1, 2, 3, 4, 5],
        },
        "runtime": {
            "repetitions": 5,
            "num_samples": 4,
            "points": 100,
            "scaling": True,
        },
        "output": {
            "directory": "./output",
        },
    }


class OdeSig:
    """Main run engine."""

    def __init__(self, config_path: Path | str | None = None):
        """
        Initialize the engine.

        Args:
            config_path: Path to a YAML (or JSON) config, or None for defaults
        """
        self.config = self._load_config(config_path)

    def _load_config(self, config_path: Path | str | None) -> dict:
        """Load configuration from file or use defaults."""
        defaults = default_config()
        if config_path:
            config_path = Path(config_path)
            if config_path.exists():
                try:
                    with open(config_path) as f:
                        user_config = yaml.safe_load(f) or {}
                except yaml.YAMLError as e:
                    raise ConfigError(f"Cannot parse {config_path}: {e}") from e
                if not isinstance(user_config, dict):
                    raise ConfigError(f"{config_path} must hold a mapping at the top level")
                return deep_merge(defaults, user_config)
        return defaults

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    @property
    def config_sha256(self) -> str:
        return config_hash(self.config)

    @property
    def provenance(self) -> dict:
        return {"config_sha256": self.config_sha256, "seed": self.seed}

    @property
    def csv_provenance(self) -> str:
        return provenance_line(self.config_sha256, self.seed)

    def generator_spec(self) -> GeneratorSpec:
        """Generator settings, seeded from the master seed unless set."""
        section = dict(self.config["generator"])
        if section.get("seed") is None:
            section["seed"] = self.seed
        return GeneratorSpec.from_dict(section)

    def train_config(self) -> TrainConfig:
        """Train settings, seeded from the master seed unless set."""
        section = dict(self.config["train"])
        section["seed"] = self.seed if section.get("seed") is None else section["seed"]
        return TrainConfig.from_dict(section)

    def experiment_config(self) -> ExperimentConfig:
        """Experiment descriptor from the experiment, split and corruption sections."""
        section = dict(self.config["experiment"])
        section.setdefault("master_seed", self.seed)
        section.setdefault("split_ratios", tuple(self.config["split"]))
        corruption = self.config["corruption"]
        for key in ("missing_fraction", "misaligned_fraction", "jitter"):
            section.setdefault(key, corruption[key])
        return ExperimentConfig.from_dict(
            {**section, "generator": self.generator_spec(), "train": self.train_config()}
        )

    @property
    def threads(self) -> int:
        return int(self.config.get("threads") or 1)

    # --- commands -----------------------------------------------------------

    def _corrupt(self, samples: list[SignalSample]) -> tuple[list[SignalSample], list[dict]]:
        section = self.config["corruption"]
        kind = section.get("kind")
        if kind not in CORRUPTION_KINDS:
            raise ConfigError(f"Unknown corruption kind {kind!r}")
        if kind is None:
            return samples, []
        if kind == "missing":
            out = [
                corrupt_missing(s, section["mode"], int(section["steps"]), np.random.default_rng([self.seed, i]))[0]
                for i, s in enumerate(samples)
            ]
            return out, [{"kind": "missing", "mode": section["mode"], "steps": int(section["steps"])}]
        if kind == "offset":
            return [corrupt_offset(s, float(section["offset"])) for s in samples], [
                {"kind": "offset", "offset": float(section["offset"])}
            ]
        if kind == "frequency":
            return [corrupt_frequency(s, section["period"]) for s in samples], [
                {"kind": "frequency", "period": str(section["period"])}
            ]
        return apply_rq1_corruption(
            samples,
            missing_fraction=section["missing_fraction"],
            misaligned_fraction=section["misaligned_fraction"],
            seed=self.seed,
            jitter=section["jitter"],
            steps=int(section["steps"]),
        )

    def generate(self, output_dir: Path | str, progress_callback: Callable | None = None) -> Dataset:
        """Generate, corrupt and split a dataset; write signals.csv, manifest.json, atlas.json."""
        output_dir = Path(output_dir)
        output_dir.mkdir(exist_ok=True)
        spec = self.generator_spec()
        if progress_callback:
            progress_callback(f"Generating {spec.num_samples} samples x {spec.num_rois} ROIs")
        dataset = generate(spec)
        samples, corruptions = self._corrupt(dataset.samples)
        dataset = replace(dataset, samples=samples, corruptions=corruptions)
        if len(samples) >= 5:
            ids = [s.sample_id for s in samples]
            dataset.split = split(ids, tuple(self.config["split"]), self.seed)

        write_signals_csv(output_dir / "signals.csv", dataset.samples, self.csv_provenance)
        write_manifest(output_dir / "manifest.json", dataset, self.provenance)
        dataset.atlas.save(output_dir / "atlas.json")
        if progress_callback:
            progress_callback(f"Wrote {output_dir / 'signals.csv'}")
        return dataset

    def train(
        self,
        data_dir: Path | str,
        output_dir: Path | str,
        progress_callback: Callable | None = None,
    ) -> tuple[TrainResult, Path]:
        """Train on a generated dataset; write checkpoint.json and loss_trace.csv."""
        dataset = load_dataset(data_dir)
        if dataset.split:
            train_set = dataset.subset(dataset.split.train)
            val_set = dataset.subset(dataset.split.validation)
        else:
            train_set, val_set = dataset.samples, []
        config = self.train_config()
        if progress_callback:
            progress_callback(
                f"Training {config.ablation.variant} on {len(train_set)} samples "
                f"({len(val_set)} for validation)"
            )
        result = train(train_set, val_set, config, dataset.atlas, progress_callback)

        output_dir = Path(output_dir)
        output_dir.mkdir(exist_ok=True)
        checkpoint = output_dir / "checkpoint.json"
        result.model.save(checkpoint, self.provenance)
        write_loss_trace(output_dir / "loss_trace.csv", result.trace, self.csv_provenance)
        return result, checkpoint

    def reconstruction_grid(self, sample: SignalSample) -> np.ndarray:
        """Regular grid for one sample from the reconstruct section."""
        section = self.config["reconstruct"]
        first, last = sample.span
        start = first if section.get("start") is None else float(section["start"])
        stop = last if section.get("stop") is None else float(section["stop"])
        return np.linspace(start, stop, int(section["points"]))

    def reconstruct(
        self,
        checkpoint: Path | str,
        signals: Path | str,
        output_path: Path | str,
        network_path: Path | str | None = None,
        progress_callback: Callable | None = None,
    ) -> int:
        """Write `sample_id,roi,timestamp,value` rows on the regular grid; returns the row count."""
        model = load_checkpoint(checkpoint)
        samples = read_signals_csv(signals)
        rows, networks = [], {}
        for sample in samples:
            if progress_callback:
                progress_callback(f"Reconstructing {sample.sample_id}")
            grid = self.reconstruction_grid(sample)
            values = model.reconstruct(sample, grid)
            for roi in range(sample.num_rois):
                for t, v in zip(grid, values[roi]):
                    rows.append((sample.sample_id, roi, t, v))
            if network_path is not None and len(grid) >= 2:
                networks[sample.sample_id] = pearson_network(values).to_dict()

        with open(output_path, "w", encoding="utf-8") as f:
            f.write(self.csv_provenance)
            f.write("sample_id,roi,timestamp,value\n")
            for sample_id, roi, t, v in rows:
                f.write(f"{sample_id},{roi},{t:.9f},{float(v)!r}\n")
        if network_path is not None:
            payload = {"provenance": self.provenance, "labels": model.atlas.labels, "networks": networks}
            Path(network_path).write_text(json.dumps(payload, indent=2))
        return len(rows)

    def evaluate(self, output_dir: Path | str, progress_callback: Callable | None = None) -> EvalReport:
        """Run the configured experiment; write report.json and report.csv."""
        report = run_experiment(self.experiment_config(), progress_callback, self.threads)
        output_dir = Path(output_dir)
        output_dir.mkdir(exist_ok=True)
        report.write_json(output_dir / "report.json", self.provenance)
        report.write_csv(output_dir / "report.csv", self.csv_provenance)
        return report

    def sweep(
        self,
        parameter: str,
        values: list[int],
        output_dir: Path | str,
        progress_callback: Callable | None = None,
    ) -> SweepResult:
        """Run a parameter sweep and write sweep_<parameter>.csv/json."""
        result = run_sweep(self.experiment_config(), parameter, values, progress_callback, self.threads)
        output_dir = Path(output_dir)
        output_dir.mkdir(exist_ok=True)
        result.write_csv(output_dir / f"sweep_{parameter}.csv", self.csv_provenance)
        payload = {**result.to_dict(), "provenance": self.provenance}
        (output_dir / f"sweep_{parameter}.json").write_text(json.dumps(payload, indent=2))
        return result

    def runtime(
        self,
        checkpoint: Path | str | None = None,
        progress_callback: Callable | None = None,
    ) -> RuntimeReport:
        """Time inference on a fixed synthetic batch (untrained weights without a checkpoint)."""
        section = self.config["runtime"]
        spec = replace(self.generator_spec(), num_samples=int(section["num_samples"]))
        dataset = generate(spec)
        if checkpoint is not None:
            model = load_checkpoint(checkpoint)
        else:
            config = self.train_config()
            params = ModelParams.init(config.dims, config.kernel_size, np.random.default_rng(self.seed))
            model = LatentODEModel(params, config, dataset.atlas)
        first, last = dataset.samples[0].span
        grid = np.linspace(first, last, int(section["points"]))
        return runtime_report(
            model,
            dataset.samples,
            grid,
            repetitions=int(section["repetitions"]),
            scaling=bool(section["scaling"]),
            progress_callback=progress_callback,
        )
