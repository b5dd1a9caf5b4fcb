"""Scoring, the polynomial baseline, functional networks, experiments, runtime.

An experiment runs generate -> corrupt -> train -> reconstruct -> score for
every seed and aggregates RMSE on held-out targets as mean +/- std over the
seeds that finished. Polynomial baselines of every configured degree are
scored on the same corrupted test samples. Offset and frequency experiments
train on the clean regularly sampled data and corrupt only the test split.
"""

import csv
import json
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from numpy.polynomial import Polynomial

from .datagen import (
    MISSING_MODES,
    RQ1_PERIODS,
    GeneratorSpec,
    SignalSample,
    apply_rq1_corruption,
    corrupt_frequency,
    corrupt_missing,
    corrupt_offset,
    generate,
    split,
)
from .model.diffmath import leaf
from .model.encoder import EncoderInput, EncoderParams, encode_roi
from .model.latentode import ODEFunction, decode_trajectory, rk4_solve
from .training import (
    Ablation,
    LatentODEModel,
    ModelParams,
    TrainConfig,
    TrainConfigError,
    TrainResult,
    TrainingDivergedError,
    evaluation_points,
    predict_points,
    train,
)
from .utils import mean_std, worker_count

EXPERIMENT_KINDS = ("missing-interp", "missing-extrap", "offset", "frequency", "rq1-mixed")
DEFAULT_VALUES = {
    "missing-interp": (3, 5),
    "missing-extrap": (3, 5),
    "offset": (0.1, 0.2, 0.3),
    "frequency": RQ1_PERIODS,
    "rq1-mixed": (3,),
}
MAX_POLY_DEGREE = 5
# Kinds whose models train on the clean 1 Hz data; only the test split is corrupted
TEST_ONLY_KINDS = ("offset", "frequency")
SWEEP_PARAMETERS = ("d_z", "kernel_size", "d_k")
DECODE_RATIO_RANGE = (1.5, 3.0)
ENCODER_SLOPE_RANGE = (1.0, 2.3)
PLOT_CSV_HEADER = ["setting", "param", "model", "rmse_mean", "rmse_std"]


class EvaluationError(Exception):
    """Base error for scoring and experiments."""
    pass


class BaselineError(EvaluationError):
    """Raised when a polynomial baseline cannot be fitted."""
    pass


class MetricError(EvaluationError):
    """Raised when a metric's inputs break its contract."""
    pass


class ExperimentConfigError(EvaluationError):
    """Raised for an invalid experiment descriptor."""
    pass


# --- metrics ----------------------------------------------------------------


def rmse(predicted, truth) -> float:
    """Root mean squared error over the flattened inputs."""
    predicted = np.asarray(predicted, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if predicted.size == 0 or truth.size == 0:
        raise MetricError("RMSE of an empty list is undefined")
    if predicted.size != truth.size:
        raise MetricError(f"Length mismatch: {predicted.size} predictions, {truth.size} truths")
    return float(np.sqrt(np.mean((predicted - truth) ** 2)))


@dataclass
class PolyPrediction:
    """Baseline output: N x len(targets) values and the degree each ROI got."""
    values: np.ndarray
    degrees: list[int]
    warnings: list[str] = field(default_factory=list)


def _fit_roi(times: np.ndarray, values: np.ndarray, degree: int) -> tuple[Polynomial, int, str | None]:
    if times[-1] == times[0]:
        return Polynomial([float(values.mean())]), 0, None
    # Polynomial.fit maps the observed span onto [-1, 1] before solving
    poly, (_, rank, _, _) = Polynomial.fit(times, values, degree, full=True)
    if rank >= degree + 1:
        return poly, degree, None
    reduced = max(int(rank) - 1, 0)
    poly = Polynomial.fit(times, values, reduced)
    return poly, reduced, f"rank {rank} < {degree + 1}; refitted with degree {reduced}"


def poly_baseline(sample: SignalSample, degree: int, targets) -> PolyPrediction:
    """Least-squares polynomial per ROI over its observed points, evaluated at `targets`."""
    if degree < 0:
        raise BaselineError(f"degree must be >= 0, got {degree}")
    targets = np.asarray(targets, dtype=np.float64).ravel()
    values = np.empty((sample.num_rois, targets.size))
    degrees, warnings = [], []
    for roi, series in enumerate(sample.series):
        if len(series) < degree + 1:
            raise BaselineError(
                f"{sample.sample_id} ROI {roi}: degree {degree} needs {degree + 1} points, "
                f"has {len(series)}"
            )
        poly, used, warning = _fit_roi(series.times, series.values, degree)
        if warning:
            warnings.append(f"{sample.sample_id} ROI {roi}: {warning}")
        values[roi] = poly(targets)
        degrees.append(used)
    return PolyPrediction(values=values, degrees=degrees, warnings=warnings)


@dataclass
class FunctionalNetwork:
    """Pearson correlation between ROI signals."""
    matrix: np.ndarray
    constant_rois: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "constant_rois": self.constant_rois,
            "warnings": self.warnings,
        }


def pearson_network(signals) -> FunctionalNetwork:
    """Pearson matrix of the rows; pairs involving a constant row are 0."""
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2 or signals.shape[1] < 2:
        raise MetricError(f"Need an N x T' matrix with T' >= 2, got shape {signals.shape}")
    centered = signals - signals.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    constant = np.flatnonzero(norms <= 1e-12 * np.maximum(np.abs(signals).max(axis=1), 1.0))
    safe = norms.copy()
    safe[constant] = 1.0
    unit = centered / safe[:, None]
    unit[constant] = 0.0
    matrix = np.clip(unit @ unit.T, -1.0, 1.0)
    matrix = (matrix + matrix.T) / 2
    np.fill_diagonal(matrix, 1.0)
    warnings = [f"ROI {i} has zero variance; its correlations are set to 0" for i in constant]
    return FunctionalNetwork(matrix=matrix, constant_rois=[int(i) for i in constant], warnings=warnings)


# --- experiments ------------------------------------------------------------


@dataclass
class ExperimentConfig:
    kind: str = "missing-interp"
    values: tuple = ()
    seeds: int = 5
    master_seed: int = 0
    variants: tuple[str, ...] = ("ours",)
    poly_degrees: tuple[int, ...] = tuple(range(1, MAX_POLY_DEGREE + 1))
    split_ratios: tuple[int, int, int] = (6, 2, 2)
    missing_fraction: float = 0.2
    misaligned_fraction: float = 0.2
    jitter: float = 0.05
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ExperimentConfigError(
                f"Unknown experiment kind {self.kind!r}; valid kinds: {', '.join(EXPERIMENT_KINDS)}"
            )
        if isinstance(self.generator, dict):
            self.generator = GeneratorSpec.from_dict(self.generator)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if not isinstance(self.values, (list, tuple)):
            self.values = (self.values,)
        self.values = tuple(self.values) or DEFAULT_VALUES[self.kind]
        self.variants = tuple(self.variants)
        self.poly_degrees = tuple(int(d) for d in self.poly_degrees)
        self.split_ratios = tuple(self.split_ratios)
        if self.seeds < 1:
            raise ExperimentConfigError(f"seeds must be >= 1, got {self.seeds}")
        if not self.variants:
            raise ExperimentConfigError("At least one model variant is required")
        for variant in self.variants:
            try:
                Ablation.from_variant(variant)
            except TrainConfigError as e:
                raise ExperimentConfigError(str(e)) from e
        if any(d < 0 for d in self.poly_degrees):
            raise ExperimentConfigError("Polynomial degrees must be >= 0")
        if self.kind.startswith("missing") or self.kind == "rq1-mixed":
            if any(int(v) != v or v < 0 for v in self.values):
                raise ExperimentConfigError(f"Missing-value steps must be integers >= 0: {self.values}")
        if self.kind == "offset" and any(float(v) < 0 for v in self.values):
            raise ExperimentConfigError(f"Offsets must be >= 0: {self.values}")

    @property
    def run_seeds(self) -> list[int]:
        return [self.master_seed + i for i in range(self.seeds)]

    def train_config(self, variant: str, seed: int) -> TrainConfig:
        """Base train settings with the variant's ablation and a per-run seed."""
        base = {f.name: getattr(self.train, f.name) for f in fields(self.train)}
        return TrainConfig(**{**base, "ablation": Ablation.from_variant(variant), "seed": seed})

    def to_dict(self) -> dict:
        data = asdict(self)
        data["generator"] = self.generator.to_dict()
        data["train"] = self.train.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ExperimentConfigError(f"Unknown experiment keys: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class ReportRow:
    setting: str
    param: str
    model: str
    rmse_mean: float | None
    rmse_std: float | None
    per_seed: list[float | None]
    flags: list[str] = field(default_factory=list)
    degree: int | None = None

    @property
    def seeds_used(self) -> int:
        return sum(v is not None for v in self.per_seed)


@dataclass
class EvalReport:
    kind: str
    seeds: list[int]
    rows: list[ReportRow]
    runtime_seconds: float
    config: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def row(self, model: str, param=None) -> ReportRow:
        for r in self.rows:
            if r.model == model and (param is None or r.param == str(param)):
                return r
        raise KeyError(f"No row for model={model!r} param={param!r}")

    def params(self) -> list[str]:
        return list(dict.fromkeys(r.param for r in self.rows))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seeds": self.seeds,
            "runtime_seconds": self.runtime_seconds,
            "rows": [{**asdict(r), "seeds_used": r.seeds_used} for r in self.rows],
            "warnings": self.warnings,
            "config": self.config,
        }

    def write_json(self, path: Path | str, provenance: dict | None = None):
        """Write `to_dict()` plus optional provenance."""
        payload = self.to_dict()
        if provenance:
            payload["provenance"] = provenance
        Path(path).write_text(json.dumps(payload, indent=2))

    def write_csv(self, path: Path | str, provenance: str | None = None):
        with open(path, "w", newline="") as f:
            if provenance:
                f.write(provenance)
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(PLOT_CSV_HEADER)
            for r in self.rows:
                writer.writerow([
                    r.setting,
                    r.param,
                    r.model,
                    "" if r.rmse_mean is None else repr(r.rmse_mean),
                    "" if r.rmse_std is None else repr(r.rmse_std),
                ])


def _corrupt(config: ExperimentConfig, samples: list[SignalSample], value, seed: int) -> list[SignalSample]:
    if config.kind.startswith("missing"):
        mode = MISSING_MODES[0] if config.kind == "missing-interp" else MISSING_MODES[1]
        return [
            corrupt_missing(s, mode, int(value), np.random.default_rng([seed, i]))[0]
            for i, s in enumerate(samples)
        ]
    if config.kind == "offset":
        return [corrupt_offset(s, float(value)) for s in samples]
    if config.kind == "frequency":
        return [corrupt_frequency(s, value) for s in samples]
    corrupted, _ = apply_rq1_corruption(
        samples,
        missing_fraction=config.missing_fraction,
        misaligned_fraction=config.misaligned_fraction,
        seed=seed,
        jitter=config.jitter,
        steps=int(value),
    )
    return corrupted


def _target_points(sample: SignalSample):
    return evaluation_points(sample, include_observed=False)


def _poly_points(sample: SignalSample, degree: int, warnings: list[str]) -> tuple[np.ndarray, np.ndarray]:
    per_roi = _target_points(sample)
    all_times = [t for t, _ in per_roi if len(t)]
    if not all_times:
        return np.empty(0), np.empty(0)
    grid = np.unique(np.concatenate(all_times))
    prediction = poly_baseline(sample, degree, grid)
    warnings.extend(prediction.warnings)
    preds, truth = [], []
    for roi, (times, values) in enumerate(per_roi):
        if len(times):
            preds.append(prediction.values[roi, np.searchsorted(grid, times)])
            truth.append(values)
    return np.concatenate(preds), np.concatenate(truth)


def _score(pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    preds = np.concatenate([p for p, _ in pairs])
    truth = np.concatenate([t for _, t in pairs])
    return rmse(preds, truth)


@dataclass
class SeedOutcome:
    seed: int
    scores: dict[tuple[str, str], float | None]
    flags: dict[tuple[str, str], list[str]]
    warnings: list[str]


def _run_seed(config: ExperimentConfig, seed: int, progress_callback: Callable | None) -> SeedOutcome:
    dataset = generate(replace(config.generator, seed=seed))
    parts = split([s.sample_id for s in dataset.samples], config.split_ratios, seed)
    scores: dict[tuple[str, str], float | None] = {}
    flags: dict[tuple[str, str], list[str]] = {}
    warnings: list[str] = []
    test_only = config.kind in TEST_ONLY_KINDS
    clean = {s.sample_id: s for s in dataset.samples}
    # variant -> TrainResult or the divergence it hit; shared across values when training data is clean
    fitted: dict[str, TrainResult | TrainingDivergedError] = {}

    for value in config.values:
        param = str(value)
        corrupted = {s.sample_id: s for s in _corrupt(config, list(dataset.samples), value, seed)}
        fit_source = clean if test_only else corrupted
        train_set = [fit_source[i] for i in parts.train]
        val_set = [fit_source[i] for i in parts.validation]
        test_set = [corrupted[i] for i in parts.test]
        if not test_only:
            fitted.clear()
        if sum(s.target_count for s in test_set) == 0:
            for model in list(config.variants) + [f"poly-d{d}" for d in config.poly_degrees]:
                scores[(param, model)] = None
                flags[(param, model)] = ["empty-targets"]
            continue

        for degree in config.poly_degrees:
            key = (param, f"poly-d{degree}")
            try:
                scores[key] = _score([_poly_points(s, degree, warnings) for s in test_set])
            except BaselineError as e:
                scores[key] = None
                flags[key] = ["infeasible"]
                warnings.append(f"seed {seed}, {param}: {e}")

        for variant in config.variants:
            key = (param, variant)
            if variant not in fitted:
                if progress_callback:
                    progress_callback(f"Seed {seed}, {config.kind}={param}: training {variant}")
                try:
                    fitted[variant] = train(
                        train_set, val_set, config.train_config(variant, seed), dataset.atlas
                    )
                except TrainingDivergedError as e:
                    fitted[variant] = e
                    if progress_callback:
                        progress_callback(f"Seed {seed} diverged for {variant}; excluded from the aggregate")
            result = fitted[variant]
            if isinstance(result, TrainingDivergedError):
                scores[key] = None
                flags[key] = [f"diverged:seed={seed}"]
                warnings.append(f"seed {seed}, {param}, {variant}: {result}")
                continue
            scores[key] = _score([predict_points(result.model, s, _target_points(s)) for s in test_set])
    return SeedOutcome(seed=seed, scores=scores, flags=flags, warnings=warnings)


def _aggregate(config: ExperimentConfig, outcomes: list[SeedOutcome]) -> list[ReportRow]:
    rows = []
    for value in config.values:
        param = str(value)
        models = list(config.variants) + [f"poly-d{d}" for d in config.poly_degrees]
        poly_rows = []
        for model in models:
            per_seed = [o.scores.get((param, model)) for o in outcomes]
            row_flags = sorted({f for o in outcomes for f in o.flags.get((param, model), [])})
            finished = [v for v in per_seed if v is not None]
            mean, std = mean_std(finished) if finished else (None, None)
            row = ReportRow(config.kind, param, model, mean, std, per_seed, row_flags)
            if model.startswith("poly-d"):
                row.degree = int(model[len("poly-d"):])
                poly_rows.append(row)
            rows.append(row)
        scored = [r for r in poly_rows if r.rmse_mean is not None]
        if scored:
            best = min(scored, key=lambda r: r.rmse_mean)
            rows.append(replace(best, model="poly", per_seed=list(best.per_seed), flags=list(best.flags)))
        elif poly_rows:
            flags = sorted({f for r in poly_rows for f in r.flags})
            rows.append(ReportRow(config.kind, param, "poly", None, None, [None] * len(outcomes), flags))
    return rows


def run_experiment(
    config: ExperimentConfig,
    progress_callback: Callable | None = None,
    threads: int | None = None,
) -> EvalReport:
    """Run every seed (in parallel up to the worker cap) and aggregate.

    Results are ordered by seed regardless of completion order, so a fixed
    master seed gives identical reports.
    """
    start = time.perf_counter()
    seeds = config.run_seeds
    workers = min(worker_count(threads), len(seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda s: _run_seed(config, s, progress_callback), seeds))
    else:
        outcomes = [_run_seed(config, s, progress_callback) for s in seeds]

    warnings = [w for o in outcomes for w in o.warnings]
    rows = _aggregate(config, outcomes)
    for row in rows:
        if "empty-targets" in row.flags and row.model == config.variants[0]:
            warnings.append(f"{config.kind}={row.param}: no held-out targets; RMSE omitted")
    if progress_callback:
        for w in warnings:
            progress_callback(f"warning: {w}")
    return EvalReport(
        kind=config.kind,
        seeds=seeds,
        rows=rows,
        runtime_seconds=time.perf_counter() - start,
        config=config.to_dict(),
        warnings=warnings,
    )


@dataclass
class SweepResult:
    parameter: str
    values: list
    reports: list[EvalReport]

    def write_csv(self, path: Path | str, provenance: str | None = None):
        with open(path, "w", newline="") as f:
            if provenance:
                f.write(provenance)
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["parameter", "value", *PLOT_CSV_HEADER])
            for value, report in zip(self.values, self.reports):
                for r in report.rows:
                    writer.writerow([
                        self.parameter,
                        value,
                        r.setting,
                        r.param,
                        r.model,
                        "" if r.rmse_mean is None else repr(r.rmse_mean),
                        "" if r.rmse_std is None else repr(r.rmse_std),
                    ])

    def to_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "values": self.values,
            "reports": [r.to_dict() for r in self.reports],
        }


def run_sweep(
    config: ExperimentConfig,
    parameter: str,
    values: Sequence[int],
    progress_callback: Callable | None = None,
    threads: int | None = None,
) -> SweepResult:
    """Rerun one experiment per value of a model size (d_z, kernel_size, d_k)."""
    if parameter not in SWEEP_PARAMETERS:
        raise ExperimentConfigError(
            f"Cannot sweep {parameter!r}; choose from {', '.join(SWEEP_PARAMETERS)}"
        )
    if not values:
        raise ExperimentConfigError("A sweep needs at least one value")
    reports = []
    for value in values:
        if progress_callback:
            progress_callback(f"Sweep {parameter}={value}")
        base = {f.name: getattr(config.train, f.name) for f in fields(config.train)}
        if parameter == "kernel_size":
            base["kernel_size"] = int(value)
        else:
            dims = replace(config.train.dims, **{parameter: int(value)})
            if parameter == "d_k":
                # Ablated graph branches pass h (width d_k) straight to fusion
                dims = replace(dims, d_g=int(value))
            base["dims"] = dims
        try:
            train_config = TrainConfig(**base)
        except TrainConfigError as e:
            raise ExperimentConfigError(f"{parameter}={value}: {e}") from e
        reports.append(run_experiment(replace(config, train=train_config), progress_callback, threads))
    return SweepResult(parameter=parameter, values=list(values), reports=reports)


# --- runtime ----------------------------------------------------------------


@dataclass
class RuntimeStats:
    mean: float
    std: float
    repetitions: int
    timings: list[float]


def measure_runtime(task: Callable[[], object], repetitions: int = 5, warmup: bool = True) -> RuntimeStats:
    """Wall-clock `task` `repetitions` times on this thread; the warm-up run is discarded."""
    if repetitions < 1:
        raise MetricError(f"repetitions must be >= 1, got {repetitions}")
    if warmup:
        task()
    timings = []
    for _ in range(repetitions):
        start = time.perf_counter()
        task()
        timings.append(max(time.perf_counter() - start, 0.0))
    mean, std = mean_std(timings)
    return RuntimeStats(mean=mean, std=std, repetitions=repetitions, timings=timings)


@dataclass
class ScalingCheck:
    name: str
    measured: float
    low: float
    high: float

    @property
    def passed(self) -> bool:
        return self.low <= self.measured <= self.high

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def decode_scaling_check(
    params: ModelParams,
    num_points: int = 200,
    num_rois: int = 8,
    repetitions: int = 3,
    seed: int = 0,
) -> ScalingCheck:
    """Solve + decode time on T' points vs 2T' points over the same span."""
    rng = np.random.default_rng(seed)
    nodes = params.leaves()
    d_z = nodes["ode.w1"].rows
    z0 = rng.standard_normal((num_rois, d_z))
    g = ODEFunction(nodes["ode.w1"], nodes["ode.b1"], nodes["ode.w2"], nodes["ode.b2"])

    def stage(points: int):
        grid = np.linspace(0.0, 10.0, points)

        def run():
            states = rk4_solve(g, leaf(z0), grid, 1)
            decode_trajectory(states, nodes["decoder.weight"], nodes["decoder.bias"])
        return run

    small = measure_runtime(stage(num_points), repetitions)
    large = measure_runtime(stage(2 * num_points), repetitions)
    return ScalingCheck("decode_ratio", large.mean / max(small.mean, 1e-12), *DECODE_RATIO_RANGE)


def encoder_scaling_check(
    params: ModelParams,
    lengths: Sequence[int] = (32, 64, 128, 256),
    repetitions: int = 3,
    seed: int = 0,
) -> ScalingCheck:
    """Log-log slope of single-ROI encoder time against series length."""
    rng = np.random.default_rng(seed)
    nodes = params.leaves()
    encoder = EncoderParams(
        nodes["conv.weight"], nodes["conv.bias"], nodes["attn.w_q"], nodes["attn.w_k"], nodes["attn.w_v"]
    )
    timings = []
    for length in lengths:
        grid = np.arange(length, dtype=np.float64)
        inp = EncoderInput.from_grid(grid, rng.standard_normal(length), np.ones(length))
        timings.append(measure_runtime(lambda: encode_roi(inp, encoder), repetitions).mean)
    slope = np.polyfit(np.log(lengths), np.log(np.maximum(timings, 1e-12)), 1)[0]
    return ScalingCheck("encoder_slope", float(slope), *ENCODER_SLOPE_RANGE)


@dataclass
class RuntimeReport:
    reconstruction: RuntimeStats
    num_samples: int
    grid_points: int
    checks: list[ScalingCheck]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "reconstruction": asdict(self.reconstruction),
            "num_samples": self.num_samples,
            "grid_points": self.grid_points,
            "checks": [c.to_dict() for c in self.checks],
            "warnings": self.warnings,
        }


def runtime_report(
    model: LatentODEModel,
    samples: Sequence[SignalSample],
    grid,
    repetitions: int = 5,
    scaling: bool = True,
    progress_callback: Callable | None = None,
) -> RuntimeReport:
    """Time the inference pass over `samples`, then the scaling smoke checks."""
    grid = np.asarray(grid, dtype=np.float64)

    def task():
        for sample in samples:
            model.reconstruct(sample, grid)

    if progress_callback:
        progress_callback(f"Timing reconstruction of {len(samples)} samples x {len(grid)} points")
    stats = measure_runtime(task, repetitions)
    checks, warnings = [], []
    if scaling:
        if progress_callback:
            progress_callback("Running scaling checks")
        checks = [
            decode_scaling_check(model.params, num_rois=model.num_rois),
            encoder_scaling_check(model.params),
        ]
        for check in checks:
            if not check.passed:
                warnings.append(
                    f"{check.name}={check.measured:.3f} outside [{check.low}, {check.high}]"
                )
    if progress_callback:
        for w in warnings:
            progress_callback(f"warning: {w}")
    return RuntimeReport(stats, len(samples), len(grid), checks, warnings)
