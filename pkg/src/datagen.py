"""Synthetic multi-ROI signals and the corruption protocols.

Signals are sums of sinusoids, with part of every ROI's components drawn
from a pool shared by all ROIs so the ROIs correlate. The corruption
operators hide points (missing values), shift the sampling clock (irregular
offsets) or change the sampling period (frequency misalignment); the
hidden or replaced truth travels with the sample as `targets`.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .model.relgraphs import ROIAtlas

CSV_HEADER = ["sample_id", "roi", "timestamp", "value", "observed"]
MISSING_MODES = ("interpolation", "extrapolation")
RQ1_PERIODS = ("2/3", "1/2", "1/3")


class DataGenError(Exception):
    """Base error for data generation and I/O."""
    pass


class DataGenConfigError(DataGenError):
    """Raised for invalid generator or corruption settings."""
    pass


class ParseError(DataGenError):
    """Raised when a signal CSV cannot be parsed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class SinusoidComponent:
    amplitude: float
    omega: float
    phase: float

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return self.amplitude * np.sin(self.omega * t + self.phase)


@dataclass(frozen=True)
class TrigSignal:
    """Ground truth for one sample: sinusoid components per ROI."""
    components: tuple[tuple[SinusoidComponent, ...], ...]

    @property
    def num_rois(self) -> int:
        return len(self.components)

    def values(self, roi: int, times) -> np.ndarray:
        t = np.asarray(times, dtype=np.float64)
        out = np.zeros_like(t)
        for component in self.components[roi]:
            out = out + component(t)
        return out

    def matrix(self, times) -> np.ndarray:
        return np.vstack([self.values(i, times) for i in range(self.num_rois)])


@dataclass
class GeneratorSpec:
    """Settings for `generate`; ranges are inclusive (low, high) pairs."""
    num_rois: int = 8
    num_samples: int = 30
    duration: float = 50.0
    rate: float = 1.0
    components: tuple[int, int] = (2, 4)
    amplitude_range: tuple[float, float] = (0.5, 1.5)
    omega_range: tuple[float, float] = (2 * math.pi / 20, 2 * math.pi / 4)
    pool_size: int = 3
    shared_fraction: float = 0.5
    atlas_extent: float = 100.0
    seed: int = 0
    # Explicit per-ROI components (list of [amplitude, omega, phase]); overrides the draws
    explicit: list | None = None

    def __post_init__(self):
        self.components = tuple(int(v) for v in self.components)
        self.amplitude_range = tuple(float(v) for v in self.amplitude_range)
        self.omega_range = tuple(float(v) for v in self.omega_range)
        if self.num_rois < 2:
            raise DataGenConfigError("num_rois must be >= 2 (the atlas needs two ROIs)")
        if self.num_samples < 1:
            raise DataGenConfigError("num_samples must be >= 1")
        if self.rate <= 0:
            raise DataGenConfigError("rate must be positive")
        if self.duration * self.rate < 1:
            raise DataGenConfigError("duration * rate must give at least one point")
        low, high = self.components
        if low < 1 or high < low:
            raise DataGenConfigError(f"Component count range must satisfy 1 <= low <= high, got {self.components}")
        if self.amplitude_range[0] < 0 or self.amplitude_range[1] < self.amplitude_range[0]:
            raise DataGenConfigError(f"Invalid amplitude range {self.amplitude_range}")
        if self.omega_range[0] <= 0 or self.omega_range[1] < self.omega_range[0]:
            raise DataGenConfigError(f"Frequencies must be positive, got {self.omega_range}")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise DataGenConfigError("shared_fraction must be in [0, 1]")
        if self.pool_size < 1:
            raise DataGenConfigError("pool_size must be >= 1")
        if self.explicit is not None:
            if len(self.explicit) != self.num_rois:
                raise DataGenConfigError(
                    f"explicit components given for {len(self.explicit)} ROIs, expected {self.num_rois}"
                )
            for roi in self.explicit:
                if not roi:
                    raise DataGenConfigError("Every ROI needs at least one component")
                for amplitude, omega, _ in roi:
                    if amplitude < 0 or omega <= 0:
                        raise DataGenConfigError(
                            f"Component needs amplitude >= 0 and omega > 0, got ({amplitude}, {omega})"
                        )

    @property
    def num_points(self) -> int:
        return int(round(self.duration * self.rate))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["components"] = list(self.components)
        data["amplitude_range"] = list(self.amplitude_range)
        data["omega_range"] = list(self.omega_range)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise DataGenConfigError(f"Unknown generator keys: {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass(frozen=True)
class RoiSeries:
    """Timestamps (seconds) and values of one ROI."""
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if times.shape != values.shape or times.ndim != 1:
            raise DataGenError(f"times {times.shape} and values {values.shape} must be equal 1-D")
        if np.any(np.diff(times) <= 0):
            raise DataGenError("Timestamps must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.times)

    @classmethod
    def empty(cls) -> "RoiSeries":
        return cls(np.empty(0), np.empty(0))


@dataclass(frozen=True)
class SignalSample:
    """One subject: observed series per ROI, held-out targets, optional truth."""
    sample_id: str
    series: tuple[RoiSeries, ...]
    targets: tuple[RoiSeries, ...] | None = None
    truth: TrigSignal | None = None

    def __post_init__(self):
        for roi, s in enumerate(self.series):
            if len(s) == 0:
                raise DataGenError(f"{self.sample_id}: ROI {roi} has no observed points")
        if self.targets is not None and len(self.targets) != len(self.series):
            raise DataGenError(f"{self.sample_id}: targets cover a different number of ROIs")

    @property
    def num_rois(self) -> int:
        return len(self.series)

    @property
    def target_count(self) -> int:
        return sum(len(t) for t in self.targets) if self.targets else 0

    @property
    def span(self) -> tuple[float, float]:
        return (
            min(float(s.times[0]) for s in self.series),
            max(float(s.times[-1]) for s in self.series),
        )


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]

    def to_dict(self) -> dict:
        return {"train": self.train, "validation": self.validation, "test": self.test}


@dataclass
class Dataset:
    """Samples plus everything needed to reproduce them."""
    samples: list[SignalSample]
    atlas: ROIAtlas
    spec: GeneratorSpec | None = None
    corruptions: list[dict] = field(default_factory=list)
    split: DatasetSplit | None = None

    def by_id(self) -> dict[str, SignalSample]:
        return {s.sample_id: s for s in self.samples}

    def subset(self, ids: list[str]) -> list[SignalSample]:
        """Samples for `ids`, in the order given."""
        index = self.by_id()
        return [index[i] for i in ids]


# --- generation -------------------------------------------------------------


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _draw_component(rng: np.random.Generator, spec: GeneratorSpec) -> SinusoidComponent:
    return SinusoidComponent(
        amplitude=float(rng.uniform(*spec.amplitude_range)),
        omega=float(rng.uniform(*spec.omega_range)),
        phase=float(rng.uniform(0.0, 2 * math.pi)),
    )


def _shared_pool(spec: GeneratorSpec) -> list[SinusoidComponent]:
    rng = np.random.default_rng(spec.seed)
    return [_draw_component(rng, spec) for _ in range(spec.pool_size)]


def draw_signal(spec: GeneratorSpec, index: int, pool: list[SinusoidComponent]) -> TrigSignal:
    """Ground truth for sample `index`; each sample owns a (seed, index) stream."""
    if spec.explicit is not None:
        return TrigSignal(
            tuple(
                tuple(SinusoidComponent(float(a), float(w), float(p)) for a, w, p in roi)
                for roi in spec.explicit
            )
        )
    rng = _sample_rng(spec.seed, index)
    rois = []
    for _ in range(spec.num_rois):
        count = int(rng.integers(spec.components[0], spec.components[1] + 1))
        components = []
        for _ in range(count):
            if rng.random() < spec.shared_fraction:
                components.append(pool[int(rng.integers(len(pool)))])
            else:
                components.append(_draw_component(rng, spec))
        rois.append(tuple(components))
    return TrigSignal(tuple(rois))


def sample_from_truth(sample_id: str, truth: TrigSignal, times: np.ndarray) -> SignalSample:
    """Sample every ROI of `truth` at `times`."""
    series = tuple(RoiSeries(times, truth.values(i, times)) for i in range(truth.num_rois))
    return SignalSample(sample_id=sample_id, series=series, truth=truth)


def sample_id_for(index: int) -> str:
    """Stable id of the index-th generated sample."""
    return f"s{index:04d}"


def generate(spec: GeneratorSpec) -> Dataset:
    """Regularly sampled signals at t = 0, 1/rate, ...; deterministic per seed."""
    pool = _shared_pool(spec)
    times = np.arange(spec.num_points, dtype=np.float64) / spec.rate
    samples = [
        sample_from_truth(sample_id_for(i), draw_signal(spec, i, pool), times)
        for i in range(spec.num_samples)
    ]
    atlas = ROIAtlas.random(spec.num_rois, spec.seed, spec.atlas_extent)
    return Dataset(samples=samples, atlas=atlas, spec=spec)


def truths_for(spec: GeneratorSpec) -> dict[str, TrigSignal]:
    """Ground truth of every sample `generate(spec)` draws."""
    pool = _shared_pool(spec)
    return {sample_id_for(i): draw_signal(spec, i, pool) for i in range(spec.num_samples)}


# --- corruptions ------------------------------------------------------------


def _require_truth(sample: SignalSample, operation: str) -> TrigSignal:
    if sample.truth is None:
        raise DataGenError(f"{operation} needs ground truth, {sample.sample_id} has none")
    return sample.truth


def _original_targets(sample: SignalSample) -> tuple[RoiSeries, ...]:
    return sample.targets if sample.targets is not None else sample.series


def corrupt_missing(
    sample: SignalSample,
    mode: str,
    steps: int,
    seed: int | np.random.Generator | None = None,
) -> tuple[SignalSample, tuple[RoiSeries, ...]]:
    """Hide `steps` consecutive time steps in every ROI.

    Interpolation hides a block strictly inside the series (start drawn from
    `seed`); extrapolation hides the last `steps` points.

    Returns:
        (corrupted sample with `targets` set, the held-out targets)
    """
    if mode not in MISSING_MODES:
        raise DataGenConfigError(f"Unknown missing-value mode {mode!r}; use {MISSING_MODES}")
    if steps < 0:
        raise DataGenConfigError("steps must be >= 0")
    shortest = min(len(s) for s in sample.series)
    if steps == 0:
        return sample, tuple(RoiSeries.empty() for _ in sample.series)
    if steps >= shortest:
        raise DataGenConfigError(f"Cannot hide {steps} steps of a {shortest}-point series")
    if mode == "interpolation":
        if shortest < steps + 2:
            raise DataGenConfigError(
                f"Interpolation needs a known point on each side; {steps} steps in {shortest} points"
            )
        rng = np.random.default_rng(seed)
        start = int(rng.integers(1, shortest - steps))
    else:
        start = None

    kept, held = [], []
    for s in sample.series:
        lo = start if start is not None else len(s) - steps
        hide = np.zeros(len(s), dtype=bool)
        hide[lo:lo + steps] = True
        kept.append(RoiSeries(s.times[~hide], s.values[~hide]))
        held.append(RoiSeries(s.times[hide], s.values[hide]))
    targets = tuple(held)
    return replace(sample, series=tuple(kept), targets=targets), targets


def corrupt_offset(sample: SignalSample, offset: float) -> SignalSample:
    """Resample every ROI from ground truth at its timestamps + offset.

    Targets stay on the original grid (or earlier targets, if already set).
    """
    if offset < 0:
        raise DataGenConfigError(f"offset must be >= 0, got {offset}")
    truth = _require_truth(sample, "corrupt_offset")
    targets = _original_targets(sample)
    series = tuple(
        RoiSeries(s.times + offset, truth.values(i, s.times + offset))
        for i, s in enumerate(sample.series)
    )
    return replace(sample, series=series, targets=targets)


def as_fraction(period) -> Fraction:
    """Exact period from '2/3', 0.5, Fraction(...)."""
    if isinstance(period, Fraction):
        value = period
    elif isinstance(period, str):
        try:
            value = Fraction(period)
        except ValueError as e:
            raise DataGenConfigError(f"Cannot parse period {period!r}") from e
    else:
        value = Fraction(float(period)).limit_denominator(10**6)
    if value <= 0:
        raise DataGenConfigError(f"period must be positive, got {period}")
    return value


def periodic_times(start: float, stop: float, period) -> np.ndarray:
    """start, start + p, ... up to and including stop, computed in rationals."""
    p = as_fraction(period)
    t0 = Fraction(start).limit_denominator(10**6)
    t1 = Fraction(stop).limit_denominator(10**6)
    count = int((t1 - t0) / p) + 1
    return np.array([float(t0 + k * p) for k in range(count)], dtype=np.float64)


def corrupt_frequency(sample: SignalSample, period) -> SignalSample:
    """Resample every ROI at a new fixed period over the same time span."""
    truth = _require_truth(sample, "corrupt_frequency")
    targets = _original_targets(sample)
    series = []
    for i, s in enumerate(sample.series):
        times = periodic_times(s.times[0], s.times[-1], period)
        series.append(RoiSeries(times, truth.values(i, times)))
    return replace(sample, series=tuple(series), targets=targets)


def jitter_sample(sample: SignalSample, amount: float, rng: np.random.Generator) -> SignalSample:
    """Uniform timestamp noise in [-amount, amount], clipped at t >= 0."""
    if amount <= 0:
        return sample
    truth = _require_truth(sample, "jitter")
    series = []
    for i, s in enumerate(sample.series):
        times = np.clip(s.times + rng.uniform(-amount, amount, size=len(s)), 0.0, None)
        series.append(RoiSeries(times, truth.values(i, times)))
    return replace(sample, series=tuple(series))


def apply_rq1_corruption(
    samples: list[SignalSample],
    missing_fraction: float = 0.2,
    misaligned_fraction: float = 0.2,
    seed: int = 0,
    jitter: float = 0.05,
    steps: int = 3,
    periods: tuple = RQ1_PERIODS,
) -> tuple[list[SignalSample], list[dict]]:
    """Assign disjoint sample groups to missing values and misaligned sampling.

    Remaining samples only receive timestamp jitter.

    Returns:
        (corrupted samples in input order, one descriptor per sample)
    """
    for name, value in (("missing_fraction", missing_fraction), ("misaligned_fraction", misaligned_fraction)):
        if not 0.0 <= value <= 1.0:
            raise DataGenConfigError(f"{name} must be in [0, 1], got {value}")
    if missing_fraction + misaligned_fraction > 1.0:
        raise DataGenConfigError("Corruption fractions sum to more than 1")

    rng = np.random.default_rng(seed)
    n = len(samples)
    n_missing = int(round(missing_fraction * n))
    n_misaligned = min(int(round(misaligned_fraction * n)), n - n_missing)
    order = rng.permutation(n)
    group = {}
    for rank, idx in enumerate(order):
        if rank < n_missing:
            group[int(idx)] = "missing"
        elif rank < n_missing + n_misaligned:
            group[int(idx)] = "misaligned"
        else:
            group[int(idx)] = "jitter"

    out, descriptors = [], []
    for idx, sample in enumerate(samples):
        kind = group[idx]
        if kind == "missing":
            mode = MISSING_MODES[int(rng.integers(2))]
            corrupted, _ = corrupt_missing(sample, mode, steps, rng)
            descriptor = {"kind": "missing", "mode": mode, "steps": steps}
        elif kind == "misaligned":
            period = periods[int(rng.integers(len(periods)))]
            corrupted = corrupt_frequency(sample, period)
            descriptor = {"kind": "frequency", "period": str(as_fraction(period))}
        else:
            corrupted = jitter_sample(sample, jitter, rng)
            descriptor = {"kind": "jitter", "amount": jitter}
        descriptor["sample_id"] = sample.sample_id
        out.append(corrupted)
        descriptors.append(descriptor)
    return out, descriptors


def split(sample_ids: list[str], ratios: tuple = (6, 2, 2), seed: int = 0) -> DatasetSplit:
    """Disjoint, exhaustive train/validation/test partition, deterministic per seed."""
    n = len(sample_ids)
    if n < 5:
        raise DataGenConfigError(f"Need at least 5 samples to split, got {n}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise DataGenConfigError(f"Invalid split ratios {ratios}")
    total = float(sum(ratios))
    n_val = int(round(n * ratios[1] / total))
    n_test = int(round(n * ratios[2] / total))
    order = np.random.default_rng(seed).permutation(n)
    ids = [sample_ids[i] for i in order]
    return DatasetSplit(
        train=ids[n_val + n_test:],
        validation=ids[:n_val],
        test=ids[n_val:n_val + n_test],
    )


# --- file I/O ---------------------------------------------------------------


def provenance_line(config_sha256: str, seed: int) -> str:
    """Comment line heading every CSV artifact."""
    return f"# config_sha256={config_sha256} seed={seed}\n"


def write_signals_csv(path: Path | str, samples: list[SignalSample], provenance: str | None = None):
    """One row per point; held-out targets are rows with observed=0."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        if provenance:
            f.write(provenance)
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for sample in samples:
            for roi in range(sample.num_rois):
                rows = [(t, v, 1) for t, v in zip(sample.series[roi].times, sample.series[roi].values)]
                if sample.targets is not None:
                    target = sample.targets[roi]
                    rows += [(t, v, 0) for t, v in zip(target.times, target.values)]
                for t, v, observed in sorted(rows, key=lambda r: (r[0], -r[2])):
                    writer.writerow([sample.sample_id, roi, f"{t:.9f}", repr(float(v)), observed])


def read_signals_csv(path: Path | str) -> list[SignalSample]:
    """Parse a signal CSV back into samples (no ground truth attached)."""
    path = Path(path)
    points: dict[str, dict[int, list]] = {}
    header_seen = False
    with open(path, encoding="utf-8", newline="") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = next(csv.reader([line]))
            if not header_seen:
                if fields != CSV_HEADER:
                    raise ParseError(line_no, f"expected header {','.join(CSV_HEADER)}")
                header_seen = True
                continue
            if len(fields) != len(CSV_HEADER):
                raise ParseError(line_no, f"expected {len(CSV_HEADER)} columns, got {len(fields)}")
            sample_id, roi, timestamp, value, observed = fields
            try:
                roi_index = int(roi)
                t = float(timestamp)
                v = float(value)
                flag = int(observed)
            except ValueError as e:
                raise ParseError(line_no, str(e)) from e
            if flag not in (0, 1) or roi_index < 0:
                raise ParseError(line_no, "roi must be >= 0 and observed must be 0 or 1")
            points.setdefault(sample_id, {}).setdefault(roi_index, []).append((t, v, flag))
    if not header_seen:
        raise ParseError(1, "file has no header")

    samples = []
    for sample_id, rois in points.items():
        n_rois = max(rois) + 1
        series, targets = [], []
        for roi in range(n_rois):
            entries = rois.get(roi, [])
            obs = [(t, v) for t, v, flag in entries if flag == 1]
            held = [(t, v) for t, v, flag in entries if flag == 0]
            series.append(_series_from_pairs(obs))
            targets.append(_series_from_pairs(held))
        has_targets = any(len(t) for t in targets)
        samples.append(
            SignalSample(
                sample_id=sample_id,
                series=tuple(series),
                targets=tuple(targets) if has_targets else None,
            )
        )
    return samples


def _series_from_pairs(pairs: list[tuple[float, float]]) -> RoiSeries:
    if not pairs:
        return RoiSeries.empty()
    pairs = sorted(pairs)
    return RoiSeries(np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))


def write_manifest(path: Path | str, dataset: Dataset, provenance: dict | None = None):
    """Write generator settings, corruptions, split and atlas as JSON."""
    manifest = {
        "generator": dataset.spec.to_dict() if dataset.spec else None,
        "corruptions": dataset.corruptions,
        "split": dataset.split.to_dict() if dataset.split else None,
        "atlas": dataset.atlas.to_list(),
        "samples": [s.sample_id for s in dataset.samples],
    }
    if provenance:
        manifest["provenance"] = provenance
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(directory: Path | str) -> Dataset:
    """Read signals.csv + manifest.json; ground truth is regenerated from the generator settings."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    csv_path = directory / "signals.csv"
    if not csv_path.exists():
        raise DataGenError(f"Signal file not found: {csv_path}")
    samples = read_signals_csv(csv_path)

    spec, split_assignment, corruptions, atlas = None, None, [], None
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("generator"):
            spec = GeneratorSpec.from_dict(manifest["generator"])
        if manifest.get("split"):
            split_assignment = DatasetSplit(**manifest["split"])
        corruptions = manifest.get("corruptions", [])
        if manifest.get("atlas"):
            atlas = ROIAtlas.from_list(manifest["atlas"])
    if atlas is None and (directory / "atlas.json").exists():
        atlas = ROIAtlas.load(directory / "atlas.json")
    if atlas is None:
        raise DataGenError(f"No atlas found in {directory}")

    if spec is not None:
        truths = truths_for(spec)
        samples = [replace(s, truth=truths.get(s.sample_id)) for s in samples]
    return Dataset(
        samples=samples,
        atlas=atlas,
        spec=spec,
        corruptions=corruptions,
        split=split_assignment,
    )
