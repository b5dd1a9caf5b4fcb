"""End-to-end training of the latent ODE model.

A forward pass runs encode -> relation graphs -> posterior -> sample ->
integrate -> decode for one sample. A batch's loss is the masked MSE pooled
over all observed points plus `kl_weight` times the mean per-ROI KL of the
initial-state posterior against N(0, 1). Parameters are updated with Adam
and the best-validated parameters are kept.
"""

import json
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .datagen import SignalSample
from .model.diffmath import (
    DimensionError,
    Node,
    add,
    backward,
    concat_rows,
    leaf,
    mul,
    reshape,
    scale,
    slice_cols,
    square,
    sub,
    sum_all,
)
from .model.encoder import (
    DEFAULT_KERNEL_SIZE,
    NUM_CHANNELS,
    EncoderError,
    EncoderInput,
    EncoderParams,
    long_term_encode,
    short_term_encode,
)
from .model.latentode import (
    DEFAULT_SUBSTEPS,
    GridError,
    ODEFunction,
    PosteriorHead,
    PosteriorParams,
    SolverError,
    Trajectory,
    check_grid,
    decode_trajectory,
    infer_posterior,
    kl_standard_normal,
    reparameterize,
    rk4_solve,
    substeps_for,
)
from .model.relgraphs import (
    GCNParams,
    GraphError,
    ROIAtlas,
    SpatialGraph,
    TemporalGraph,
    build_temporal_graph,
    fuse,
    gcn_layer,
    spatial_graph_for,
)

CHECKPOINT_FORMAT = "odesig-checkpoint"
CHECKPOINT_VERSION = 1

# Numerical failures inside a pass that end training rather than the caller
DIVERGENCE_ERRORS = (SolverError, GraphError, EncoderError)


class TrainingError(Exception):
    """Base error for training and inference."""
    pass


class TrainConfigError(TrainingError):
    """Raised for invalid training settings."""
    pass


class TrainingDivergedError(TrainingError):
    """Raised when the loss stops being finite."""

    def __init__(self, epoch: int, loss: float | None = None, reason: str = ""):
        detail = f" ({reason})" if reason else ""
        super().__init__(f"Training diverged at epoch {epoch}: loss={loss}{detail}")
        self.epoch = epoch
        self.loss = loss


class EmptyBatchError(TrainingError):
    """Raised when a loss is requested over no samples."""
    pass


class CheckpointError(TrainingError):
    """Raised when a checkpoint cannot be read."""
    pass


class CompatibilityError(CheckpointError):
    """Raised when a checkpoint does not fit the data or config it is used with."""
    pass


# --- configuration ----------------------------------------------------------


@dataclass
class ModelDims:
    num_filters: int = 8
    d_k: int = 8
    d_g: int = 8
    d_u: int = 8
    d_z: int = 4
    d_h: int = 16


@dataclass
class Ablation:
    no_positional_encoder: bool = False
    no_temporal_graph: bool = False
    no_spatial_graph: bool = False

    @property
    def variant(self) -> str:
        suffix = "".join(
            tag
            for tag, off in (
                ("p", self.no_positional_encoder),
                ("t", self.no_temporal_graph),
                ("s", self.no_spatial_graph),
            )
            if off
        )
        return f"ours-{suffix}" if suffix else "ours"

    @classmethod
    def from_variant(cls, name: str) -> "Ablation":
        """Ablation flags for a variant name such as ours-p or ours-ts."""
        if name == "ours":
            return cls()
        if not name.startswith("ours-") or set(name[5:]) - set("pts"):
            raise TrainConfigError(f"Unknown model variant {name!r}; use ours, ours-p, ours-t, ours-s")
        tags = set(name[5:])
        return cls("p" in tags, "t" in tags, "s" in tags)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    kl_weight: float = 0.1
    batch_size: int = 16
    seed: int = 0
    substeps: int = DEFAULT_SUBSTEPS
    step_size: float | None = None
    kernel_size: int = DEFAULT_KERNEL_SIZE
    spatial_radius: float | None = None
    dims: ModelDims = field(default_factory=ModelDims)
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if isinstance(self.dims, Mapping):
            self.dims = ModelDims(**self.dims)
        if isinstance(self.ablation, Mapping):
            self.ablation = Ablation(**self.ablation)
        if not self.learning_rate > 0:
            raise TrainConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise TrainConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.kl_weight < 0:
            raise TrainConfigError(f"kl_weight must be >= 0, got {self.kl_weight}")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.substeps < 1:
            raise TrainConfigError("substeps must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise TrainConfigError("step_size must be > 0 when set")
        if self.kernel_size < 1:
            raise TrainConfigError("kernel_size must be >= 1")
        if self.spatial_radius is not None and not self.spatial_radius > 0:
            raise TrainConfigError("spatial_radius must be > 0 when set")
        for name, value in asdict(self.dims).items():
            if value < 1:
                raise TrainConfigError(f"dims.{name} must be >= 1, got {value}")
        if not self.ablation.no_positional_encoder and self.dims.num_filters % 2:
            raise TrainConfigError("num_filters must be even (it is the positional-encoding width)")
        graph_off = self.ablation.no_temporal_graph or self.ablation.no_spatial_graph
        if graph_off and self.dims.d_g != self.dims.d_k:
            raise TrainConfigError("Graph ablations feed h straight to fusion, so d_g must equal d_k")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise TrainConfigError(f"Unknown train keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except TypeError as e:
            raise TrainConfigError(str(e)) from e


# --- parameters -------------------------------------------------------------


def param_shapes(dims: ModelDims, kernel_size: int) -> dict[str, tuple[int, int]]:
    """Name -> shape of every trainable array, in flattening order."""
    f, d_k, d_g, d_u, d_z, d_h = (
        dims.num_filters, dims.d_k, dims.d_g, dims.d_u, dims.d_z, dims.d_h
    )
    return {
        "conv.weight": (NUM_CHANNELS * kernel_size, f),
        "conv.bias": (1, f),
        "attn.w_q": (f, d_k),
        "attn.w_k": (f, d_k),
        "attn.w_v": (f, d_k),
        "gcn.temporal": (d_k, d_g),
        "gcn.spatial": (d_k, d_g),
        "fuse.weight": (2 * d_g, d_u),
        "fuse.bias": (1, d_u),
        "posterior.mean.weight": (d_u, d_z),
        "posterior.mean.bias": (1, d_z),
        "posterior.logvar.weight": (d_u, d_z),
        "posterior.logvar.bias": (1, d_z),
        "ode.w1": (d_z, d_h),
        "ode.b1": (1, d_h),
        "ode.w2": (d_h, d_z),
        "ode.b2": (1, d_z),
        "decoder.weight": (d_z, 1),
        "decoder.bias": (1, 1),
    }


@dataclass
class ModelParams:
    """All learnable arrays by name, in a fixed order for flattening."""
    arrays: dict[str, np.ndarray]

    @classmethod
    def init(cls, dims: ModelDims, kernel_size: int, rng: np.random.Generator) -> "ModelParams":
        """Scaled-normal weights, zero biases, a small positive conv bias, zero decoder."""
        arrays = {}
        for name, shape in param_shapes(dims, kernel_size).items():
            if name.endswith("bias") or name.startswith("ode.b"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        arrays["conv.bias"] = np.full(arrays["conv.bias"].shape, 0.1)
        # Zero output layer: an untrained model reconstructs each ROI's mean
        arrays["decoder.weight"] = np.zeros(arrays["decoder.weight"].shape)
        return cls(arrays)

    @classmethod
    def from_arrays(
        cls, arrays: Mapping[str, np.ndarray], dims: ModelDims, kernel_size: int
    ) -> "ModelParams":
        """Build from loaded arrays, checking names and shapes against `dims`."""
        expected = param_shapes(dims, kernel_size)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise CompatibilityError(f"Parameter names differ (missing={missing}, extra={extra})")
        out = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise CompatibilityError(f"{name} has shape {arr.shape}, config expects {shape}")
            out[name] = arr
        return cls(out)

    @property
    def shapes(self) -> dict[str, tuple[int, int]]:
        return {name: arr.shape for name, arr in self.arrays.items()}

    @property
    def size(self) -> int:
        return sum(arr.size for arr in self.arrays.values())

    def flatten(self) -> np.ndarray:
        """Every array concatenated into one vector."""
        return np.concatenate([arr.ravel() for arr in self.arrays.values()])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        """Inverse of `flatten`, reusing these shapes."""
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != self.size:
            raise DimensionError(f"Flat vector has {flat.size} entries, expected {self.size}")
        out, offset = {}, 0
        for name, arr in self.arrays.items():
            out[name] = flat[offset:offset + arr.size].reshape(arr.shape).copy()
            offset += arr.size
        return ModelParams(out)

    def leaves(self) -> dict[str, Node]:
        """Fresh trainable leaves, one per array."""
        return {name: leaf(arr, name=name) for name, arr in self.arrays.items()}

    def nodes_from_flat(self, flat: Node) -> dict[str, Node]:
        """Views of a 1 x size node, so one leaf can drive the whole model."""
        out, offset = {}, 0
        for name, arr in self.arrays.items():
            part = slice_cols(flat, offset, offset + arr.size)
            out[name] = reshape(part, *arr.shape)
            offset += arr.size
        return out


# --- forward pass -----------------------------------------------------------


@dataclass
class PassCounters:
    """How often each optional branch ran."""
    positional_encoding: int = 0
    temporal_gcn: int = 0
    spatial_gcn: int = 0


@dataclass(frozen=True)
class PreparedSample:
    """A sample on its union time grid, z-scored per ROI from observed points."""
    sample_id: str
    grid: np.ndarray
    inputs: tuple[EncoderInput, ...]
    targets: np.ndarray
    mask: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def num_rois(self) -> int:
        return len(self.inputs)

    @property
    def num_points(self) -> int:
        return int(self.mask.sum())


def prepare_sample(sample: SignalSample) -> PreparedSample:
    """Union time grid, observation mask and per-ROI z-scored values of one sample."""
    grid = np.unique(np.concatenate([s.times for s in sample.series]))
    if grid[0] < 0:
        raise TrainingError(f"{sample.sample_id}: timestamps must be >= 0")
    n = sample.num_rois
    values = np.zeros((n, len(grid)))
    mask = np.zeros((n, len(grid)))
    mean = np.zeros(n)
    std = np.ones(n)
    for i, s in enumerate(sample.series):
        if len(s) == 0:
            raise TrainingError(f"{sample.sample_id}: ROI {i} has no observed points")
        idx = np.searchsorted(grid, s.times)
        mean[i] = s.values.mean()
        spread = s.values.std()
        std[i] = spread if spread > 1e-8 else 1.0
        values[i, idx] = (s.values - mean[i]) / std[i]
        mask[i, idx] = 1.0
    inputs = tuple(EncoderInput.from_grid(grid, values[i], mask[i]) for i in range(n))
    return PreparedSample(sample.sample_id, grid, inputs, values, mask, mean, std)


@dataclass
class ForwardPass:
    h: Node
    u: Node
    posterior: PosteriorParams
    trajectory: Trajectory
    temporal_graph: TemporalGraph | None = None


def integration_grid(times) -> tuple[np.ndarray, int]:
    """Requested times with t=0 prepended when needed; returns (grid, offset)."""
    times = check_grid(times)
    if times[0] < 0:
        raise GridError(f"Requested times must be >= 0, got {times[0]}")
    if times[0] > 0:
        return np.concatenate([[0.0], times]), 1
    return times, 0


def forward(
    nodes: Mapping[str, Node],
    prepared: PreparedSample,
    config: TrainConfig,
    spatial: SpatialGraph | None,
    times,
    eps: np.ndarray | None = None,
    counters: PassCounters | None = None,
) -> ForwardPass:
    """One sample through the whole model; `eps=None` uses the posterior mean."""
    ablation = config.ablation
    encoder = EncoderParams(
        conv_weight=nodes["conv.weight"],
        conv_bias=nodes["conv.bias"],
        w_q=nodes["attn.w_q"],
        w_k=nodes["attn.w_k"],
        w_v=nodes["attn.w_v"],
    )
    use_pe = not ablation.no_positional_encoder
    rows = []
    for inp in prepared.inputs:
        rows.append(long_term_encode(short_term_encode(inp, encoder), encoder, use_pe))
        if counters is not None and use_pe:
            counters.positional_encoding += 1
    h = concat_rows(rows)

    temporal = None
    if ablation.no_temporal_graph:
        h_temporal = h
    else:
        temporal = build_temporal_graph(h)
        h_temporal = gcn_layer(h, temporal.weights, nodes["gcn.temporal"])
        if counters is not None:
            counters.temporal_gcn += 1
    if ablation.no_spatial_graph:
        h_spatial = h
    else:
        if spatial is None:
            raise TrainingError("The spatial branch needs an atlas-derived spatial graph")
        h_spatial = gcn_layer(h, spatial.adjacency, nodes["gcn.spatial"])
        if counters is not None:
            counters.spatial_gcn += 1

    u = fuse(
        h_temporal,
        h_spatial,
        GCNParams(nodes["gcn.temporal"], nodes["gcn.spatial"], nodes["fuse.weight"], nodes["fuse.bias"]),
    )
    posterior = infer_posterior(
        u,
        PosteriorHead(
            nodes["posterior.mean.weight"],
            nodes["posterior.mean.bias"],
            nodes["posterior.logvar.weight"],
            nodes["posterior.logvar.bias"],
        ),
    )
    z0 = posterior.mean if eps is None else reparameterize(posterior, eps)

    grid, offset = integration_grid(times)
    g = ODEFunction(nodes["ode.w1"], nodes["ode.b1"], nodes["ode.w2"], nodes["ode.b2"])
    states = rk4_solve(g, z0, grid, substeps_for(grid, config.substeps, config.step_size))
    states = states[offset:]
    values = decode_trajectory(states, nodes["decoder.weight"], nodes["decoder.bias"])
    trajectory = Trajectory(times=grid[offset:], states=states, values=values)
    return ForwardPass(h=h, u=u, posterior=posterior, trajectory=trajectory, temporal_graph=temporal)


def _total(terms: Sequence[Node]) -> Node:
    out = terms[0]
    for term in terms[1:]:
        out = add(out, term)
    return out


def loss(
    batch: Sequence[PreparedSample | SignalSample],
    params: "ModelParams | Mapping[str, Node]",
    eps_draws: Sequence[np.ndarray | None] | None,
    config: TrainConfig,
    spatial: SpatialGraph | None,
    counters: PassCounters | None = None,
) -> Node:
    """Masked MSE over all observed points + kl_weight * mean per-ROI KL."""
    if not batch:
        raise EmptyBatchError("Cannot compute a loss over an empty batch")
    nodes = params.leaves() if isinstance(params, ModelParams) else params
    if eps_draws is None:
        eps_draws = [None] * len(batch)
    squared, kls = [], []
    points = rois = 0
    for item, eps in zip(batch, eps_draws):
        prepared = item if isinstance(item, PreparedSample) else prepare_sample(item)
        fp = forward(nodes, prepared, config, spatial, prepared.grid, eps, counters)
        residual = sub(fp.trajectory.values, prepared.targets)
        squared.append(sum_all(mul(square(residual), prepared.mask)))
        kls.append(sum_all(kl_standard_normal(fp.posterior)))
        points += prepared.num_points
        rois += prepared.num_rois
    mse = scale(_total(squared), 1.0 / points)
    if config.kl_weight == 0:
        return mse
    return add(mse, scale(_total(kls), config.kl_weight / rois))


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new arrays, inputs are untouched."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DimensionError(
            f"Adam shapes differ: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, step)


# --- model, inference and checkpoints ---------------------------------------


class LatentODEModel:
    """Parameters plus the config and atlas they run with."""

    def __init__(self, params: ModelParams, config: TrainConfig, atlas: ROIAtlas):
        self.params = params
        self.config = config
        self.atlas = atlas
        self.spatial = spatial_graph_for(atlas, config.spatial_radius)
        self.counters = PassCounters()

    @property
    def num_rois(self) -> int:
        return len(self.atlas)

    def check_sample(self, sample: SignalSample):
        """Raise CompatibilityError when the ROI count differs from the model's."""
        if sample.num_rois != self.num_rois:
            raise CompatibilityError(
                f"{sample.sample_id} has {sample.num_rois} ROIs, model was built for {self.num_rois}"
            )

    def reconstruct(self, sample: SignalSample, grid, step_size: float | None = None) -> np.ndarray:
        return reconstruct(sample, self, grid, step_size)

    def save(self, path: Path | str, provenance: dict | None = None):
        save_checkpoint(path, self, provenance)

    @classmethod
    def load(cls, path: Path | str) -> "LatentODEModel":
        return load_checkpoint(path)


def reconstruct(
    sample: SignalSample,
    model: LatentODEModel,
    grid,
    step_size: float | None = None,
) -> np.ndarray:
    """Deterministic reconstruction (posterior mean) at `grid`, in signal units.

    Args:
        sample: Observed signals to encode
        model: Trained model
        grid: Strictly increasing times >= 0
        step_size: Internal RK4 step; defaults to the config's substep rule

    Returns:
        N x len(grid) values
    """
    model.check_sample(sample)
    prepared = prepare_sample(sample)
    config = model.config
    if step_size is not None:
        config = TrainConfig(**{**_shallow(config), "step_size": step_size})
    fp = forward(model.params.leaves(), prepared, config, model.spatial, grid, None, model.counters)
    return fp.trajectory.values.value * prepared.std[:, None] + prepared.mean[:, None]


def _shallow(config: TrainConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in fields(config)}


def evaluation_points(sample: SignalSample, include_observed: bool = True):
    """Times to query and the truth at them, per ROI: observed points and/or targets."""
    per_roi = []
    for roi in range(sample.num_rois):
        parts_t, parts_v = [], []
        if include_observed:
            parts_t.append(sample.series[roi].times)
            parts_v.append(sample.series[roi].values)
        if sample.targets is not None:
            parts_t.append(sample.targets[roi].times)
            parts_v.append(sample.targets[roi].values)
        times = np.concatenate(parts_t) if parts_t else np.empty(0)
        values = np.concatenate(parts_v) if parts_v else np.empty(0)
        per_roi.append((times, values))
    return per_roi


def predict_points(model: LatentODEModel, sample: SignalSample, per_roi) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct once on the union grid and pick each ROI's points."""
    all_times = [t for t, _ in per_roi if len(t)]
    if not all_times:
        return np.empty(0), np.empty(0)
    grid = np.unique(np.concatenate(all_times))
    recon = model.reconstruct(sample, grid)
    preds, truth = [], []
    for roi, (times, values) in enumerate(per_roi):
        if len(times):
            preds.append(recon[roi, np.searchsorted(grid, times)])
            truth.append(values)
    return np.concatenate(preds), np.concatenate(truth)


def validation_rmse(model: LatentODEModel, samples: Sequence[SignalSample]) -> float:
    """RMSE over the observed points and held-out targets of `samples`."""
    preds, truth = [], []
    for sample in samples:
        p, t = predict_points(model, sample, evaluation_points(sample))
        preds.append(p)
        truth.append(t)
    p, t = np.concatenate(preds), np.concatenate(truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def save_checkpoint(path: Path | str, model: LatentODEModel, provenance: dict | None = None):
    """Write parameters, config, atlas and seed as JSON."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": model.config.seed,
        "config": model.config.to_dict(),
        "atlas": model.atlas.to_list(),
        "spatial_radius": model.spatial.radius,
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in model.params.arrays.items()
        },
    }
    if provenance:
        payload["provenance"] = provenance
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: Path | str) -> LatentODEModel:
    """Read a checkpoint written by `save_checkpoint`."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"Unsupported checkpoint version {payload.get('version')}")
    config = TrainConfig.from_dict(payload["config"])
    if payload.get("spatial_radius") is not None and config.spatial_radius is None:
        config.spatial_radius = float(payload["spatial_radius"])
    arrays = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    params = ModelParams.from_arrays(arrays, config.dims, config.kernel_size)
    return LatentODEModel(params, config, ROIAtlas.from_list(payload["atlas"]))


# --- training loop ----------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float | None


@dataclass
class TrainResult:
    model: LatentODEModel
    trace: list[EpochRecord]
    best_epoch: int

    @property
    def params(self) -> ModelParams:
        return self.model.params


def train(
    train_samples: Sequence[SignalSample],
    validation_samples: Sequence[SignalSample],
    config: TrainConfig,
    atlas: ROIAtlas,
    progress_callback: Callable | None = None,
) -> TrainResult:
    """Train for `config.epochs` passes and keep the best-validated parameters.

    Without validation samples the epoch with the lowest training loss wins.
    Identical inputs and seed give bit-identical traces.
    """
    if not train_samples:
        raise EmptyBatchError("No training samples")
    rng = np.random.default_rng(config.seed)
    params = ModelParams.init(config.dims, config.kernel_size, rng)
    initial = LatentODEModel(params, config, atlas)
    for sample in list(train_samples) + list(validation_samples):
        initial.check_sample(sample)
    spatial = initial.spatial
    prepared = [prepare_sample(s) for s in train_samples]

    flat = params.flatten()
    state = AdamState.zeros(flat.size)
    trace: list[EpochRecord] = []
    best_score, best_flat, best_epoch = np.inf, flat.copy(), 1

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(prepared))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [prepared[i] for i in order[start:start + config.batch_size]]
            eps = [rng.standard_normal((p.num_rois, config.dims.d_z)) for p in batch]
            nodes = params.unflatten(flat).leaves()
            try:
                value = loss(batch, nodes, eps, config, spatial)
            except DIVERGENCE_ERRORS as e:
                raise TrainingDivergedError(epoch, reason=str(e)) from e
            if not np.isfinite(value.item()):
                raise TrainingDivergedError(epoch, value.item())
            grads = backward(value, wrt=list(nodes.values()))
            flat, state = adam_step(
                flat, np.concatenate([g.ravel() for g in grads]), state, config.learning_rate
            )
            batch_losses.append(value.item())

        train_loss = float(np.mean(batch_losses))
        val_rmse = None
        if validation_samples:
            candidate = LatentODEModel(params.unflatten(flat), config, atlas)
            try:
                val_rmse = validation_rmse(candidate, validation_samples)
            except DIVERGENCE_ERRORS as e:
                raise TrainingDivergedError(epoch, reason=str(e)) from e
            if not np.isfinite(val_rmse):
                raise TrainingDivergedError(epoch, train_loss, "validation RMSE is not finite")
        trace.append(EpochRecord(epoch, train_loss, val_rmse))
        if progress_callback:
            detail = f", val RMSE {val_rmse:.4f}" if val_rmse is not None else ""
            progress_callback(f"Epoch {epoch}/{config.epochs}: loss {train_loss:.5f}{detail}")

        score = val_rmse if val_rmse is not None else train_loss
        if score < best_score:
            best_score, best_flat, best_epoch = score, flat.copy(), epoch

    model = LatentODEModel(params.unflatten(best_flat), config, atlas)
    return TrainResult(model=model, trace=trace, best_epoch=best_epoch)


def write_loss_trace(path: Path | str, trace: Sequence[EpochRecord], provenance: str | None = None):
    """One row per epoch; val_rmse is empty without a validation set."""
    lines = [provenance.rstrip("\n")] if provenance else []
    lines.append("epoch,train_loss,val_rmse")
    for record in trace:
        val = "" if record.val_rmse is None else repr(record.val_rmse)
        lines.append(f"{record.epoch},{record.train_loss!r},{val}")
    Path(path).write_text("\n".join(lines) + "\n")
