"""Temporal and spatial relation graphs over ROIs, one GCN layer each, and fusion.

The temporal graph is rebuilt on every forward pass from the latent initial
values, so gradients flow through the cosine weights. The spatial graph is a
fixed binary adjacency from atlas coordinates.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffmath import (
    Node,
    add,
    concat_cols,
    div,
    lift,
    matmul,
    mul,
    power,
    relu,
    square,
    sum_rows,
    transpose,
)

DEFAULT_RADIUS_PERCENTILE = 20.0


class GraphError(Exception):
    """Base error for relation graphs."""
    pass


class DegenerateEmbeddingError(GraphError):
    """Raised when a latent value has zero norm, so its cosine is undefined."""

    def __init__(self, roi: int):
        super().__init__(f"Latent initial value of ROI {roi} has zero norm")
        self.roi = roi


class GraphConfigError(GraphError):
    """Raised for invalid graph settings (threshold, atlas)."""
    pass


class AdjacencyContractError(GraphError):
    """Raised when an adjacency matrix has negative entries."""
    pass


class FusionShapeError(GraphError):
    """Raised when the two branch outputs cannot be fused."""
    pass


@dataclass(frozen=True)
class ROI:
    label: str
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class ROIAtlas:
    """Labelled 3-D ROI coordinates."""
    rois: tuple[ROI, ...]

    def __post_init__(self):
        if len(self.rois) < 2:
            raise GraphConfigError(f"An atlas needs at least 2 ROIs, got {len(self.rois)}")
        if not np.isfinite(self.coordinates).all():
            raise GraphConfigError("Atlas coordinates must be finite")

    def __len__(self) -> int:
        return len(self.rois)

    @property
    def coordinates(self) -> np.ndarray:
        """(N, 3) array of ROI positions."""
        return np.array([[r.x, r.y, r.z] for r in self.rois], dtype=np.float64)

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.rois]

    @classmethod
    def random(cls, num_rois: int, seed: int, extent: float = 100.0) -> "ROIAtlas":
        """Uniform coordinates in an `extent`-sized cube."""
        rng = np.random.default_rng([seed, 0xA71A5])
        coords = rng.uniform(0.0, extent, size=(num_rois, 3))
        return cls(tuple(ROI(f"roi{i:03d}", *map(float, c)) for i, c in enumerate(coords)))

    def to_list(self) -> list[dict]:
        """JSON-ready list of {label, x, y, z} entries."""
        return [{"label": r.label, "x": r.x, "y": r.y, "z": r.z} for r in self.rois]

    @classmethod
    def from_list(cls, entries: list[dict]) -> "ROIAtlas":
        """Build an atlas from `to_list` output."""
        try:
            rois = tuple(
                ROI(str(e["label"]), float(e["x"]), float(e["y"]), float(e["z"])) for e in entries
            )
        except (KeyError, TypeError, ValueError) as e:
            raise GraphConfigError(f"Malformed atlas entry: {e}") from e
        return cls(rois)

    def save(self, path: Path | str):
        """Write the atlas as JSON."""
        Path(path).write_text(json.dumps(self.to_list(), indent=2))

    @classmethod
    def load(cls, path: Path | str) -> "ROIAtlas":
        return cls.from_list(json.loads(Path(path).read_text()))


def pairwise_distances(coords: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix of (N, 3) coordinates."""
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def default_radius(atlas: ROIAtlas, percentile: float = DEFAULT_RADIUS_PERCENTILE) -> float:
    """Percentile of the off-diagonal pairwise distances."""
    dist = pairwise_distances(atlas.coordinates)
    upper = dist[np.triu_indices(len(atlas), k=1)]
    return float(np.percentile(upper, percentile))


@dataclass
class TemporalGraph:
    """Clamped cosine similarities between latent initial values (differentiable)."""
    weights: Node

    @property
    def matrix(self) -> np.ndarray:
        return self.weights.value


@dataclass(frozen=True)
class SpatialGraph:
    """Binary distance-threshold adjacency with zero diagonal."""
    adjacency: np.ndarray
    radius: float


@dataclass
class GCNParams:
    temporal_weight: Node
    spatial_weight: Node
    fuse_weight: Node
    fuse_bias: Node


def build_temporal_graph(h: Node) -> TemporalGraph:
    """A_ij = max(0, cos(h_i, h_j)) over the rows of h (N x d)."""
    h = lift(h)
    norms = np.linalg.norm(h.value, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateEmbeddingError(int(zero[0]))
    unit = div(h, power(sum_rows(square(h)), 0.5))
    return TemporalGraph(relu(matmul(unit, transpose(unit))))


def build_spatial_graph(atlas: ROIAtlas, radius: float) -> SpatialGraph:
    """Connect ROIs whose Euclidean distance is <= radius."""
    if not radius > 0:
        raise GraphConfigError(f"Spatial threshold must be positive, got {radius}")
    dist = pairwise_distances(atlas.coordinates)
    adjacency = (dist <= radius).astype(np.float64)
    np.fill_diagonal(adjacency, 0.0)
    return SpatialGraph(adjacency=adjacency, radius=float(radius))


def normalized_adjacency(adjacency) -> Node:
    """D^-1/2 Â D^-1/2 where Â is A with exactly one self-loop per node.

    The temporal graph already carries cos(h_i, h_i) = 1 on its diagonal, so
    the diagonal is replaced rather than incremented.
    """
    adjacency = lift(adjacency)
    if np.any(adjacency.value < 0):
        raise AdjacencyContractError("Adjacency has negative entries")
    eye = np.eye(adjacency.rows)
    a_hat = add(mul(adjacency, 1.0 - eye), eye)
    inv_sqrt_deg = power(sum_rows(a_hat), -0.5)
    return mul(mul(a_hat, inv_sqrt_deg), transpose(inv_sqrt_deg))


def gcn_layer(features: Node, adjacency, weight: Node) -> Node:
    """ReLU(D^-1/2 (A + I) D^-1/2 H W)."""
    return relu(matmul(normalized_adjacency(adjacency), matmul(features, weight)))


def fuse(h_temporal: Node, h_spatial: Node, params: GCNParams) -> Node:
    """u = [h_temporal, h_spatial] W_fuse + b."""
    h_temporal, h_spatial = lift(h_temporal), lift(h_spatial)
    if h_temporal.shape != h_spatial.shape:
        raise FusionShapeError(
            f"Branch outputs differ in shape: {h_temporal.shape} vs {h_spatial.shape}"
        )
    weight = lift(params.fuse_weight)
    if weight.rows != 2 * h_temporal.cols:
        raise FusionShapeError(
            f"Fusion weight expects {weight.rows // 2} features per branch, "
            f"got {h_temporal.cols}"
        )
    return add(matmul(concat_cols([h_temporal, h_spatial]), weight), params.fuse_bias)


def spatial_graph_for(atlas: ROIAtlas, radius: float | None = None) -> SpatialGraph:
    """Spatial graph at `radius`, or at the 20th-percentile default when None."""
    return build_spatial_graph(atlas, radius if radius is not None else default_radius(atlas))
