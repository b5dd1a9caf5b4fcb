"""Per-ROI encoders: short-term convolution, then long-term self-attention.

Each ROI's irregular series enters as three aligned channels (observed
value, observation mask, normalized time) and leaves as one latent initial
value h_i.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .diffmath import (
    Node,
    add,
    constant,
    lift,
    matmul,
    mean_cols,
    relu,
    scale,
    softmax_rows,
    transpose,
    unfold_same,
)

NUM_CHANNELS = 3
DEFAULT_KERNEL_SIZE = 4


class EncoderError(Exception):
    """Base error for the encoders."""
    pass


class InputTooShortError(EncoderError):
    """Raised when a series is shorter than the convolution kernel."""
    pass


class EncoderConfigError(EncoderError):
    """Raised for invalid encoder settings (e.g. odd model width)."""
    pass


class EncoderShapeError(EncoderError):
    """Raised when features and projection weights disagree in shape."""
    pass


@dataclass(frozen=True)
class EncoderInput:
    """One ROI on a shared time grid: value (0 where missing), mask, time in [0, 1]."""
    values: np.ndarray
    mask: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        lengths = {len(self.values), len(self.mask), len(self.times)}
        if len(lengths) != 1:
            raise EncoderShapeError(
                f"Channels differ in length: values={len(self.values)}, "
                f"mask={len(self.mask)}, times={len(self.times)}"
            )
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise EncoderShapeError("Observation mask must be binary")
        observed = self.times[np.asarray(self.mask) == 1.0]
        if np.any(np.diff(observed) <= 0):
            raise EncoderShapeError("Observed timestamps must be strictly increasing")

    @property
    def length(self) -> int:
        return len(self.values)

    @property
    def channels(self) -> np.ndarray:
        return np.vstack([self.values, self.mask, self.times]).astype(np.float64)

    @classmethod
    def from_grid(cls, grid: np.ndarray, values: np.ndarray, mask: np.ndarray) -> "EncoderInput":
        """Build channels on `grid`, normalizing time to [0, 1]."""
        grid = np.asarray(grid, dtype=np.float64)
        span = grid[-1] - grid[0]
        times = (grid - grid[0]) / span if span > 0 else np.zeros_like(grid)
        mask = np.asarray(mask, dtype=np.float64)
        values = np.where(mask == 1.0, np.asarray(values, dtype=np.float64), 0.0)
        return cls(values=values, mask=mask, times=times)


@dataclass
class EncoderParams:
    """Conv filters (C*k x F, bias 1 x F) and single-head projections (F x d_k)."""
    conv_weight: Node
    conv_bias: Node
    w_q: Node
    w_k: Node
    w_v: Node

    @property
    def kernel_size(self) -> int:
        return lift(self.conv_weight).rows // NUM_CHANNELS

    @property
    def num_filters(self) -> int:
        return lift(self.conv_weight).cols


def short_term_encode(inp: EncoderInput, params: EncoderParams) -> Node:
    """Conv feature map f_i (T x F): per filter, cross-correlate, add bias, ReLU."""
    k = params.kernel_size
    if inp.length < k:
        raise InputTooShortError(
            f"Series has {inp.length} steps but the kernel needs at least {k}"
        )
    patches = unfold_same(constant(inp.channels), k)
    return relu(add(matmul(patches, params.conv_weight), params.conv_bias))


@lru_cache(maxsize=64)
def _positional_table(length: int, d_model: int) -> np.ndarray:
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((length, d_model))
    table[:, 0::2] = np.sin(positions / rates)
    table[:, 1::2] = np.cos(positions / rates)
    table.flags.writeable = False
    return table


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding over integer positions 0..length-1."""
    if d_model <= 0 or d_model % 2:
        raise EncoderConfigError(f"Positional encoding width must be even, got {d_model}")
    return _positional_table(length, d_model)


def self_attention(features: Node, params: EncoderParams) -> tuple[Node, Node]:
    """Single-head scaled dot-product attention.

    Returns:
        (attention output T x d_k, attention weights T x T)
    """
    features = lift(features)
    w_q = lift(params.w_q)
    if features.cols != w_q.rows:
        raise EncoderShapeError(
            f"Features have width {features.cols} but W_Q expects {w_q.rows}"
        )
    q = matmul(features, w_q)
    k = matmul(features, params.w_k)
    v = matmul(features, params.w_v)
    d_k = q.cols
    weights = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / np.sqrt(d_k)))
    return matmul(weights, v), weights


def long_term_encode(features: Node, params: EncoderParams, use_positional: bool = True) -> Node:
    """Attend over time and mean-pool the rows into h_i (1 x d_k)."""
    features = lift(features)
    if use_positional:
        features = add(features, positional_encoding(features.rows, features.cols))
    attended, _ = self_attention(features, params)
    return mean_cols(attended)


def encode_roi(inp: EncoderInput, params: EncoderParams, use_positional: bool = True) -> Node:
    """Embedding of one ROI: conv features, then attention and mean pooling."""
    return long_term_encode(short_term_encode(inp, params), params, use_positional)
