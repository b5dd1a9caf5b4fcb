"""Variational initial states, fixed-step RK4 integration, and decoding.

Gradients are taken through the unrolled solver steps (discretize, then
optimize), so they are exact for the discrete trajectory.
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .diffmath import (
    Node,
    add,
    concat_cols,
    exp,
    lift,
    matmul,
    mul,
    scale,
    square,
    sub,
    sum_rows,
    tanh,
)

DEFAULT_SUBSTEPS = 4


class SolverError(Exception):
    """Base error for ODE integration."""
    pass


class GridError(SolverError):
    """Raised when a time grid is empty or not strictly increasing."""
    pass


class DivergenceError(SolverError):
    """Raised when the state stops being finite during integration."""

    def __init__(self, time: float):
        super().__init__(f"Latent state became non-finite at t={time:.6g}")
        self.time = time


@dataclass
class PosteriorHead:
    """Affine heads u -> mean and u -> log-variance."""
    mean_weight: Node
    mean_bias: Node
    logvar_weight: Node
    logvar_bias: Node


@dataclass
class PosteriorParams:
    """Per-ROI Gaussian over z0: mean and log-variance, both N x d_z."""
    mean: Node
    logvar: Node

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar.value)


@dataclass
class ODEFunction:
    """dz/dt = tanh(z W1 + b1) W2 + b2, shared by all ROIs."""
    w1: Node
    b1: Node
    w2: Node
    b2: Node

    def __call__(self, z: Node) -> Node:
        hidden = tanh(add(matmul(z, self.w1), self.b1))
        return add(matmul(hidden, self.w2), self.b2)


@dataclass
class Trajectory:
    """Latent path and decoded values on a time grid."""
    times: np.ndarray
    states: list[Node]
    values: Node | None = None

    @property
    def latents(self) -> np.ndarray:
        """N x len(times) x d_z."""
        return np.stack([s.value for s in self.states], axis=1)


def infer_posterior(u: Node, head: PosteriorHead) -> PosteriorParams:
    """Linear mean and log-variance heads over the fused embeddings."""
    return PosteriorParams(
        mean=add(matmul(u, head.mean_weight), head.mean_bias),
        logvar=add(matmul(u, head.logvar_weight), head.logvar_bias),
    )


def reparameterize(posterior: PosteriorParams, eps: np.ndarray) -> Node:
    """z0 = mean + exp(logvar / 2) * eps; eps is treated as a constant."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != posterior.mean.shape:
        raise SolverError(f"Noise shape {eps.shape} does not match mean {posterior.mean.shape}")
    return add(posterior.mean, mul(exp(scale(posterior.logvar, 0.5)), eps))


def kl_standard_normal(posterior: PosteriorParams) -> Node:
    """KL(N(mean, sigma) || N(0, 1)) per ROI, summed over latent dims (N x 1)."""
    terms = sub(add(exp(posterior.logvar), square(posterior.mean)), add(posterior.logvar, 1.0))
    return scale(sum_rows(terms), 0.5)


def check_grid(grid) -> np.ndarray:
    """Flatten a time grid and require it non-empty, finite and strictly increasing."""
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise GridError("Time grid is empty")
    if not np.isfinite(grid).all():
        raise GridError("Time grid contains non-finite values")
    if np.any(np.diff(grid) <= 0):
        raise GridError("Time grid must be strictly increasing")
    return grid


def rk4_step(g: Callable[[Node], Node], z: Node, h: float) -> Node:
    """One classical Runge-Kutta step of size h."""
    k1 = g(z)
    k2 = g(add(z, scale(k1, h / 2)))
    k3 = g(add(z, scale(k2, h / 2)))
    k4 = g(add(z, scale(k3, h)))
    slope = add(add(k1, scale(add(k2, k3), 2.0)), k4)
    return add(z, scale(slope, h / 6))


def rk4_solve(
    g: Callable[[Node], Node],
    z0: Node,
    grid,
    substeps: int | Sequence[int] = DEFAULT_SUBSTEPS,
) -> list[Node]:
    """Integrate with classic RK4 and return the state at every grid point.

    Args:
        g: Vector field, state node -> derivative node of the same shape
        z0: State at grid[0] (returned unchanged as the first entry)
        grid: Strictly increasing times
        substeps: Uniform internal steps per interval; one count for all
            intervals or one per interval

    Returns:
        States aligned with `grid`
    """
    grid = check_grid(grid)
    intervals = len(grid) - 1
    if isinstance(substeps, int | np.integer):
        counts = [int(substeps)] * intervals
    else:
        counts = [int(n) for n in substeps]
        if len(counts) != intervals:
            raise GridError(f"Got {len(counts)} substep counts for {intervals} intervals")
    if any(n < 1 for n in counts):
        raise GridError("Substeps must be >= 1")

    z = lift(z0)
    states = [z]
    for i, n in enumerate(counts):
        t0, t1 = grid[i], grid[i + 1]
        h = (t1 - t0) / n
        for step in range(n):
            z = rk4_step(g, z, h)
            if not np.isfinite(z.value).all():
                raise DivergenceError(t0 + (step + 1) * h)
        states.append(z)
    return states


def substeps_for(grid: np.ndarray, substeps: int, step_size: float | None = None) -> list[int]:
    """Per-interval step counts: fixed, or sized so each internal step is ~step_size."""
    intervals = np.diff(grid)
    if step_size is None:
        return [substeps] * len(intervals)
    return [max(1, int(round(dt / step_size))) for dt in intervals]


def decode(z: Node, weight: Node, bias: Node) -> Node:
    """Observation mean per ROI (N x 1); unit-variance Gaussian likelihood."""
    return add(matmul(z, weight), bias)


def decode_trajectory(states: Sequence[Node], weight: Node, bias: Node) -> Node:
    """N x len(states) decoded values."""
    return concat_cols([decode(z, weight, bias) for z in states])
