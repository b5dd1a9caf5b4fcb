"""Differentiable model core: autodiff, encoders, relation graphs, latent ODE."""

from .diffmath import Node, backward, grad_check, leaf
from .encoder import EncoderInput, EncoderParams, encode_roi
from .latentode import ODEFunction, PosteriorParams, rk4_solve
from .relgraphs import ROIAtlas, build_spatial_graph, build_temporal_graph

__all__ = [
    "Node",
    "backward",
    "grad_check",
    "leaf",
    "EncoderInput",
    "EncoderParams",
    "encode_roi",
    "ODEFunction",
    "PosteriorParams",
    "rk4_solve",
    "ROIAtlas",
    "build_spatial_graph",
    "build_temporal_graph",
]
