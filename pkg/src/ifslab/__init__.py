"""Stochastic IFS toolkit: fractal iteration, entropic OT, collage training."""

from .geometry import DatasetSpec, PointCloud, generate, hausdorff_distance, pairwise_sq_dists
from .ifs_core import (
    AffineBranch,
    CallableBranch,
    CollageBound,
    ConstantSelector,
    DiracSelector,
    GatingSelector,
    StochasticIFS,
    barycentric_map,
    certify_average_contraction,
    collage_bound,
    hutchinson_step,
    lyapunov_exponent_mc,
    markov_step,
    sample_attractor,
    transfer_step,
)
from .ot import SinkhornConfig, TransportResult, exact_w2, gradient_wrt_points, sinkhorn_divergence

__all__ = [
    "AffineBranch",
    "CallableBranch",
    "CollageBound",
    "ConstantSelector",
    "DatasetSpec",
    "DiracSelector",
    "GatingSelector",
    "PointCloud",
    "SinkhornConfig",
    "StochasticIFS",
    "TransportResult",
    "barycentric_map",
    "certify_average_contraction",
    "collage_bound",
    "exact_w2",
    "generate",
    "gradient_wrt_points",
    "hausdorff_distance",
    "hutchinson_step",
    "lyapunov_exponent_mc",
    "markov_step",
    "pairwise_sq_dists",
    "sample_attractor",
    "sinkhorn_divergence",
    "transfer_step",
]
