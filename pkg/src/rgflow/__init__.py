"""Hierarchical, locality-constrained normalizing flow over image lattices."""

from rgflow.lattice import (
    BlockAddress,
    CausalCone,
    LatentIndex,
    LatticeSpec,
    Region,
    generation_cone,
    inference_cone,
    latent_counts,
)

__all__ = [
    "BlockAddress",
    "CausalCone",
    "LatentIndex",
    "LatticeSpec",
    "Region",
    "generation_cone",
    "inference_cone",
    "latent_counts",
]

__version__ = "0.1.0"
