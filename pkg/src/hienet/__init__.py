"""Hybrid invariant-equivariant interatomic potential engine."""

__version__ = "0.1.0"

from .crystal import (
    CrystalGraph,
    CrystalStructure,
    StrainTensor,
    apply_strain,
    build_graph,
    make_supercell,
    transform,
)
from .potential import (
    HIENetPotential,
    ModelConfig,
    PredictionSet,
    init_params,
    n_parameters,
)
from .training import (
    LJPotential,
    LabeledSample,
    LossConfig,
    OptimizerConfig,
    generate_dataset,
    lj_oracle,
    train,
)

__all__ = [
    "CrystalGraph",
    "CrystalStructure",
    "HIENetPotential",
    "LJPotential",
    "LabeledSample",
    "LossConfig",
    "ModelConfig",
    "OptimizerConfig",
    "PredictionSet",
    "StrainTensor",
    "apply_strain",
    "build_graph",
    "generate_dataset",
    "init_params",
    "lj_oracle",
    "make_supercell",
    "n_parameters",
    "train",
    "transform",
]
