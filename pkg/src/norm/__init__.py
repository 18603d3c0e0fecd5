"""Neural operators on Riemannian manifolds.

Mesh handling and Laplace-Beltrami assembly, spectral bases (Laplacian
eigenfunctions, POD, Fourier), a spectral neural-operator model with
hand-derived reverse-mode gradients, training utilities, synthetic PDE
dataset generators, and a command-line interface.

Attributes are resolved lazily so that importing :mod:`norm` stays cheap
and the CLI can cap BLAS thread pools before numpy is first loaded.
"""

from __future__ import annotations

__version__ = "0.1.0"

_EXPORTS = {
    "errors": [
        "NormError", "ParseError", "DegenerateCell", "IndexOutOfRange",
        "UnsupportedCellKind", "DimensionMismatch", "ConvergenceFailure",
        "RankDeficient", "TooFewSnapshots", "InvalidModeCount",
        "ZeroEigenvalue", "InvalidSpec", "DomainMismatch", "ZeroTarget",
        "EmptyBatch", "ShapeMismatch", "NonFiniteLoss",
        "ZeroVarianceWarning", "NonPositiveCoefficient", "SingularSystem",
        "BoundaryNotFound",
    ],
    "mesh": [
        "Mesh", "load_mesh", "save_mesh", "grid_mesh", "notch_mesh",
        "refine", "prolongate", "cotangent_stiffness", "lumped_mass",
        "dirichlet_energy", "boundary_edges", "boundary_nodes",
        "boundary_loops",
    ],
    "spectral": [
        "Field", "SpectralBasis", "BoundCheck", "pseudo_inverse",
        "lbo_basis", "pod_basis", "fourier_basis",
        "projection_bound_check", "save_basis", "load_basis",
    ],
    "operator": [
        "ModelSpec", "NormModel", "PointwiseMap", "LLayerParams",
        "build_model", "forward", "backward", "spectral_block",
        "l_layer_forward", "save_checkpoint", "load_checkpoint",
    ],
    "training": [
        "TrainConfig", "Metrics", "Normalizer", "AdamState", "adam_step",
        "fit_normalizer", "rel_l2", "rel_l2_batch", "mme_batch", "train",
        "predict", "evaluate", "gradcheck",
    ],
    "datagen": [
        "GrfSpec", "BoundaryCondition", "Dataset", "grf_sample",
        "threshold_coefficient", "darcy_solve",
        "notch_boundary_conditions", "make_darcy_dataset",
        "heat_semigroup_target", "make_heat_dataset", "save_dataset",
        "load_dataset",
    ],
    "vtk": ["export_vtk"],
    "verify": ["CheckResult", "SUITES", "run_suite"],
}

_ATTR_TO_MODULE = {
    name: module for module, names in _EXPORTS.items() for name in names
}

__all__ = sorted(_ATTR_TO_MODULE) + ["__version__"]


def __getattr__(name: str):
    module_name = _ATTR_TO_MODULE.get(name)
    if module_name is None:
        raise AttributeError(f"module 'norm' has no attribute {name!r}")
    import importlib

    module = importlib.import_module(f".{module_name}", __name__)
    value = getattr(module, name)
    globals()[name] = value
    return value


def __dir__():
    return __all__
