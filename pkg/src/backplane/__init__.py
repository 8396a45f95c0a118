"""Exact input-space linearization of bias-free ReLU convnets.

Reconstructs the effective hypersurface behind any unit or logit via adjoint
products, verifies the readouts against the live network, and probes how the
surfaces move under adversarial perturbations.
"""

from .adjoint import ActivationTrace, Cotangent, EvaluationPoint, LinearizationError, jvp, replay_outputs, trace, vjp, vjp_from_boundary
from .archive import (
    ArchiveError,
    SurfaceArchiveHeader,
    SurfaceArchiveReader,
    SurfaceArchiveWriter,
    read_perturbations,
    write_perturbations,
)
from .data import DataError, DatasetConfig, augment, load_cifar10, normalize_images
from .network import (
    ARCHITECTURES,
    ModelChecksumError,
    ModelFormatError,
    ModelMagicError,
    ModelTruncatedError,
    ModelVersionError,
    NetworkGraph,
    backprop,
    build_fixup_resnet20,
    build_tiny,
    build_vgg7,
    forward,
    init_weights,
    load_model,
    save_model,
)
from .reconstruct import (
    Hypersurface,
    ReconstructionError,
    ReconstructionRequest,
    batch_reconstruct,
    enumerate_indices,
    rm0,
    rm1,
    rm2,
    rm3,
    rm4,
    surface_inventory,
)
from .tensor import ShapeMismatchError, conv2d, inner_product
from .trainer import TrainConfig, TrainingDivergedError, TrainResult, train
from .verify import VerificationReport, compare_hyperplanes, relative_errors, verify_layers

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES",
    "ActivationTrace",
    "ArchiveError",
    "Cotangent",
    "DataError",
    "DatasetConfig",
    "EvaluationPoint",
    "Hypersurface",
    "LinearizationError",
    "ModelChecksumError",
    "ModelFormatError",
    "ModelMagicError",
    "ModelTruncatedError",
    "ModelVersionError",
    "NetworkGraph",
    "ReconstructionError",
    "ReconstructionRequest",
    "ShapeMismatchError",
    "SurfaceArchiveHeader",
    "SurfaceArchiveReader",
    "SurfaceArchiveWriter",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "VerificationReport",
    "augment",
    "backprop",
    "batch_reconstruct",
    "build_fixup_resnet20",
    "build_tiny",
    "build_vgg7",
    "compare_hyperplanes",
    "conv2d",
    "enumerate_indices",
    "forward",
    "init_weights",
    "inner_product",
    "jvp",
    "load_cifar10",
    "load_model",
    "normalize_images",
    "read_perturbations",
    "relative_errors",
    "replay_outputs",
    "rm0",
    "rm1",
    "rm2",
    "rm3",
    "rm4",
    "save_model",
    "surface_inventory",
    "trace",
    "train",
    "verify_layers",
    "vjp",
    "vjp_from_boundary",
    "write_perturbations",
]
