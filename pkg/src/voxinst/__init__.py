"""Voxel-grid 3D instance segmentation via multi-task metric learning.

A desk-scale, numpy-only pipeline: a dual-head 3D convolutional network
(per-voxel embeddings + center directions) trained with a discriminative
clustering loss, mean-shift proposal generation with multi-score ranking
and NMS, ScanNet-style AP evaluation, and a deterministic synthetic cuboid
benchmark. See the CLI (`voxinst --help`) for the end-to-end pipeline.
"""

from .errors import (
    BadMagic,
    ConfigError,
    CorruptTensorTable,
    DegenerateBatch,
    EmptyInput,
    IndexOutOfBounds,
    InvalidGeometry,
    NumericalDivergence,
    PlacementError,
    ShapeError,
    VersionMismatch,
    VoxInstError,
)
from .evaluation import EvalReport, ap_summary, average_precision, mask_iou
from .grid import (
    InstanceLabeling,
    InstanceRecord,
    PointCloud,
    SceneSample,
    VoxelGrid,
    augment,
    connected_components,
    devoxelize,
    voxelize,
)
from .losses import LossParams, l_joint
from .meanshift import MeanShiftParams, mean_shift
from .model import FieldPair, LayerSpec, Model, ModelConfig, build, load, receptive_field, save
from .proposals import InstanceProposal, ScoreWeights, nms, segment
from .synthgen import SynthConfig, encode_input, generate_dataset, generate_scene
from .train import TrainConfig, TrainResult, evaluate_epoch, train

__version__ = "0.1.0"

__all__ = [
    "BadMagic",
    "ConfigError",
    "CorruptTensorTable",
    "DegenerateBatch",
    "EmptyInput",
    "EvalReport",
    "FieldPair",
    "IndexOutOfBounds",
    "InstanceLabeling",
    "InstanceProposal",
    "InstanceRecord",
    "InvalidGeometry",
    "LayerSpec",
    "LossParams",
    "MeanShiftParams",
    "Model",
    "ModelConfig",
    "NumericalDivergence",
    "PlacementError",
    "PointCloud",
    "SceneSample",
    "ScoreWeights",
    "ShapeError",
    "SynthConfig",
    "TrainConfig",
    "TrainResult",
    "VersionMismatch",
    "VoxInstError",
    "VoxelGrid",
    "ap_summary",
    "augment",
    "average_precision",
    "build",
    "connected_components",
    "devoxelize",
    "encode_input",
    "evaluate_epoch",
    "generate_dataset",
    "generate_scene",
    "l_joint",
    "load",
    "mask_iou",
    "mean_shift",
    "nms",
    "receptive_field",
    "save",
    "segment",
    "train",
    "voxelize",
]
