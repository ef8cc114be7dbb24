"""Continual model merging with null-space gated low-rank experts."""

from mingle.engine import MergedModel, build_expert, merged_forward
from mingle.estimators import (
    MagMaxMerger,
    MingleMerger,
    OPCMMerger,
    PrototypeClassifier,
    SWAMerger,
    TaskArithmeticMerger,
    TiesMerger,
)
from mingle.model import ModelParams, PrototypeHead, init_model

__version__ = "0.1.0"

__all__ = [
    "MagMaxMerger",
    "MergedModel",
    "MingleMerger",
    "ModelParams",
    "OPCMMerger",
    "PrototypeClassifier",
    "PrototypeHead",
    "SWAMerger",
    "TaskArithmeticMerger",
    "TiesMerger",
    "build_expert",
    "init_model",
    "merged_forward",
]
