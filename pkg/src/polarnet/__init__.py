"""Polar-attention scoring for a toy single-stage cell detector."""

from .attention import PolarLayer, PolarParams, compute_pas, polar_weighted_features
from .boxes import DetectionBox, fuse_confidence, iou, nms
from .detector import DetectorConfig, DetectorModel
from .metrics import average_precision, topn_accuracy

__version__ = "0.1.0"

__all__ = [
    "DetectionBox", "DetectorConfig", "DetectorModel", "PolarLayer", "PolarParams",
    "average_precision", "compute_pas", "fuse_confidence", "iou", "nms",
    "polar_weighted_features", "topn_accuracy",
]
