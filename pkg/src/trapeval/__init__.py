"""trapeval: box-regression losses, detection metrics, a small CNN graph
engine with gradient-based heatmaps, and camera-trap dataset tooling."""

from .boxes import BoundingBox, Detection, GroundTruth, center_distance_sq, enclosing_box, iou
from .errors import TrapevalError
from .losses import (
    LossEval,
    LossKind,
    LossParams,
    WiouState,
    finite_diff_grad,
    focusing_coefficient,
    loss_ciou,
    loss_diou,
    loss_eiou,
    loss_focal_eiou,
    loss_giou,
    loss_iou,
    loss_wiou_v1,
    loss_wiou_v3,
    simulate_regression,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Detection",
    "GroundTruth",
    "LossEval",
    "LossKind",
    "LossParams",
    "TrapevalError",
    "WiouState",
    "center_distance_sq",
    "enclosing_box",
    "finite_diff_grad",
    "focusing_coefficient",
    "iou",
    "loss_ciou",
    "loss_diou",
    "loss_eiou",
    "loss_focal_eiou",
    "loss_giou",
    "loss_iou",
    "loss_wiou_v1",
    "loss_wiou_v3",
    "simulate_regression",
]
