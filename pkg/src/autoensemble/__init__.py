"""Greedy auto ensemble of 2D detection groups."""

from autoensemble.core import (
    BBox,
    DetectionGroup,
    Difficulty,
    GroundTruth,
    GroundTruthBox,
    ImageDetections,
    canonical_sort,
    iou,
    iou_matrix,
)
from autoensemble.ensemble import (
    MergeNode,
    MergeTree,
    default_routing,
    greedy_auto_ensemble,
    merge_pair,
    per_class_ensemble,
)
from autoensemble.errors import AutoEnsembleError, ConfigError, DomainError, ParseError
from autoensemble.evaluation import EvalConfig, EvalReport, average_precision, default_waymo_config, evaluate, match
from autoensemble.fusion import (
    FusionOp,
    OpKind,
    OpParams,
    adj_nms,
    apply_op,
    default_ops,
    identity_left,
    identity_right,
    nms,
    nmw_naive,
    soft_nms,
    wbf,
)
from autoensemble.formats import load_detections, load_ground_truth, save_detections, save_ground_truth

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "DetectionGroup",
    "Difficulty",
    "GroundTruth",
    "GroundTruthBox",
    "ImageDetections",
    "canonical_sort",
    "iou",
    "iou_matrix",
    "MergeNode",
    "MergeTree",
    "default_routing",
    "greedy_auto_ensemble",
    "merge_pair",
    "per_class_ensemble",
    "FusionOp",
    "OpKind",
    "OpParams",
    "adj_nms",
    "apply_op",
    "default_ops",
    "identity_left",
    "identity_right",
    "nms",
    "nmw_naive",
    "soft_nms",
    "wbf",
    "AutoEnsembleError",
    "ConfigError",
    "DomainError",
    "ParseError",
    "EvalConfig",
    "EvalReport",
    "average_precision",
    "default_waymo_config",
    "evaluate",
    "match",
    "load_detections",
    "load_ground_truth",
    "save_detections",
    "save_ground_truth",
]
