"""Greedy prediction/ground-truth matching, all-point AP and difficulty-aware mAP."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autoensemble.core import (
    DetectionGroup,
    Difficulty,
    GroundTruth,
    GroundTruthBox,
    ImageDetections,
    canonical_key,
    iou_matrix,
)
from autoensemble.errors import ConfigError, DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    per_class_iou: Mapping[str, float]
    level: Difficulty = Difficulty.L2
    max_dets_per_image: Optional[int] = None
    score_min: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "per_class_iou", dict(self.per_class_iou))
        object.__setattr__(self, "level", Difficulty.parse(self.level))
        for cls, t in self.per_class_iou.items():
            if not (0.0 < t < 1.0):
                raise ConfigError(f"IoU threshold for {cls!r} must be in (0, 1), got {t}")
        if self.max_dets_per_image is not None and self.max_dets_per_image < 1:
            raise ConfigError("max_dets_per_image must be positive")

    def threshold(self, cls: str) -> float:
        try:
            return self.per_class_iou[cls]
        except KeyError:
            raise ConfigError(f"no IoU threshold configured for class {cls!r}") from None


def default_waymo_config() -> EvalConfig:
    """Level-2 AP with positive IoU 0.7 for vehicles and 0.5 for pedestrians and cyclists."""
    return EvalConfig({"vehicle": 0.7, "pedestrian": 0.5, "cyclist": 0.5}, level=Difficulty.L2)


@dataclass(frozen=True)
class PredictionMatch:
    pred_index: int
    score: float
    gt_index: Optional[int]
    is_tp: bool


@dataclass(frozen=True)
class MatchResult:
    """Matching outcome for one image and one class.

    ``matches`` follows the canonical ranking and excludes predictions that
    landed on ignored (L2, when scoring L1) ground truth; those are listed in
    ``ignored``.
    """

    image_id: str
    class_id: str
    matches: Tuple[PredictionMatch, ...]
    ignored: Tuple[int, ...]
    num_gt: int

    @property
    def num_tp(self) -> int:
        return sum(m.is_tp for m in self.matches)

    @property
    def num_fp(self) -> int:
        return sum(not m.is_tp for m in self.matches)


def _ranked_predictions(preds: ImageDetections, cls: str, cfg: EvalConfig) -> List[int]:
    boxes = preds.boxes
    idx = [i for i, b in enumerate(boxes) if b.class_id == cls and b.score >= cfg.score_min]
    idx.sort(key=lambda i: canonical_key(boxes[i], i))
    if cfg.max_dets_per_image is not None:
        idx = idx[: cfg.max_dets_per_image]
    return idx


def match(preds: ImageDetections, gts: Sequence[GroundTruthBox], cls: str,
          cfg: EvalConfig) -> MatchResult:
    """Greedy matching in descending score order, highest-IoU ground truth first.

    At level L1, L2-difficulty ground truth acts as an ignore region: a
    prediction whose best qualifying overlap is such a box is dropped from the
    ranking. Ignore regions are never consumed.
    """
    thresh = cfg.threshold(cls)
    order = _ranked_predictions(preds, cls, cfg)
    gt_idx = [k for k, g in enumerate(gts) if g.class_id == cls]
    if cfg.level is Difficulty.L2:
        targets, ignores = gt_idx, []
    else:
        targets = [k for k in gt_idx if gts[k].difficulty is Difficulty.L1]
        ignores = [k for k in gt_idx if gts[k].difficulty is Difficulty.L2]

    pred_boxes = [preds.boxes[i] for i in order]
    t_iou = iou_matrix(pred_boxes, [gts[k].box for k in targets])
    g_iou = iou_matrix(pred_boxes, [gts[k].box for k in ignores])
    taken = [False] * len(targets)
    matches, ignored = [], []
    for r, pi in enumerate(order):
        best_t, best_iou = -1, -1.0
        for c in range(len(targets)):
            if not taken[c] and t_iou[r, c] >= thresh and t_iou[r, c] > best_iou:
                best_t, best_iou = c, t_iou[r, c]
        best_ignore = max((g_iou[r, c] for c in range(len(ignores)) if g_iou[r, c] >= thresh),
                          default=-1.0)
        score = preds.boxes[pi].score
        if best_ignore > best_iou:
            ignored.append(pi)
        elif best_t >= 0:
            taken[best_t] = True
            matches.append(PredictionMatch(pi, score, targets[best_t], True))
        else:
            matches.append(PredictionMatch(pi, score, None, False))
    return MatchResult(preds.image_id, cls, tuple(matches), tuple(ignored), len(targets))


@dataclass(frozen=True)
class PRCurve:
    """(recall, precision) after each ranked prediction, plus the ground-truth count."""

    points: Tuple[Tuple[float, float], ...]
    num_gt: int

    @property
    def recall(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=float)

    @property
    def precision(self) -> np.ndarray:
        return np.array([p[1] for p in self.points], dtype=float)


def pr_curve(tp_flags: Sequence[bool], num_gt: int) -> PRCurve:
    """Sweep a ranked list of TP/FP flags into a precision/recall curve."""
    points = []
    tp = 0
    for k, flag in enumerate(tp_flags, start=1):
        tp += bool(flag)
        recall = tp / num_gt if num_gt else 0.0
        points.append((recall, tp / k))
    return PRCurve(tuple(points), num_gt)


def average_precision(curve: PRCurve) -> float:
    """All-point interpolated AP: exact integral of the monotone precision envelope over recall."""
    if curve.num_gt == 0:
        logger.warning("AP requested with zero ground-truth boxes; defined as 0")
        return 0.0
    if not curve.points:
        return 0.0
    envelope = [p for _, p in curve.points]
    for k in range(len(envelope) - 2, -1, -1):
        envelope[k] = max(envelope[k], envelope[k + 1])
    ap = 0.0
    prev_recall = 0.0
    for (recall, _), prec in zip(curve.points, envelope):
        if recall > prev_recall:
            ap += (recall - prev_recall) * prec
            prev_recall = recall
    return ap


@dataclass(frozen=True)
class ClassResult:
    class_id: str
    ap: float
    num_gt: int
    num_tp: int
    num_fp: int
    curve: PRCurve


@dataclass(frozen=True)
class EvalReport:
    """Per-class AP and their mean over classes that have ground truth in scope."""

    per_class: Mapping[str, ClassResult]
    level: Difficulty = Difficulty.L2
    map: float = field(init=False)

    def __post_init__(self):
        scored = [r.ap for r in self.per_class.values() if r.num_gt > 0]
        object.__setattr__(self, "map", sum(scored) / len(scored) if scored else 0.0)

    @property
    def per_class_ap(self) -> Dict[str, float]:
        return {c: r.ap for c, r in self.per_class.items()}

    @property
    def evaluated_classes(self) -> List[str]:
        return [c for c, r in self.per_class.items() if r.num_gt > 0]

    def to_dict(self) -> dict:
        return {
            "level": self.level.value,
            "mAP": self.map,
            "classes": {
                c: {"AP": r.ap, "num_gt": r.num_gt, "num_tp": r.num_tp, "num_fp": r.num_fp}
                for c, r in self.per_class.items()
            },
        }


def evaluate(group: DetectionGroup, gt: GroundTruth, cfg: EvalConfig) -> EvalReport:
    """Score a detection group against ground truth.

    Matches are pooled over images and re-ranked globally; score ties across
    images fall back to geometry, class, image id, then position in the image.
    """
    classes = sorted(gt.classes | group.classes)
    for cls in classes:
        cfg.threshold(cls)
    image_ids = sorted(set(gt.per_image) | set(group.per_image))

    per_class: Dict[str, ClassResult] = {}
    for cls in classes:
        ranked = []
        num_gt = 0
        for img in image_ids:
            preds = group.per_image.get(img) or ImageDetections(img)
            res = match(preds, gt.boxes(img), cls, cfg)
            num_gt += res.num_gt
            for m in res.matches:
                b = preds.boxes[m.pred_index]
                key = (-b.score, b.x1, b.y1, b.x2, b.y2, b.class_id, img, m.pred_index)
                ranked.append((key, m.is_tp))
        ranked.sort(key=lambda t: t[0])
        flags = [tp for _, tp in ranked]
        curve = pr_curve(flags, num_gt)
        ap = average_precision(curve) if num_gt else 0.0
        per_class[cls] = ClassResult(cls, ap, num_gt, sum(flags), len(flags) - sum(flags), curve)

    if not any(r.num_gt for r in per_class.values()):
        raise DomainError("ground truth has no boxes in scope for evaluation")
    return EvalReport(per_class, cfg.level)


def evaluate_map(group: DetectionGroup, gt: GroundTruth, cfg: EvalConfig) -> float:
    return evaluate(group, gt, cfg).map
