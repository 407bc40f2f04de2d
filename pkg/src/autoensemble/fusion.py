"""Box-merging operators: NMS, soft-NMS, Adj-NMS, naive NMW, WBF, and the identity pair o1/o2.

Box-level operators take a flat list of boxes for one image and return a
canonically sorted list. ``apply_op``/``fuse_groups`` lift them to whole
detection groups by pooling per image.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

from autoensemble.core import (
    BBox,
    DetectionGroup,
    canonical_sort,
    group_by_class,
    iou,
    iou_matrix,
)
from autoensemble.errors import ConfigError, DomainError

logger = logging.getLogger(__name__)


class OpKind(str, enum.Enum):
    NMS = "nms"
    SOFT_NMS = "soft_nms"
    ADJ_NMS = "adj_nms"
    NMW_NAIVE = "nmw_naive"
    WBF = "wbf"
    O1 = "o1"
    O2 = "o2"

    @classmethod
    def parse(cls, name) -> "OpKind":
        if isinstance(name, OpKind):
            return name
        key = str(name).strip().lower().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown operator {name!r}; expected one of {valid}") from None


# argmax tie-break order when two operators reach the same mAP
OP_PRECEDENCE = (OpKind.NMS, OpKind.ADJ_NMS, OpKind.NMW_NAIVE, OpKind.WBF,
                 OpKind.SOFT_NMS, OpKind.O1, OpKind.O2)

DEFAULT_IOU = {OpKind.WBF: 0.55}


@dataclass(frozen=True)
class OpParams:
    """Operator knobs. ``iou_thresh=None`` means the operator's own default (0.5, or 0.55 for WBF)."""

    iou_thresh: Optional[float] = None
    soft_sigma: float = 0.5
    soft_method: str = "gaussian"
    score_floor: float = 0.001
    class_aware: bool = True
    wbf_model_count: Optional[int] = None
    max_per_image: Optional[int] = None

    def __post_init__(self):
        if self.iou_thresh is not None and not (0.0 < self.iou_thresh < 1.0):
            raise ConfigError(f"iou_thresh must be in (0, 1), got {self.iou_thresh}")
        if not self.soft_sigma > 0.0:
            raise ConfigError(f"soft_sigma must be positive, got {self.soft_sigma}")
        if self.soft_method not in ("linear", "gaussian"):
            raise ConfigError(f"soft_method must be 'linear' or 'gaussian', got {self.soft_method!r}")
        if not (0.0 <= self.score_floor < 1.0):
            raise ConfigError(f"score_floor must be in [0, 1), got {self.score_floor}")
        if self.wbf_model_count is not None and self.wbf_model_count < 1:
            raise ConfigError("wbf_model_count must be a positive integer")
        if self.max_per_image is not None and self.max_per_image < 1:
            raise ConfigError("max_per_image must be a positive integer")

    def thresh_for(self, kind: OpKind) -> float:
        if self.iou_thresh is not None:
            return self.iou_thresh
        return DEFAULT_IOU.get(kind, 0.5)


@dataclass(frozen=True)
class FusionOp:
    kind: OpKind
    params: OpParams = OpParams()

    def __post_init__(self):
        object.__setattr__(self, "kind", OpKind.parse(self.kind))

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def precedence(self) -> int:
        return OP_PRECEDENCE.index(self.kind)


def default_ops(with_wbf: bool = False, params: OpParams = OpParams()) -> List[FusionOp]:
    """The searched operator set {nms, adj-nms, nmw-naive, o1, o2}, optionally extended with WBF."""
    kinds = [OpKind.NMS, OpKind.ADJ_NMS, OpKind.NMW_NAIVE]
    if with_wbf:
        kinds.append(OpKind.WBF)
    kinds += [OpKind.O1, OpKind.O2]
    return [FusionOp(k, params) for k in kinds]


def _per_class(boxes: Sequence[BBox], params: OpParams,
               fn: Callable[[List[BBox]], List[BBox]]) -> List[BBox]:
    if params.class_aware:
        out: List[BBox] = []
        for cls in sorted(group_by_class(boxes)):
            out.extend(fn([b for b in boxes if b.class_id == cls]))
    else:
        out = fn(list(boxes))
    out = canonical_sort(out)
    if params.max_per_image is not None:
        out = out[: params.max_per_image]
    return out


def _nms_core(boxes: List[BBox], thresh: float) -> List[BBox]:
    ordered = canonical_sort(boxes)
    if not ordered:
        return []
    ious = iou_matrix(ordered, ordered)
    alive = [True] * len(ordered)
    keep = []
    for i, box in enumerate(ordered):
        if not alive[i]:
            continue
        keep.append(box)
        for j in range(i + 1, len(ordered)):
            if alive[j] and ious[i, j] >= thresh:
                alive[j] = False
    return keep


def nms(boxes: Sequence[BBox], params: OpParams = OpParams()) -> List[BBox]:
    """Greedy hard NMS; survivors keep their coordinates and scores."""
    thresh = params.thresh_for(OpKind.NMS)
    return _per_class(boxes, params, lambda bs: _nms_core(bs, thresh))


def _decayed_key(entry) -> tuple:
    s, b, i = entry
    return (-s, b.x1, b.y1, b.x2, b.y2, b.class_id, i)


def _soft_nms_core(boxes: List[BBox], params: OpParams) -> List[BBox]:
    thresh = params.thresh_for(OpKind.SOFT_NMS)
    floor = params.score_floor
    gaussian = params.soft_method == "gaussian"
    # (score, box, insertion index); boxes keep original geometry while scores decay
    pending = [(b.score, b, i) for i, b in enumerate(boxes) if not b.score < floor]
    keep = []
    while pending:
        best = min(range(len(pending)), key=lambda k: _decayed_key(pending[k]))
        score, top, _ = pending.pop(best)
        keep.append(top.with_score(score))
        survivors = []
        for s, b, i in pending:
            ov = iou(top, b)
            if gaussian:
                s = s * math.exp(-(ov * ov) / params.soft_sigma)
            elif ov >= thresh:
                s = s * (1.0 - ov)
            if not s < floor:
                survivors.append((s, b, i))
        pending = survivors
    return keep


def soft_nms(boxes: Sequence[BBox], params: OpParams = OpParams()) -> List[BBox]:
    """Soft-NMS with linear (thresholded) or gaussian decay; boxes decayed below ``score_floor`` are dropped."""
    return _per_class(boxes, params, lambda bs: _soft_nms_core(bs, params))


def adj_nms(boxes: Sequence[BBox], params: OpParams = OpParams()) -> List[BBox]:
    """Hard NMS at IoU 0.5, then gaussian soft-NMS over the survivors."""
    pruned = nms(boxes, replace(params, iou_thresh=0.5, max_per_image=None))
    return soft_nms(pruned, replace(params, soft_method="gaussian"))


def _weighted_mean_box(members: Sequence[BBox], weights: Sequence[float]) -> Tuple[float, ...]:
    total = sum(weights)
    if total <= 0.0:
        logger.warning("cluster of %d boxes has zero total score; using unweighted mean", len(members))
        weights = [1.0] * len(members)
        total = float(len(members))
    coords = []
    for k in range(4):
        vals = [m.xyxy[k] for m in members]
        mean = sum(w * v for w, v in zip(weights, vals)) / total
        # rounding can push a weighted mean an ulp past the member hull
        coords.append(min(max(mean, min(vals)), max(vals)))
    return tuple(coords)


def _nmw_core(boxes: List[BBox], thresh: float) -> List[BBox]:
    remaining = canonical_sort(boxes)
    out = []
    while remaining:
        seed = remaining[0]
        ious = iou_matrix([seed], remaining)[0]
        members = [b for b, ov in zip(remaining, ious) if ov >= thresh]
        remaining = [b for b, ov in zip(remaining, ious) if not ov >= thresh]
        x1, y1, x2, y2 = _weighted_mean_box(members, [m.score for m in members])
        out.append(BBox(x1, y1, x2, y2, max(m.score for m in members), seed.class_id))
    return out


def nmw_naive(boxes: Sequence[BBox], params: OpParams = OpParams()) -> List[BBox]:
    """Score-weighted merge of each seed's cluster; the fused score is the cluster max."""
    thresh = params.thresh_for(OpKind.NMW_NAIVE)
    return _per_class(boxes, params, lambda bs: _nmw_core(bs, thresh))


class _WbfCluster:
    __slots__ = ("members", "weights", "fused")

    def __init__(self, box: BBox, weight: float):
        self.members = [box]
        self.weights = [weight]
        self.fused = box.xyxy

    def add(self, box: BBox, weight: float) -> None:
        self.members.append(box)
        self.weights.append(weight)
        self.fused = _weighted_mean_box(self.members, self.weights)


def _wbf_core(boxes: List[BBox], thresh: float, n_models: int, floor: float) -> List[BBox]:
    clusters: List[_WbfCluster] = []
    for box in canonical_sort(boxes):
        for cl in clusters:
            x1, y1, x2, y2 = cl.fused
            if iou(BBox(x1, y1, x2, y2, 0.0, box.class_id), box) >= thresh:
                cl.add(box, box.score)
                break
        else:
            clusters.append(_WbfCluster(box, box.score))
    out = []
    for cl in clusters:
        t = len(cl.members)
        score = sum(cl.weights) / t * min(t, n_models) / n_models
        score = min(score, 1.0)
        if score < floor:
            continue
        x1, y1, x2, y2 = cl.fused
        out.append(BBox(x1, y1, x2, y2, score, cl.members[0].class_id))
    return out


def wbf(groups: Sequence[Tuple[Sequence[BBox], float]], params: OpParams = OpParams()) -> List[BBox]:
    """Weighted boxes fusion over boxes pooled from several models.

    Each group is ``(boxes, model_weight)``; a box's score is multiplied by its
    model weight before clustering. Fused scores are the mean member score
    rescaled by ``min(T, N) / N`` (T members, N models).
    """
    if not groups:
        raise DomainError("wbf needs at least one group")
    n_models = params.wbf_model_count or len(groups)
    thresh = params.thresh_for(OpKind.WBF)
    pooled: List[BBox] = []
    for boxes, weight in groups:
        if weight < 0:
            raise DomainError(f"negative model weight {weight}")
        for b in boxes:
            pooled.append(b if weight == 1.0 else b.with_score(min(b.score * weight, 1.0)))

    return _per_class(pooled, params,
                      lambda bs: _wbf_core(bs, thresh, n_models, params.score_floor))


def identity_left(di: DetectionGroup, dj: DetectionGroup) -> DetectionGroup:
    return di


def identity_right(di: DetectionGroup, dj: DetectionGroup) -> DetectionGroup:
    return dj


BOX_OPS = {
    OpKind.NMS: nms,
    OpKind.SOFT_NMS: soft_nms,
    OpKind.ADJ_NMS: adj_nms,
    OpKind.NMW_NAIVE: nmw_naive,
}


def fuse_boxes(op: FusionOp, box_lists: Sequence[Sequence[BBox]],
               weights: Optional[Sequence[float]] = None) -> List[BBox]:
    """Apply a pooling operator to one image's boxes coming from several groups."""
    if op.kind is OpKind.WBF:
        weights = weights or [1.0] * len(box_lists)
        return wbf(list(zip(box_lists, weights)), op.params)
    fn = BOX_OPS.get(op.kind)
    if fn is None:
        raise DomainError(f"operator {op.name} is not a pooling operator")
    pooled = [b for boxes in box_lists for b in boxes]
    return fn(pooled, op.params)


def fuse_groups(op: FusionOp, groups: Sequence[DetectionGroup],
                weights: Optional[Sequence[float]] = None,
                group_id: Optional[str] = None) -> DetectionGroup:
    """Pool any number of groups per image and apply one operator.

    o1/o2 select the first/last group. Images missing from a group contribute
    no boxes.
    """
    if not groups:
        raise DomainError("no detection groups to fuse")
    if weights is not None and len(weights) != len(groups):
        raise ConfigError(f"{len(weights)} weights given for {len(groups)} groups")
    if op.kind is OpKind.O1:
        return groups[0]
    if op.kind is OpKind.O2:
        return groups[-1]
    image_ids = sorted(set().union(*(g.per_image for g in groups)))
    merged = {img: fuse_boxes(op, [g.boxes(img) for g in groups], weights) for img in image_ids}
    gid = group_id or f"{op.name}({','.join(g.group_id for g in groups)})"
    return DetectionGroup.from_boxes(gid, merged, provenance=f"{op.name} over {len(groups)} groups")


def apply_op(op: FusionOp, di: DetectionGroup, dj: DetectionGroup) -> DetectionGroup:
    """o(di, dj) for any operator in the catalog."""
    if not isinstance(op, FusionOp):
        raise DomainError(f"not a fusion operator: {op!r}")
    if op.kind is OpKind.O1:
        return identity_left(di, dj)
    if op.kind is OpKind.O2:
        return identity_right(di, dj)
    return fuse_groups(op, [di, dj])
