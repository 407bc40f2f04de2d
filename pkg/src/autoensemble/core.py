"""Boxes, detection groups, ground truth, and the ordering rules everything else relies on."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autoensemble.errors import DomainError

DEFAULT_CLASSES = ("vehicle", "pedestrian", "cyclist")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, half-open, no +1 area correction."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0
    class_id: str = "vehicle"

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise DomainError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DomainError(f"degenerate box {coords}: need x1 < x2 and y1 < y2")
        if not (0.0 <= self.score <= 1.0):
            raise DomainError(f"score {self.score!r} outside [0, 1]")

    @property
    def xyxy(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def with_score(self, score: float) -> "BBox":
        return BBox(self.x1, self.y1, self.x2, self.y2, score, self.class_id)


class Difficulty(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"

    @classmethod
    def parse(cls, value) -> "Difficulty":
        if isinstance(value, Difficulty):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise DomainError(f"unknown difficulty level {value!r}; expected L1 or L2") from None


@dataclass(frozen=True)
class ImageDetections:
    image_id: str
    boxes: Tuple[BBox, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class DetectionGroup:
    """All detections of one model or inference scheme, keyed by image id.

    Treated as an immutable value: operators always build new groups.
    """

    group_id: str
    per_image: Mapping[str, ImageDetections] = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self):
        for key, dets in self.per_image.items():
            if dets.image_id != key:
                raise DomainError(f"image key {key!r} holds detections for {dets.image_id!r}")

    @classmethod
    def from_boxes(cls, group_id: str, boxes_by_image: Mapping[str, Iterable[BBox]],
                   provenance: str = "") -> "DetectionGroup":
        per_image = {img: ImageDetections(img, tuple(bxs)) for img, bxs in boxes_by_image.items()}
        return cls(group_id, per_image, provenance)

    @property
    def image_ids(self) -> List[str]:
        return sorted(self.per_image)

    def boxes(self, image_id: str) -> Tuple[BBox, ...]:
        dets = self.per_image.get(image_id)
        return dets.boxes if dets is not None else ()

    @property
    def num_boxes(self) -> int:
        return sum(len(d.boxes) for d in self.per_image.values())

    @property
    def classes(self) -> set:
        return {b.class_id for d in self.per_image.values() for b in d.boxes}

    def restrict_classes(self, classes: Iterable[str], group_id: Optional[str] = None) -> "DetectionGroup":
        keep = set(classes)
        return DetectionGroup.from_boxes(
            group_id or self.group_id,
            {img: [b for b in d.boxes if b.class_id in keep] for img, d in self.per_image.items()},
            self.provenance,
        )

    def renamed(self, group_id: str) -> "DetectionGroup":
        return DetectionGroup(group_id, self.per_image, self.provenance)


@dataclass(frozen=True)
class GroundTruthBox:
    box: BBox
    difficulty: Difficulty = Difficulty.L1

    def __post_init__(self):
        object.__setattr__(self, "difficulty", Difficulty.parse(self.difficulty))

    @property
    def class_id(self) -> str:
        return self.box.class_id


@dataclass(frozen=True)
class GroundTruth:
    per_image: Mapping[str, Tuple[GroundTruthBox, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "per_image", {k: tuple(v) for k, v in self.per_image.items()})

    @property
    def image_ids(self) -> List[str]:
        return sorted(self.per_image)

    def boxes(self, image_id: str) -> Tuple[GroundTruthBox, ...]:
        return self.per_image.get(image_id, ())

    @property
    def classes(self) -> set:
        return {g.class_id for gts in self.per_image.values() for g in gts}

    def restrict_classes(self, classes: Iterable[str]) -> "GroundTruth":
        keep = set(classes)
        return GroundTruth({img: [g for g in gts if g.class_id in keep]
                            for img, gts in self.per_image.items()})

    @classmethod
    def from_detections(cls, group: DetectionGroup, difficulty=Difficulty.L1) -> "GroundTruth":
        """Treat a detection group as labels (scores forced to 1)."""
        return cls({img: [GroundTruthBox(b.with_score(1.0), difficulty) for b in d.boxes]
                    for img, d in group.per_image.items()})


def canonical_key(box: BBox, index: int = 0) -> tuple:
    """Sort key realizing the canonical order: score desc, then coordinates, class, insertion index."""
    return (-box.score, box.x1, box.y1, box.x2, box.y2, box.class_id, index)


def canonical_sort(boxes: Sequence[BBox]) -> List[BBox]:
    order = sorted(range(len(boxes)), key=lambda i: canonical_key(boxes[i], i))
    return [boxes[i] for i in order]


def _check_box(b, where: str = "") -> None:
    if not (b.x2 > b.x1 and b.y2 > b.y1):
        raise DomainError(f"degenerate box{where}: {(b.x1, b.y1, b.x2, b.y2)}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint or edge-touching boxes."""
    _check_box(a)
    _check_box(b)
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    return inter / union


def boxes_to_array(boxes: Sequence[BBox], label: str = "boxes") -> np.ndarray:
    arr = np.array([(b.x1, b.y1, b.x2, b.y2) for b in boxes], dtype=np.float64).reshape(-1, 4)
    bad = np.flatnonzero((arr[:, 2] <= arr[:, 0]) | (arr[:, 3] <= arr[:, 1]))
    if bad.size:
        raise DomainError(f"degenerate box at {label}[{int(bad[0])}]: {tuple(arr[bad[0]])}")
    return arr


def iou_matrix(as_: Sequence[BBox], bs: Sequence[BBox]) -> np.ndarray:
    """Pairwise IoU, shape (len(as_), len(bs)); entries agree with :func:`iou` bit for bit."""
    a = boxes_to_array(as_, "as")
    b = boxes_to_array(bs, "bs")
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(overlap, inter / union, 0.0)


def group_by_class(boxes: Iterable[BBox]) -> Dict[str, List[BBox]]:
    out: Dict[str, List[BBox]] = {}
    for b in boxes:
        out.setdefault(b.class_id, []).append(b)
    return out
