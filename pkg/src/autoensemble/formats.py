"""Detection and ground-truth files.

Native format is JSON lines: a header object on the first line carrying
``schema`` and ``version``, then one record per line::

    {"schema": "autoensemble.detections", "version": 1, "group_id": "cascade", "provenance": ""}
    {"image_id": "seg1_front_0001", "label": "vehicle", "x1": 10.0, "y1": 20.0, "x2": 50.0, "y2": 60.0, "score": 0.93}

Ground-truth records carry ``difficulty`` ("L1"/"L2") instead of ``score``.

COCO-style inputs are also accepted and auto-detected: a top-level JSON array
of ``{"image_id", "category_id", "bbox": [x, y, w, h], "score"}`` results for
detections, and an object with an ``annotations`` list for ground truth.
Integer category ids are 1-based indices into the class vocabulary.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

from autoensemble.core import (
    DEFAULT_CLASSES,
    BBox,
    DetectionGroup,
    Difficulty,
    GroundTruth,
    GroundTruthBox,
    canonical_sort,
)
from autoensemble.errors import DomainError, ParseError

logger = logging.getLogger(__name__)

DETECTION_SCHEMA = "autoensemble.detections"
GROUND_TRUTH_SCHEMA = "autoensemble.groundtruth"
SCHEMA_VERSION = 1

PathLike = Union[str, Path]


def _first_char(text: str) -> str:
    stripped = text.lstrip()
    return stripped[:1]


def _iter_jsonl(text: str, path) -> Iterator[Tuple[int, dict]]:
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", path, lineno) from None
        if not isinstance(obj, dict):
            raise ParseError("each line must be a JSON object", path, lineno)
        yield lineno, obj


def _read_header(records: Iterator[Tuple[int, dict]], schema: str, path) -> dict:
    try:
        lineno, header = next(records)
    except StopIteration:
        raise ParseError("empty file: missing schema header", path, 1) from None
    if header.get("schema") != schema:
        raise ParseError(f"expected header with schema {schema!r}, got {header.get('schema')!r}", path, lineno)
    if header.get("version") != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema version {header.get('version')!r}", path, lineno)
    return header


def _label(value, vocabulary: Sequence[str], path, where) -> str:
    if isinstance(value, bool):
        raise ParseError(f"invalid class label {value!r}", path, where)
    if isinstance(value, int):
        if 1 <= value <= len(vocabulary):
            return vocabulary[value - 1]
        raise ParseError(f"category id {value} outside vocabulary 1..{len(vocabulary)}", path, where)
    if isinstance(value, str) and value in vocabulary:
        return value
    raise ParseError(f"unknown class label {value!r} (vocabulary: {', '.join(vocabulary)})", path, where)


def _number(rec: dict, key: str, path, where) -> float:
    if key not in rec:
        raise ParseError(f"missing field {key!r}", path, where)
    value = rec[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"field {key!r} must be a number, got {value!r}", path, where)
    value = float(value)
    if not math.isfinite(value):
        raise ParseError(f"field {key!r} is not finite", path, where)
    return value


def _clamp_score(score: float, path, where) -> float:
    if 0.0 <= score <= 1.0:
        return score
    logger.warning("%s:%s: score %r clamped to [0, 1]", path, where, score)
    return min(max(score, 0.0), 1.0)


def _box(coords, score, label, path, where) -> BBox:
    try:
        return BBox(*coords, score=score, class_id=label)
    except DomainError as exc:
        raise ParseError(f"invalid box: {exc}", path, where) from None


def _image_id(rec: dict, path, where) -> str:
    if "image_id" not in rec:
        raise ParseError("missing field 'image_id'", path, where)
    return str(rec["image_id"])


def _parse_native_detection(rec, vocabulary, path, where) -> Tuple[str, BBox]:
    img = _image_id(rec, path, where)
    label = _label(rec.get("label"), vocabulary, path, where)
    coords = [_number(rec, k, path, where) for k in ("x1", "y1", "x2", "y2")]
    score = _clamp_score(_number(rec, "score", path, where), path, where)
    return img, _box(coords, score, label, path, where)


def _coco_coords(rec, path, where) -> List[float]:
    bbox = rec.get("bbox")
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise ParseError("field 'bbox' must be [x, y, w, h]", path, where)
    x, y, w, h = (_number({"v": v}, "v", path, where) for v in bbox)
    return [x, y, x + w, y + h]


def _coco_label(rec, vocabulary, path, where) -> str:
    for key in ("category_id", "label", "category"):
        if key in rec:
            return _label(rec[key], vocabulary, path, where)
    raise ParseError("missing field 'category_id'", path, where)


def parse_detections(text: str, vocabulary: Sequence[str] = DEFAULT_CLASSES,
                     group_id: str = "detections", path=None) -> DetectionGroup:
    per_image: Dict[str, List[BBox]] = {}
    provenance = ""
    if _first_char(text) == "[":
        try:
            records = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
        for k, rec in enumerate(records):
            where = f"record {k}"
            if not isinstance(rec, dict):
                raise ParseError("each result must be an object", path, where)
            img = _image_id(rec, path, where)
            label = _coco_label(rec, vocabulary, path, where)
            score = _clamp_score(_number(rec, "score", path, where), path, where)
            per_image.setdefault(img, []).append(_box(_coco_coords(rec, path, where), score, label, path, where))
        provenance = "COCO-style results"
    else:
        records = _iter_jsonl(text, path)
        header = _read_header(records, DETECTION_SCHEMA, path)
        group_id = str(header.get("group_id") or group_id)
        provenance = str(header.get("provenance", ""))
        for lineno, rec in records:
            img, box = _parse_native_detection(rec, vocabulary, path, lineno)
            per_image.setdefault(img, []).append(box)
    return DetectionGroup.from_boxes(group_id, per_image, provenance)


def load_detections(path: PathLike, vocabulary: Sequence[str] = DEFAULT_CLASSES,
                    group_id: Optional[str] = None) -> DetectionGroup:
    """Read a detection file; the group id defaults to the header's, then the file stem."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc.strerror}", path) from None
    group = parse_detections(text, vocabulary, path.stem, path)
    if group_id is not None:
        group = group.renamed(group_id)
    return group


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False)


def format_detections(group: DetectionGroup) -> str:
    """Canonical text: header, then images in id order, boxes in canonical order."""
    lines = [_dumps({"schema": DETECTION_SCHEMA, "version": SCHEMA_VERSION,
                     "group_id": group.group_id, "provenance": group.provenance})]
    for img in group.image_ids:
        for b in canonical_sort(group.boxes(img)):
            lines.append(_dumps({"image_id": img, "label": b.class_id, "x1": float(b.x1), "y1": float(b.y1),
                                 "x2": float(b.x2), "y2": float(b.y2), "score": float(b.score)}))
    return "\n".join(lines) + "\n"


def save_detections(group: DetectionGroup, path: PathLike) -> None:
    Path(path).write_text(format_detections(group), encoding="utf-8")


def _difficulty(rec, path, where) -> Difficulty:
    if "difficulty" not in rec:
        logger.warning("%s:%s: no difficulty field, assuming L1", path, where)
        return Difficulty.L1
    try:
        return Difficulty.parse(rec["difficulty"])
    except DomainError as exc:
        raise ParseError(str(exc), path, where) from None


def _whole_document(text: str):
    if _first_char(text) != "{":
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return None


def parse_ground_truth(text: str, vocabulary: Sequence[str] = DEFAULT_CLASSES, path=None) -> GroundTruth:
    per_image: Dict[str, List[GroundTruthBox]] = {}
    doc = _whole_document(text)
    if isinstance(doc, dict) and "annotations" in doc:
        for img in doc.get("images", []):
            per_image.setdefault(str(img["id"]), [])
        for k, rec in enumerate(doc["annotations"]):
            where = f"annotation {k}"
            img = _image_id(rec, path, where)
            label = _coco_label(rec, vocabulary, path, where)
            box = _box(_coco_coords(rec, path, where), 1.0, label, path, where)
            per_image.setdefault(img, []).append(GroundTruthBox(box, _difficulty(rec, path, where)))
        return GroundTruth(per_image)

    records = _iter_jsonl(text, path)
    _read_header(records, GROUND_TRUTH_SCHEMA, path)
    for lineno, rec in records:
        img = _image_id(rec, path, lineno)
        label = _label(rec.get("label"), vocabulary, path, lineno)
        coords = [_number(rec, k, path, lineno) for k in ("x1", "y1", "x2", "y2")]
        box = _box(coords, 1.0, label, path, lineno)
        per_image.setdefault(img, []).append(GroundTruthBox(box, _difficulty(rec, path, lineno)))
    return GroundTruth(per_image)


def load_ground_truth(path: PathLike, vocabulary: Sequence[str] = DEFAULT_CLASSES) -> GroundTruth:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc.strerror}", path) from None
    return parse_ground_truth(text, vocabulary, path)


def format_ground_truth(gt: GroundTruth) -> str:
    lines = [_dumps({"schema": GROUND_TRUTH_SCHEMA, "version": SCHEMA_VERSION})]
    for img in gt.image_ids:
        for g in gt.boxes(img):
            b = g.box
            lines.append(_dumps({"image_id": img, "label": b.class_id, "x1": float(b.x1), "y1": float(b.y1),
                                 "x2": float(b.x2), "y2": float(b.y2), "difficulty": g.difficulty.value}))
    return "\n".join(lines) + "\n"


def save_ground_truth(gt: GroundTruth, path: PathLike) -> None:
    Path(path).write_text(format_ground_truth(gt), encoding="utf-8")
