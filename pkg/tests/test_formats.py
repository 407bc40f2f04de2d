import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoensemble.core import BBox, DetectionGroup, Difficulty
from autoensemble.errors import ParseError
from autoensemble.formats import (
    format_detections,
    format_ground_truth,
    load_detections,
    load_ground_truth,
    parse_detections,
    parse_ground_truth,
    save_detections,
    save_ground_truth,
)

from synth import CLASSES, noisy_group, random_ground_truth

DET_HEADER = '{"schema": "autoensemble.detections", "version": 1, "group_id": "m", "provenance": ""}\n'
GT_HEADER = '{"schema": "autoensemble.groundtruth", "version": 1}\n'


def rec(**kw):
    base = {"image_id": "a", "label": "vehicle", "x1": 0, "y1": 0, "x2": 10, "y2": 10, "score": 0.5}
    base.update(kw)
    return json.dumps(base) + "\n"


class TestDetections:
    def test_header_only(self):
        g = parse_detections(DET_HEADER)
        assert g.group_id == "m" and g.num_boxes == 0

    def test_single_record(self):
        g = parse_detections(DET_HEADER + rec())
        assert g.boxes("a") == (BBox(0, 0, 10, 10, 0.5),)

    def test_round_trip_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        gt = random_ground_truth(rng, 4, CLASSES)
        g = noisy_group(rng, gt, "model")
        p = tmp_path / "model.jsonl"
        save_detections(g, p)
        first = p.read_bytes()
        again = load_detections(p)
        save_detections(again, p)
        assert p.read_bytes() == first
        assert again.group_id == "model"

    def test_ten_records(self, tmp_path):
        boxes = [BBox(k, k, k + 5.5, k + 3.25, round(0.05 * (k + 1), 3), CLASSES[k % 3]) for k in range(10)]
        g = DetectionGroup.from_boxes("ten", {"img": boxes})
        text = format_detections(g)
        assert len(text.splitlines()) == 11
        back = parse_detections(text)
        assert sorted(back.boxes("img"), key=repr) == sorted(boxes, key=repr)
        assert format_detections(back) == text

    @settings(max_examples=30)
    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3),
                              st.floats(1e-3, 1e3), st.floats(0, 1), st.sampled_from(CLASSES)), max_size=8))
    def test_round_trip_property(self, rows):
        g = DetectionGroup.from_boxes("p", {"i": [BBox(x, y, x + w, y + h, s, c) for x, y, w, h, s, c in rows]})
        text = format_detections(g)
        assert format_detections(parse_detections(text)) == text

    def test_stem_is_fallback_group_id(self, tmp_path):
        p = tmp_path / "cascade.jsonl"
        p.write_text('{"schema": "autoensemble.detections", "version": 1}\n' + rec())
        assert load_detections(p).group_id == "cascade"
        assert load_detections(p, group_id="x").group_id == "x"

    def test_bad_json_reports_line(self):
        with pytest.raises(ParseError) as exc:
            parse_detections(DET_HEADER + rec() + "{oops\n", path="d.jsonl")
        assert exc.value.line == 3
        assert "d.jsonl:3" in str(exc.value)

    def test_unknown_label(self):
        with pytest.raises(ParseError, match="unknown class label 'truck'"):
            parse_detections(DET_HEADER + rec(label="truck"))

    def test_degenerate_box(self):
        with pytest.raises(ParseError, match="invalid box"):
            parse_detections(DET_HEADER + rec(x2=0))

    def test_missing_field(self):
        with pytest.raises(ParseError, match="'score'"):
            parse_detections(DET_HEADER + json.dumps({"image_id": "a", "label": "vehicle",
                                                      "x1": 0, "y1": 0, "x2": 1, "y2": 1}))

    def test_missing_header(self):
        with pytest.raises(ParseError, match="schema"):
            parse_detections(rec())
        with pytest.raises(ParseError, match="empty file"):
            parse_detections("")

    def test_wrong_version(self):
        with pytest.raises(ParseError, match="version"):
            parse_detections('{"schema": "autoensemble.detections", "version": 7}\n')

    def test_score_clamped_with_warning(self, caplog):
        g = parse_detections(DET_HEADER + rec(score=1.2))
        assert g.boxes("a")[0].score == 1.0
        assert "clamped" in caplog.text

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="cannot read"):
            load_detections(tmp_path / "nope.jsonl")

    def test_coco_results(self):
        text = json.dumps([
            {"image_id": 7, "category_id": 2, "bbox": [1, 2, 3, 4], "score": 0.8},
            {"image_id": 7, "category_id": "cyclist", "bbox": [0, 0, 1, 1], "score": 0.1},
        ])
        g = parse_detections(text, group_id="coco")
        assert g.group_id == "coco"
        assert set(g.boxes("7")) == {BBox(1, 2, 4, 6, 0.8, "pedestrian"), BBox(0, 0, 1, 1, 0.1, "cyclist")}

    def test_coco_category_out_of_range(self):
        with pytest.raises(ParseError, match="outside vocabulary"):
            parse_detections(json.dumps([{"image_id": 1, "category_id": 9, "bbox": [0, 0, 1, 1], "score": 0.5}]))

    def test_custom_vocabulary(self):
        g = parse_detections(DET_HEADER + rec(label="sign"), vocabulary=("sign",))
        assert g.classes == {"sign"}


class TestGroundTruth:
    def test_round_trip(self, tmp_path):
        gt = random_ground_truth(np.random.default_rng(1), 3, CLASSES, l2_fraction=0.5)
        p = tmp_path / "gt.jsonl"
        save_ground_truth(gt, p)
        back = load_ground_truth(p)
        assert back == gt
        assert format_ground_truth(back) == p.read_text()

    def test_missing_difficulty_defaults_to_l1(self, caplog):
        line = json.dumps({"image_id": "a", "label": "vehicle", "x1": 0, "y1": 0, "x2": 1, "y2": 1})
        gt = parse_ground_truth(GT_HEADER + line)
        assert gt.boxes("a")[0].difficulty is Difficulty.L1
        assert "assuming L1" in caplog.text

    def test_bad_difficulty(self):
        line = json.dumps({"image_id": "a", "label": "vehicle", "x1": 0, "y1": 0, "x2": 1, "y2": 1,
                           "difficulty": "L9"})
        with pytest.raises(ParseError):
            parse_ground_truth(GT_HEADER + line)

    def test_coco_annotations(self):
        doc = {"images": [{"id": 1}, {"id": 2}],
               "annotations": [{"image_id": 1, "category_id": 1, "bbox": [0, 0, 10, 5], "difficulty": "L2"}]}
        gt = parse_ground_truth(json.dumps(doc))
        assert gt.image_ids == ["1", "2"]
        (g,) = gt.boxes("1")
        assert g.box == BBox(0, 0, 10, 5, 1.0, "vehicle") and g.difficulty is Difficulty.L2

    def test_detection_schema_rejected(self):
        with pytest.raises(ParseError, match="schema"):
            parse_ground_truth(DET_HEADER)
