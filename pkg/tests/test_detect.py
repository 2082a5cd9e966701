import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from plateflow.detect import (AnchorConfig, BoundingBox, Detection, DetectionRecord, FileDetectorSource, RecordEntry,
                              crop, expand_margin, filter_count, intersection_area, iou, read_detection_record,
                              round_half_away, select_best_plate, write_detection_record)
from plateflow.errors import DataError


def box(*v):
    return BoundingBox(*map(float, v))


coords = st.floats(0, 100, allow_nan=False)


@st.composite
def boxes(draw):
    x0, y0 = draw(coords), draw(coords)
    w, h = draw(st.floats(0.5, 50)), draw(st.floats(0.5, 50))
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def test_box_validation():
    with pytest.raises(ValueError):
        box(1, 1, 1, 2)
    with pytest.raises(ValueError):
        BoundingBox(0.0, 0.0, float("nan"), 1.0)
    b = box(2, 4, 6, 10)
    assert (b.width, b.height, b.area, b.center) == (4, 6, 24, (4, 7))
    assert b.clamp(5, 8) == box(2, 4, 5, 8)


def test_iou_examples():
    assert iou(box(0, 0, 2, 2), box(0, 0, 2, 2)) == 1.0
    assert iou(box(0, 0, 1, 1), box(2, 2, 3, 3)) == 0.0
    assert iou(box(0, 0, 2, 2), box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    # touching edges share no area
    assert iou(box(0, 0, 1, 1), box(1, 0, 2, 1)) == 0.0


@given(a=boxes(), b=boxes())
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert (v == 0.0) == (intersection_area(a, b) == 0.0)
    assert iou(a, a) == pytest.approx(1.0)


def test_expand_margin_examples():
    b = box(10, 10, 30, 30)
    assert expand_margin(b, 0.0, 100, 100) == b
    assert expand_margin(b, 0.15, 100, 100) == box(7, 7, 33, 33)
    assert expand_margin(box(0, 0, 20, 20), 0.15, 100, 100) == box(0, 0, 23, 23)
    with pytest.raises(ValueError):
        expand_margin(b, -0.1, 100, 100)


@given(b=boxes(), m1=st.floats(0, 1), m2=st.floats(0, 1))
def test_expand_margin_monotone(b, m1, m2):
    lo, hi = sorted((m1, m2))
    small = expand_margin(b, lo, 1000, 1000)
    big = expand_margin(b, hi, 1000, 1000)
    assert big.x_min <= small.x_min and big.y_min <= small.y_min
    assert big.x_max >= small.x_max and big.y_max >= small.y_max


def test_filter_count():
    assert filter_count(AnchorConfig(5, 1)) == 30
    assert filter_count(AnchorConfig(5, 19)) == 120
    assert filter_count(AnchorConfig(3, 80)) == 255
    with pytest.raises(ValueError):
        AnchorConfig(0, 1)


def test_rounding_rule():
    assert [round_half_away(v) for v in (0.5, 1.5, 2.5, -0.5, 20.4, 20.5)] == [1, 2, 3, -1, 20, 21]


def test_crop_examples():
    img = np.arange(40 * 50, dtype=float).reshape(40, 50)
    assert np.array_equal(crop(img, box(0, 0, 50, 40)), img)
    one = crop(img, box(0, 0, 1, 1))
    assert one.shape == (1, 1) and one[0, 0] == img[0, 0]
    c = crop(img, box(10.4, 10.6, 20.5, 20.4))
    assert c.shape == (9, 11)
    assert np.array_equal(c, img[11:20, 10:21])
    # clamped at the border, and a copy
    edge = crop(img, box(45, 35, 60, 60))
    assert edge.shape == (5, 5)
    edge[0, 0] = -1
    assert img[35, 45] != -1
    with pytest.raises(DataError):
        crop(img, box(60, 60, 70, 70))


def det(conf, tau, cid=0, x=0.0):
    return Detection(box(x, 0, x + 10, 5), cid, conf, tau)


def test_select_best_plate_rules():
    only = det(0.9, 0.0)
    assert select_best_plate([only], 1.0) is only
    assert select_best_plate([], 1.0) is None
    vetoed, kept = det(0.95, 2.0), det(0.90, 0.5)
    assert select_best_plate([vetoed, kept], 1.0) is kept
    a, b = det(0.9, 0.05), det(0.9, 0.02)
    assert select_best_plate([a, b], 1.0) is b
    c, d = det(0.9, 0.02, cid=1), det(0.9, 0.02, cid=0)
    assert select_best_plate([c, d], 1.0) is d
    e, f = det(0.9, 0.02, x=30), det(0.9, 0.02, x=3)
    assert select_best_plate([e, f], 1.0) is f
    # boundary is accepted
    assert select_best_plate([det(0.5, 1.0)], 1.0) is not None
    with pytest.raises(ValueError):
        select_best_plate([Detection(box(0, 0, 1, 1), 0, 0.5)], 1.0)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(-3, 3)), max_size=12), st.floats(-3, 3))
def test_select_best_plate_property(items, bound):
    dets = [det(c, t, x=i) for i, (c, t) in enumerate(items)]
    best = select_best_plate(dets, bound)
    survivors = [d for d in dets if d.tau <= bound]
    if best is None:
        assert not survivors
    else:
        assert best.tau <= bound
        assert all(best.confidence >= d.confidence for d in survivors)


def test_detection_confidence_range():
    with pytest.raises(ValueError):
        Detection(box(0, 0, 1, 1), 0, 1.2)


def test_record_round_trip(tmp_path):
    rec = DetectionRecord("img1", 120, 80, [RecordEntry("plate", box(1.5, 2, 50, 30), 0.9),
                                            RecordEntry("char", box(4, 5, 9, 20.25), 0.75)])
    write_detection_record(rec, tmp_path / "img1.json")
    back = read_detection_record(tmp_path / "img1.json")
    assert back == rec
    assert FileDetectorSource(tmp_path).detect("img1") == rec
    with pytest.raises(DataError):
        FileDetectorSource(tmp_path).detect("missing")


@pytest.mark.parametrize("doc", [
    {"image_id": "x", "width": 10, "height": 10},
    {"image_id": "x", "width": 10, "height": 10,
     "detections": [{"class": "plate", "x_min": 0, "y_min": 0, "x_max": 5, "y_max": 5, "confidence": 1.5}]},
    {"image_id": "x", "width": 10, "height": 10,
     "detections": [{"class": "plate", "x_min": 5, "y_min": 0, "x_max": 5, "y_max": 5, "confidence": 0.5}]},
])
def test_record_rejects_bad_documents(tmp_path, doc):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(DataError):
        read_detection_record(p)


def test_record_rejects_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(DataError):
        read_detection_record(p)
