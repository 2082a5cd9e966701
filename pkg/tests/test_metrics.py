import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from plateflow.detect import BoundingBox, Detection
from plateflow.metrics import (GroundTruth, LevenshteinStats, average_levenshtein, average_precision,
                               build_report, levenshtein, levenshtein_ratio, match_detections, mean_ap, per_class_ap,
                               precision_recall, precision_recall_counts, read_pairs_csv)

from oracles import ap_bruteforce, lev_recursive


def b(x, y=0.0, s=10.0):
    return BoundingBox(x, y, x + s, y + s)


def d(x, conf, cid=0, img="i"):
    return Detection(b(x), cid, conf, image_id=img)


def g(x, cid=0, img="i"):
    return GroundTruth(cid, b(x), img)


# -- matching ------------------------------------------------------------------

def test_perfect_and_empty_matching():
    gts = [g(0), g(20), g(40)]
    m = match_detections([d(0, 0.9), d(20, 0.8), d(40, 0.7)], gts)
    assert m.totals() == (3, 0, 0)
    m = match_detections([], gts)
    assert m.totals() == (0, 0, 3)


def test_duplicate_detection_is_false_positive():
    # IoU 0.9 vs 0.8 with the same ground truth
    gt = GroundTruth(0, BoundingBox(0, 0, 100, 10), "i")
    near = Detection(BoundingBox(0, 0, 90, 10), 0, 0.6, image_id="i")
    far = Detection(BoundingBox(0, 0, 80, 10), 0, 0.9, image_id="i")
    m = match_detections([near, far], [gt])
    assert m.totals() == (1, 1, 0)
    # the higher-confidence detection is matched first
    assert m.pairs == [(1, 0, pytest.approx(0.8))]


def test_matching_respects_class_and_image():
    m = match_detections([d(0, 0.9, cid=1), d(0, 0.8, img="j")], [g(0)])
    assert m.totals() == (0, 2, 1)


def test_low_iou_is_false_positive():
    m = match_detections([d(6, 0.9)], [g(0)], iou_threshold=0.5)
    assert m.totals() == (0, 1, 1)


def test_matching_ties_go_to_lower_index():
    m = match_detections([d(0, 0.9)], [g(0), g(0)])
    assert m.pairs[0][1] == 0


# -- precision / recall ------------------------------------------------------

def test_precision_recall_examples():
    pr = precision_recall_counts(9, 1, 1)
    assert (pr.precision, pr.recall) == pytest.approx((0.9, 0.9))
    assert precision_recall_counts(5, 0, 0)[:2] == (1.0, 1.0)
    none = precision_recall_counts(0, 0, 4)
    assert none.precision == 0.0 and none.precision_undefined and none.recall == 0.0
    m = match_detections([d(0, 0.9), d(50, 0.8)], [g(0), g(20)])
    assert precision_recall(m)[:2] == (0.5, 0.5)


# -- AP ----------------------------------------------------------------------

def test_ap_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([False, True], 1) == 0.5
    assert average_precision([], 3) == 0.0
    with pytest.raises(ValueError):
        average_precision([True], 0)


def test_ap_matches_bruteforce_exhaustively():
    for n in range(1, 9):
        for flags in itertools.product([False, True], repeat=n):
            for extra in (0, 2):
                n_gt = max(1, sum(flags) + extra)
                assert abs(average_precision(flags, n_gt) - ap_bruteforce(flags, n_gt)) < 1e-12


@given(st.lists(st.booleans(), max_size=20), st.integers(0, 5))
def test_ap_property(flags, extra):
    n_gt = max(1, sum(flags) + extra)
    ap = average_precision(flags, n_gt)
    assert 0.0 <= ap <= 1.0
    assert abs(ap - ap_bruteforce(flags, n_gt)) < 1e-12


def test_per_class_ap_and_map():
    gts = [g(0, 0), g(20, 0), g(0, 1)]
    dets = [d(0, 0.9, 0), d(50, 0.95, 0), d(20, 0.5, 0), d(0, 0.7, 1)]
    aps = per_class_ap(match_detections(dets, gts))
    assert aps[1] == 1.0
    assert aps[0] == pytest.approx(ap_bruteforce([False, True, True], 2))
    assert mean_ap({0: 1.0, 1: 0.5}) == 0.75
    assert mean_ap([0.4]) == 0.4
    assert mean_ap([0.9] * 19) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        mean_ap([])


# -- edit distances ----------------------------------------------------------

def test_levenshtein_examples():
    assert levenshtein("828h6", "8428h8") == 2
    assert levenshtein("11002571", "11002577") == 1
    assert levenshtein("52547b1", "52547b1") == 0
    assert levenshtein("", "abc") == 3
    # token sequences with multi-letter labels
    assert levenshtein(["4", "waw", "6"], ["4", "ww", "6"]) == 1


def test_levenshtein_ratio_captions():
    assert levenshtein_ratio("828h6", "8428h8") == pytest.approx(8 / 11)
    assert round(levenshtein_ratio("828h6", "8428h8"), 2) == 0.73
    assert levenshtein_ratio("11002571", "11002577") == pytest.approx(0.875)
    assert round(levenshtein_ratio("11002571", "11002577"), 2) == 0.88
    assert levenshtein_ratio("87004b8", "87004b8") == 1.0
    assert levenshtein_ratio("", "") == 1.0


def test_levenshtein_matches_recursive_oracle():
    words = ["".join(p) for n in range(5) for p in itertools.product("abc", repeat=n)]
    rng = np.random.default_rng(0)
    for _ in range(3000):
        a, c = words[rng.integers(len(words))], words[rng.integers(len(words))]
        assert levenshtein(a, c) == lev_recursive(a, c)


@given(st.text("abc", max_size=6), st.text("abc", max_size=6), st.text("abc", max_size=6))
def test_levenshtein_axioms(a, b_, c):
    assert levenshtein(a, b_) == levenshtein(b_, a)
    assert (levenshtein(a, b_) == 0) == (a == b_)
    assert levenshtein(a, c) <= levenshtein(a, b_) + levenshtein(b_, c)
    assert abs(len(a) - len(b_)) <= levenshtein(a, b_) <= max(len(a), len(b_))
    assert 0.0 <= levenshtein_ratio(a, b_) <= 1.0


def test_average_levenshtein():
    assert average_levenshtein([("a", "a"), ("b", "b")]) == 0.0
    assert average_levenshtein([("ab", "ba"), ("1", "2"), ("x", "x")]) == 1.0
    with pytest.raises(ValueError):
        average_levenshtein([])


def test_levenshtein_stats():
    s = LevenshteinStats.from_pairs([("828h6", "8428h8"), ("52547b1", "52547b1")])
    assert s.n == 2 and s.mean_distance == 1.0 and s.exact_match_rate == 0.5
    assert s.mean_ratio == pytest.approx((8 / 11 + 1) / 2)


# -- report files --------------------------------------------------------------

def test_report_files(tmp_path):
    m = match_detections([d(0, 0.9, 0), d(0, 0.8, 1), d(40, 0.4, 1)], [g(0, 0), g(0, 1)])
    rep = build_report(m, {0: "0", 1: "1"})
    assert rep.mAP == 1.0 and rep.recall == 1.0 and rep.precision == pytest.approx(2 / 3)
    rep.levenshtein = LevenshteinStats.from_pairs([("1", "1")])
    rep.write_json(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["mAP"] == 1.0 and doc["levenshtein"]["exact_match_rate"] == 1.0
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["label", "n_gt", "tp", "fp", "fn", "ap", "precision", "recall"]
    assert rows[2][:5] == ["1", "1", "1", "1", "0"]
    assert rows[-1][0] == "__summary__"


def test_report_without_detections():
    rep = build_report(match_detections([], [g(0)]), {0: "0"})
    assert rep.mAP == 0.0 and rep.precision == 0.0


def test_pairs_csv(tmp_path):
    p = tmp_path / "pairs.csv"
    p.write_text("image_id,predicted,target\nx,828h6,8428h8\ny,1,1\n")
    assert read_pairs_csv(p) == [("x", "828h6", "8428h8"), ("y", "1", "1")]
    (tmp_path / "bad.csv").write_text("image_id,guess\nx,1\n")
    with pytest.raises(ValueError):
        read_pairs_csv(tmp_path / "bad.csv")
