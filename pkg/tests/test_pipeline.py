import json

import numpy as np
import pytest

from plateflow.detect import BoundingBox, Detection, DetectionRecord, RecordEntry
from plateflow.errors import DataError
from plateflow.pipeline import (CHAR_EXTRACTOR, PLATE_PATCH_SHAPE, Models, PipelineConfig, PlateResult, calibrate,
                                char_patch, evaluate, plate_patch, result_from_json, run_image, score_image, widen)
from plateflow.recognize import CHAR_PATCH_SHAPE, CharDetection

from conftest import make_scenes


def test_patch_shapes():
    img = np.random.default_rng(0).uniform(size=(100, 200))
    assert plate_patch(img, BoundingBox(20, 30, 120, 60), 0.15).shape == PLATE_PATCH_SHAPE
    assert char_patch(img, BoundingBox(50, 40, 53, 60), 0.2).shape == CHAR_PATCH_SHAPE


def test_widen_thin_boxes():
    thin = BoundingBox(10, 0, 12, 20)
    w = widen(thin)
    assert w.width == pytest.approx(10) and w.center == thin.center and w.height == 20
    wide = BoundingBox(0, 0, 15, 20)
    assert widen(wide) == wide


def test_models_save_load(small_models, tmp_path):
    models, _ = small_models
    models.save(tmp_path / "m")
    back = Models.load(tmp_path / "m")
    for a, b in ((models.plate, back.plate), (models.char, back.char)):
        assert a.scale == b.scale and a.extractor == b.extractor and a.transforms == b.transforms
        for p, q in zip(a.flow.parameters(), b.flow.parameters()):
            assert np.array_equal(p, q)
    assert np.array_equal(models.classifier.weights, back.classifier.weights)
    advisory = json.loads((tmp_path / "m" / "advisory.json").read_text())
    assert advisory == {"plate_detector_filters": 30, "char_detector_filters": 120}
    with pytest.raises(DataError):
        Models.load(tmp_path / "nothing")


def test_empty_record_gives_no_plate(small_models):
    models, cfg = small_models
    image = np.full((160, 256), 0.5)
    res = run_image(image, DetectionRecord("e", 256, 160, []), models, cfg)
    assert res.status == "no_plate" and res.plate_text == ""
    doc = res.to_json()
    assert doc["plate"] is None and doc["per_char"] == []


def test_noise_plate_is_vetoed(small_models):
    models, cfg = small_models
    image = np.random.default_rng(0).uniform(size=(160, 256))
    rec = DetectionRecord("n", 256, 160, [RecordEntry("plate", BoundingBox(40, 40, 200, 90), 0.99)])
    assert run_image(image, rec, models, cfg).status == "no_plate"


def test_small_end_to_end(small_models):
    models, cfg = small_models
    scenes = make_scenes(30, 77, distractor_prob=0.3)
    results = [run_image(img, rec, models, cfg) for img, _, rec in scenes]
    anns = [ann for _, ann, _ in scenes]
    report = evaluate(results, anns)
    assert report.levenshtein.exact_match_rate >= 0.8
    assert report.plate_recall >= 0.9
    assert report.mAP > 0.8
    # JSON round trip keeps what evaluation needs
    back = [result_from_json(json.loads(json.dumps(r.to_json()))) for r in results]
    again = evaluate(back, anns)
    assert again.mAP == report.mAP and again.levenshtein == report.levenshtein


def test_decide_is_monotone_in_theta(small_models):
    models, cfg = small_models
    img, ann, rec = make_scenes(1, 78)[0]
    scored = score_image(img, rec, models, cfg)
    counts = [len(scored.decide(t).chars) for t in (0.6, 0.3, 0.1, 0.02)]
    assert counts == sorted(counts)


def test_calibrate_picks_a_grid_value(small_models):
    models, cfg = small_models
    scenes = make_scenes(10, 79)
    scored = [score_image(img, rec, models, cfg) for img, _, rec in scenes]
    cal = calibrate(scored, [a for _, a, _ in scenes], (0.05, 0.1, 0.3))
    assert cal.chosen in (0.05, 0.1, 0.3)
    assert cal.objectives[[p.theta for p in cal.curve].index(cal.chosen)] == min(cal.objectives)
    with pytest.raises(DataError):
        calibrate(scored, [], (0.1,))


def test_evaluate_perfect_predictions():
    img, ann, _ = make_scenes(1, 80)[0]
    chars = [CharDetection(lab, box, 0.9, 0.0) for lab, box in ann.char_objects]
    plate = Detection(ann.boxes("plate")[0], 0, 0.9)
    res = PlateResult(ann.image_id, "ok", plate, ann.plate_text, ann.layout, {}, chars)
    rep = evaluate([res], [ann])
    assert rep.mAP == 1.0 and rep.plate_ap == 1.0 and rep.levenshtein.exact_match_rate == 1.0
    # a missing prediction counts as an empty string
    rep = evaluate([], [ann])
    assert rep.levenshtein.mean_distance == len(ann.plate_text)


def test_pipeline_config_defaults():
    cfg = PipelineConfig()
    assert (cfg.margin_plate, cfg.margin_char, cfg.theta_char) == (0.15, 0.20, 0.1)
    assert CHAR_EXTRACTOR.dim == 60
