"""End-to-end plate reading on top of detection records.

Stages per image: crop every plate candidate with the plate margin, score
it with the plate flow and keep the most confident survivor; crop every
character box inside that plate with the character margin, classify it and
score it with the character flow; keep the characters under the character
threshold and assemble them into a plate string.

Scoring is separated from thresholding (:class:`ScoredImage`) so a threshold
sweep does not rescore anything.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import imaging
from .data_io import PLATE_ID, AnnotatedImage
from .detect import (CHAR_MARGIN, PLATE_MARGIN, BoundingBox, Detection, DetectionRecord, crop, expand_margin,
                     filter_count, AnchorConfig, select_best_plate)
from .errors import DataError
from .features import FeatureExtractor, extract_features
from .flow_core import FitResult, TrainConfig, fit, init_flow, load_flow, log_prob, save_flow
from .metrics import (EvalReport, GroundTruth, LevenshteinStats, build_report, match_detections,
                      per_class_ap, precision_recall)
from .recognize import (CHAR_LABELS, CHAR_PATCH_SHAPE, LABEL_TO_INDEX, N_CLASSES, CharDetection, ClassifierConfig,
                        SoftmaxClassifier, assemble_plate, confusion_swap, train_classifier)
from .scoring import (DEFAULT_TRANSFORMS, ScoreScale, TransformSpec, Verifier, apply_transform,
                      bound_from_theta, calibrate_threshold)

log = logging.getLogger(__name__)

PLATE_PATCH_SHAPE = (32, 96)
PLATE_EXTRACTOR = FeatureExtractor("grad_hist", grid=(2, 6), bins=4)
CHAR_EXTRACTOR = FeatureExtractor("raw_patch", grid=(10, 6))
DEFAULT_THETA_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
PLATE_LABEL = "plate"


@dataclass(frozen=True)
class PipelineConfig:
    margin_plate: float = PLATE_MARGIN
    margin_char: float = CHAR_MARGIN
    theta_plate: float = 0.1
    theta_char: float = 0.1
    score_mode: str = "standardized"
    transforms: Tuple[TransformSpec, ...] = DEFAULT_TRANSFORMS
    flow_layers: int = 4
    flow_hidden: int = 32
    flow_steps: int = 4000
    batch_size: int = 64
    epsilon: float = 0.1
    classifier_steps: int = 600
    swap: bool = True
    box_jitter: float = 1.0        # pixels, training augmentation
    jitter_copies: int = 2
    feature_noise: float = 0.1
    scale_holdout: float = 0.2
    seed: int = 0


# -- patches -----------------------------------------------------------------

def plate_patch(image, box: BoundingBox, margin: float) -> np.ndarray:
    h, w = image.shape[:2]
    return imaging.letterbox(crop(image, expand_margin(box, margin, w, h)), PLATE_PATCH_SHAPE)


def widen(box: BoundingBox, min_aspect: float = 0.5) -> BoundingBox:
    """Grow a narrow box symmetrically to ``width >= min_aspect * height``.

    Thin glyphs ('1', 'a') have ink boxes one or two pixels wide, so without
    this the crop width is dominated by rounding.
    """
    need = min_aspect * box.height
    if box.width >= need:
        return box
    cx = box.center[0]
    return BoundingBox(cx - need / 2.0, box.y_min, cx + need / 2.0, box.y_max)


def char_patch(image, box: BoundingBox, margin: float) -> np.ndarray:
    h, w = image.shape[:2]
    box = widen(box).clamp(w, h)
    return imaging.letterbox(crop(image, expand_margin(box, margin, w, h)), CHAR_PATCH_SHAPE)


def transform_stack(patches: Sequence[np.ndarray], extractor: FeatureExtractor,
                    transforms: Sequence[TransformSpec]) -> np.ndarray:
    """Features of every transform of every patch, shape ``(N, T, D)``."""
    out = np.empty((len(patches), len(transforms), extractor.dim))
    for i, p in enumerate(patches):
        for j, t in enumerate(transforms):
            out[i, j] = extract_features(apply_transform(p, t), extractor)
    return out


def stack_taus(flow, stack: np.ndarray) -> np.ndarray:
    n, t, d = stack.shape
    return -log_prob(flow, stack.reshape(n * t, d)).reshape(n, t).mean(axis=1)


# -- models --------------------------------------------------------------------

@dataclass(frozen=True)
class Models:
    plate: Verifier
    char: Verifier
    classifier: SoftmaxClassifier
    traces: Dict[str, List[float]] = field(default_factory=dict, compare=False)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_flow(self.plate.flow, d / "nf_a.flow")
        save_flow(self.char.flow, d / "nf_b.flow")
        self.classifier.save(d / "classifier.npz")
        doc = {
            "transforms": [t.name for t in self.plate.transforms],
            "plate": {"extractor": self.plate.extractor.to_json(), "scale": self.plate.scale.to_json(),
                      "patch_shape": list(PLATE_PATCH_SHAPE)},
            "char": {"extractor": self.char.extractor.to_json(), "scale": self.char.scale.to_json(),
                     "patch_shape": list(CHAR_PATCH_SHAPE)},
            "labels": list(CHAR_LABELS),
        }
        (d / "models.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        # detector head sizes a YOLO-style network would need for these class counts
        advisory = {"plate_detector_filters": filter_count(AnchorConfig(5, 1)),
                    "char_detector_filters": filter_count(AnchorConfig(5, N_CLASSES))}
        (d / "advisory.json").write_text(json.dumps(advisory, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "Models":
        d = Path(directory)
        try:
            doc = json.loads((d / "models.json").read_text())
            transforms = tuple(TransformSpec.parse(t) for t in doc["transforms"])
            plate = Verifier(load_flow(d / "nf_a.flow"), FeatureExtractor.from_json(doc["plate"]["extractor"]),
                             transforms, ScoreScale.from_json(doc["plate"]["scale"]))
            char = Verifier(load_flow(d / "nf_b.flow"), FeatureExtractor.from_json(doc["char"]["extractor"]),
                            transforms, ScoreScale.from_json(doc["char"]["scale"]))
            clf = SoftmaxClassifier.load(d / "classifier.npz")
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot load models from {d}: {exc}") from exc
        if tuple(doc["labels"]) != CHAR_LABELS:
            raise DataError(f"{d}: label table does not match this build")
        return cls(plate, char, clf)


def _jitter(box: BoundingBox, amount: float, rng, w, h) -> BoundingBox:
    d = rng.uniform(-amount, amount, size=4)
    x0, y0, x1, y1 = (np.array(box.as_list()) + d).tolist()
    if x1 - x0 < 1 or y1 - y0 < 1:
        return box
    return BoundingBox(x0, y0, x1, y1).clamp(w, h)


def _fit_flow(stack: np.ndarray, cfg: PipelineConfig, seed: int) -> Tuple[object, ScoreScale, FitResult]:
    """Fit on most patches, then fit the score scale on taus of the held-out rest."""
    rng = np.random.default_rng(seed)
    n, _, d = stack.shape
    order = rng.permutation(n)
    n_hold = int(round(cfg.scale_holdout * n)) if n >= 10 else 0
    hold, train = order[:n_hold], order[n_hold:]
    data = stack[train].reshape(-1, d)
    if cfg.feature_noise > 0:
        data = data + rng.normal(0.0, cfg.feature_noise, size=data.shape)
    flow = init_flow(d, cfg.flow_layers, cfg.flow_hidden, seed=seed)
    tc = TrainConfig(steps=cfg.flow_steps, batch_size=cfg.batch_size, seed=seed, log_every=50)
    res = fit(flow, data, tc)
    taus = stack_taus(res.model, stack[hold] if n_hold else stack)
    return res.model, ScoreScale.fit(taus, cfg.score_mode), res


def train_models(samples: Sequence[Tuple[np.ndarray, AnnotatedImage]], cfg: PipelineConfig) -> Models:
    """Fit the plate flow, the character flow and the character classifier.

    Training patches come from ground-truth boxes with the configured
    margins plus ``jitter_copies`` randomly perturbed copies of each box.
    The classifier sees every transformed copy of each character.
    """
    rng = np.random.default_rng(cfg.seed)
    plate_patches, char_patches, char_labels = [], [], []
    for image, ann in samples:
        h, w = image.shape[:2]
        for box in ann.boxes(PLATE_LABEL):
            for k in range(cfg.jitter_copies + 1):
                b = box if k == 0 else _jitter(box, cfg.box_jitter, rng, w, h)
                plate_patches.append(plate_patch(image, b, cfg.margin_plate))
        for label, box in ann.char_objects:
            for k in range(cfg.jitter_copies + 1):
                b = box if k == 0 else _jitter(box, cfg.box_jitter, rng, w, h)
                char_patches.append(char_patch(image, b, cfg.margin_char))
                char_labels.append(LABEL_TO_INDEX[label])
    if not plate_patches or not char_patches:
        raise DataError("training set has no plate or character boxes")
    log.info("training on %d plate and %d character patches", len(plate_patches), len(char_patches))

    transforms = tuple(cfg.transforms)
    plate_stack = transform_stack(plate_patches, PLATE_EXTRACTOR, transforms)
    flow_a, scale_a, res_a = _fit_flow(plate_stack, cfg, cfg.seed)
    char_stack = transform_stack(char_patches, CHAR_EXTRACTOR, transforms)
    flow_b, scale_b, res_b = _fit_flow(char_stack, cfg, cfg.seed + 1)

    clf = train_classifier(char_stack.reshape(-1, CHAR_EXTRACTOR.dim), np.repeat(char_labels, len(transforms)),
                           epsilon=cfg.epsilon, config=ClassifierConfig(steps=cfg.classifier_steps))
    return Models(Verifier(flow_a, PLATE_EXTRACTOR, transforms, scale_a),
                  Verifier(flow_b, CHAR_EXTRACTOR, transforms, scale_b), clf,
                  traces={"nf_a": res_a.trace, "nf_b": res_b.trace})


# -- per-image processing --------------------------------------------------

@dataclass
class CharCandidate:
    box: BoundingBox
    detector_confidence: float
    probs: np.ndarray
    score: float


@dataclass
class PlateResult:
    image_id: str
    status: str
    plate: Optional[Detection] = None
    plate_text: str = ""
    layout: Optional[str] = None
    components: dict = field(default_factory=dict)
    chars: List[CharDetection] = field(default_factory=list)
    rejected: List[CharDetection] = field(default_factory=list)

    def to_json(self, meta: Optional[dict] = None) -> dict:
        def char_doc(c: CharDetection):
            return {"label": c.label, "confidence": c.confidence, "tau": c.tau, "box": c.box.as_list()}

        plate = None
        if self.plate is not None:
            plate = {"box": self.plate.box.as_list(), "confidence": self.plate.confidence,
                     "tau": self.plate.tau}
        return {
            "image_id": self.image_id,
            "status": self.status,
            "plate_text": self.plate_text,
            "layout": self.layout,
            "components": self.components,
            "plate": plate,
            "per_char": [char_doc(c) for c in self.chars],
            "rejected": [char_doc(c) for c in self.rejected],
            "meta": meta or {},
        }


@dataclass
class ScoredImage:
    """Everything score-dependent for one image, ready to be thresholded."""

    image_id: str
    plate: Optional[Detection]
    plate_candidates: List[Detection]
    chars: List[CharCandidate]
    char_mode: str = "standardized"
    swap: bool = True

    def decide(self, theta_char: float) -> PlateResult:
        if self.plate is None:
            return PlateResult(self.image_id, "no_plate")
        bound = bound_from_theta(theta_char, self.char_mode)
        accepted, rejected = [], []
        for c in self.chars:
            k = int(np.argmax(c.probs))
            det = CharDetection(CHAR_LABELS[k], c.box, float(c.detector_confidence * c.probs[k]), c.score,
                                tuple(float(p) for p in c.probs), bool(c.score <= bound))
            (accepted if det.accepted else rejected).append(det)
        if not accepted:
            return PlateResult(self.image_id, "no_chars", self.plate, rejected=rejected)
        plate = assemble_plate(accepted)
        if self.swap:
            plate = confusion_swap(plate)
        ordered = list(plate.chars)
        ordered += [c for c in accepted if all(c is not o for o in ordered)]
        return PlateResult(self.image_id, "ok", self.plate, plate.text, plate.layout, plate.components(),
                           ordered, rejected + list(plate.demoted))


def score_image(image: np.ndarray, record: DetectionRecord, models: Models, cfg: PipelineConfig) -> ScoredImage:
    h, w = image.shape[:2]
    plates = []
    for e in record.detections:
        if e.label != PLATE_LABEL:
            continue
        rep = models.plate.score(plate_patch(image, e.box.clamp(w, h), cfg.margin_plate))
        plates.append(Detection(e.box, PLATE_ID, e.confidence, tau=rep.score, image_id=record.image_id))
    best = select_best_plate(plates, models.plate.scale.bound(cfg.theta_plate))
    chars: List[CharCandidate] = []
    if best is not None:
        region = expand_margin(best.box, cfg.margin_plate, w, h)
        for e in record.detections:
            if e.label == PLATE_LABEL or e.label in ("vehicle", "motorcycle"):
                continue
            if not region.contains_point(*e.box.center):
                continue
            patch = char_patch(image, e.box.clamp(w, h), cfg.margin_char)
            probs = models.classifier.predict_proba(extract_features(patch, models.char.extractor))
            rep = models.char.score(patch)
            chars.append(CharCandidate(e.box, e.confidence, probs, rep.score))
    return ScoredImage(record.image_id, best, plates, chars, models.char.scale.mode, cfg.swap)


def run_image(image, record, models, cfg: PipelineConfig) -> PlateResult:
    return score_image(image, record, models, cfg).decide(cfg.theta_char)


# -- evaluation ----------------------------------------------------------------

def ground_truths(anns: Sequence[AnnotatedImage]) -> Tuple[List[GroundTruth], List[GroundTruth]]:
    chars, plates = [], []
    for a in anns:
        for label, box in a.char_objects:
            chars.append(GroundTruth(LABEL_TO_INDEX[label], box, a.image_id))
        for box in a.boxes(PLATE_LABEL):
            plates.append(GroundTruth(PLATE_ID, box, a.image_id))
    return chars, plates


def result_from_json(doc: dict) -> PlateResult:
    plate = None
    if doc.get("plate"):
        p = doc["plate"]
        plate = Detection(BoundingBox(*p["box"]), PLATE_ID, float(p["confidence"]), p.get("tau"), doc["image_id"])
    chars = [CharDetection(c["label"], BoundingBox(*c["box"]), float(c["confidence"]), float(c["tau"]))
             for c in doc.get("per_char", [])]
    return PlateResult(doc["image_id"], doc.get("status", "ok"), plate, doc.get("plate_text", ""),
                       doc.get("layout"), doc.get("components", {}), chars)


def evaluate(results: Sequence[PlateResult], anns: Sequence[AnnotatedImage],
             iou_threshold: float = 0.5) -> EvalReport:
    """Character AP/mAP, plate AP/recall and Levenshtein statistics.

    Images are paired by ``image_id``; an image with no result counts as an
    empty prediction.
    """
    by_id = {r.image_id: r for r in results}
    anns = sorted(anns, key=lambda a: a.image_id)
    char_gt, plate_gt = ground_truths(anns)
    char_dets, plate_dets, pairs = [], [], []
    for a in anns:
        r = by_id.get(a.image_id)
        pairs.append(("" if r is None else r.plate_text, a.plate_text or ""))
        if r is None:
            continue
        if r.plate is not None:
            plate_dets.append(Detection(r.plate.box, PLATE_ID, r.plate.confidence, image_id=a.image_id))
        for c in r.chars:
            char_dets.append(Detection(c.box, LABEL_TO_INDEX[c.label], min(1.0, c.confidence), image_id=a.image_id))
    m = match_detections(char_dets, char_gt, iou_threshold)
    report = build_report(m, dict(enumerate(CHAR_LABELS)))
    pm = match_detections(plate_dets, plate_gt, iou_threshold)
    if plate_gt:
        report.plate_ap = per_class_ap(pm).get(PLATE_ID)
        pr = precision_recall(pm, PLATE_ID)
        report.plate_recall, report.plate_precision = pr.recall, pr.precision
    if pairs:
        report.levenshtein = LevenshteinStats.from_pairs(pairs)
    report.meta = {"n_images": len(anns), "iou_threshold": iou_threshold}
    return report


@dataclass
class Calibration:
    chosen: float
    curve: list
    raw: object


def calibrate(scored: Sequence[ScoredImage], anns: Sequence[AnnotatedImage],
              grid: Sequence[float] = DEFAULT_THETA_GRID, mode: str = "standardized"):
    """Sweep the character threshold and keep the one with the lowest ALD."""
    targets = {a.image_id: a.plate_text or "" for a in anns}
    missing = [s.image_id for s in scored if s.image_id not in targets]
    if missing:
        raise DataError(f"no annotation for images {missing[:5]}")

    def ald(theta):
        results = [s.decide(theta) for s in scored]
        return LevenshteinStats.from_pairs([(r.plate_text, targets[r.image_id]) for r in results]).mean_distance

    scores = [c.score for s in scored for c in s.chars]
    return calibrate_threshold(scores, ald, sorted(grid), to_bound=lambda t: bound_from_theta(t, mode))
