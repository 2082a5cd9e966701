"""Transformation-ensemble anomaly scoring over a trained flow.

The score of a patch is the mean negative log-likelihood of its features
over a fixed set of image transforms.  Low scores mean in-distribution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import imaging
from .errors import CalibrationError, ConfigError, DataError, NumericError
from .features import FeatureExtractor, extract_features
from .flow_core import FlowModel, log_prob

KINDS = ("identity", "rotate", "crop", "brightness", "contrast")
MIN_CROP_SIDE = 4


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "identity"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        v = self.value
        if self.kind == "rotate" and not -30.0 <= v <= 30.0:
            raise ValueError(f"rotation {v} deg outside [-30, 30]")
        if self.kind == "crop" and not 0.0 <= v <= 0.3:
            raise ValueError(f"crop margin {v} outside [0, 0.3]")
        if self.kind == "brightness" and not -0.25 <= v <= 0.25:
            raise ValueError(f"brightness shift {v} outside [-0.25, 0.25]")
        if self.kind == "contrast" and not 0.75 <= v <= 1.33:
            raise ValueError(f"contrast gain {v} outside [0.75, 1.33]")

    @property
    def name(self) -> str:
        return "identity" if self.kind == "identity" else f"{self.kind}:{self.value:g}"

    @classmethod
    def parse(cls, text: str) -> "TransformSpec":
        text = text.strip()
        if text == "identity":
            return cls()
        kind, _, value = text.partition(":")
        try:
            return cls(kind, float(value))
        except ValueError as exc:
            raise ConfigError(f"bad transform {text!r}: {exc}") from exc


DEFAULT_TRANSFORMS: Tuple[TransformSpec, ...] = (
    TransformSpec(),
    TransformSpec("rotate", 10.0), TransformSpec("rotate", -10.0),
    TransformSpec("rotate", 20.0), TransformSpec("rotate", -20.0),
    TransformSpec("crop", 0.05), TransformSpec("crop", 0.10),
    TransformSpec("brightness", 0.1), TransformSpec("brightness", -0.1),
    TransformSpec("contrast", 0.8), TransformSpec("contrast", 1.25),
)


def parse_transforms(text: str) -> Tuple[TransformSpec, ...]:
    specs = tuple(TransformSpec.parse(t) for t in text.split(",") if t.strip())
    if not specs:
        raise ConfigError("transform list is empty")
    return specs


def apply_transform(patch: np.ndarray, t: TransformSpec) -> np.ndarray:
    img = np.asarray(patch, dtype=np.float64)
    if img.size == 0:
        raise ValueError("cannot transform an empty patch")
    if t.kind == "identity":
        return img.copy()
    if t.kind == "rotate":
        return imaging.rotate(img, t.value)
    if t.kind == "crop":
        h, w = img.shape
        dy, dx = int(round(t.value * h)), int(round(t.value * w))
        if h - 2 * dy < MIN_CROP_SIDE or w - 2 * dx < MIN_CROP_SIDE:
            raise ValueError(f"crop margin {t.value} leaves less than {MIN_CROP_SIDE} px of a {h}x{w} patch")
        return imaging.resize_bilinear(img[dy:h - dy, dx:w - dx], (h, w))
    if t.kind == "brightness":
        return np.clip(img + t.value, 0.0, 1.0)
    return np.clip(0.5 + t.value * (img - 0.5), 0.0, 1.0)


@dataclass
class ScoreReport:
    """Per-transform NLLs, their mean ``tau`` and the thresholded ``score``.

    ``score`` equals ``tau`` for raw scoring and the standardized value when
    a :class:`ScoreScale` is applied.
    """

    nlls: Tuple[float, ...]
    tau: float
    score: float
    transforms: Tuple[str, ...] = ()
    failures: Tuple[Tuple[str, str], ...] = ()
    decision: Optional[bool] = None


def transformed_features(extractor, patch, transforms) -> Tuple[np.ndarray, List[str], List[Tuple[str, str]]]:
    feats, names, failures = [], [], []
    for t in transforms:
        try:
            feats.append(extract_features(apply_transform(patch, t), extractor))
            names.append(t.name)
        except (ValueError, NumericError) as exc:
            failures.append((t.name, str(exc)))
    return (np.array(feats) if feats else np.empty((0, extractor.dim))), names, failures


def tau_score(model: FlowModel, extractor: FeatureExtractor, patch, transforms: Sequence[TransformSpec]) -> ScoreReport:
    if not transforms:
        raise ValueError("tau_score needs at least one transform")
    feats, names, failures = transformed_features(extractor, patch, transforms)
    nlls = []
    kept = []
    for name, f in zip(names, feats):
        try:
            nlls.append(-log_prob(model, f))
            kept.append(name)
        except NumericError as exc:
            failures.append((name, str(exc)))
    if not nlls:
        detail = "; ".join(f"{n}: {m}" for n, m in failures)
        raise DataError(f"every transform failed: {detail}")
    tau = float(np.mean(nlls))
    return ScoreReport(tuple(float(v) for v in nlls), tau, tau, tuple(kept), tuple(failures))


def classify(report: ScoreReport, theta: float) -> bool:
    """In-distribution iff the report's score is at most the bound ``theta``."""
    if not math.isfinite(theta):
        raise ValueError("threshold must be finite")
    return report.score <= theta


@dataclass(frozen=True)
class ScoreScale:
    """Maps raw taus to thresholdable scores.

    ``standardized`` z-scores against the training-set tau distribution;
    ``raw`` passes taus through.
    """

    mode: str = "standardized"
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, taus, mode: str = "standardized") -> "ScoreScale":
        taus = np.asarray(taus, dtype=np.float64)
        if mode == "raw":
            return cls("raw")
        sd = float(taus.std())
        return cls("standardized", float(taus.mean()), sd if sd > 1e-12 else 1.0)

    def apply(self, tau: float) -> float:
        if self.mode == "raw":
            return float(tau)
        return (float(tau) - self.mean) / self.std

    def bound(self, theta: float) -> float:
        """Acceptance bound on the score for a threshold ``theta`` in (0, 1].

        In standardized mode ``exp(-score)`` is read as a likelihood
        relative to a typical training sample, and a patch passes when that
        relative likelihood is at least ``theta``; the bound on the score is
        therefore ``-log(theta)``.  In raw mode ``theta`` is already a bound
        on ``tau``.
        """
        return bound_from_theta(theta, self.mode)

    def to_json(self) -> dict:
        return {"mode": self.mode, "mean": self.mean, "std": self.std}

    @classmethod
    def from_json(cls, doc: dict) -> "ScoreScale":
        return cls(doc["mode"], float(doc["mean"]), float(doc["std"]))


def bound_from_theta(theta: float, mode: str = "standardized") -> float:
    if mode == "raw":
        return float(theta)
    if not 0.0 < theta <= 1.0:
        raise ConfigError(f"standardized threshold must lie in (0, 1], got {theta}")
    return -math.log(theta)


@dataclass(frozen=True)
class Verifier:
    """A trained flow plus everything needed to score raw patches with it."""

    flow: FlowModel
    extractor: FeatureExtractor
    transforms: Tuple[TransformSpec, ...] = DEFAULT_TRANSFORMS
    scale: ScoreScale = ScoreScale("raw")

    def score(self, patch) -> ScoreReport:
        rep = tau_score(self.flow, self.extractor, patch, self.transforms)
        rep.score = self.scale.apply(rep.tau)
        return rep

    def accepts(self, patch, theta: float) -> bool:
        rep = self.score(patch)
        return classify(rep, self.scale.bound(theta))


# -- threshold calibration -------------------------------------------------

@dataclass
class CurvePoint:
    theta: float
    objective: float
    n_accepted: int
    n_rejected: int


@dataclass
class ThresholdCalibration:
    grid: Tuple[float, ...]
    curve: List[CurvePoint] = field(default_factory=list)
    chosen: Optional[float] = None

    @property
    def objectives(self) -> List[float]:
        return [p.objective for p in self.curve]


def calibrate_threshold(scores_pos: Sequence[float], objective: Callable[[float], float],
                        grid: Sequence[float],
                        to_bound: Callable[[float], float] = float) -> ThresholdCalibration:
    """Evaluate ``objective`` at every grid value and keep the arg-min.

    ``grid`` must be sorted ascending; ties go to the smaller value.  The
    accepted/rejected counts report how many of ``scores_pos`` pass the bound
    ``to_bound(theta)``.
    """
    grid = tuple(float(g) for g in grid)
    if not grid:
        raise ValueError("threshold grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be sorted ascending")
    scores = np.asarray(scores_pos, dtype=np.float64)
    cal = ThresholdCalibration(grid)
    best = None
    for theta in grid:
        try:
            value = float(objective(theta))
        except Exception as exc:
            raise CalibrationError(f"objective failed at theta={theta}: {exc}", partial=cal) from exc
        if not math.isfinite(value):
            raise CalibrationError(f"objective is not finite at theta={theta}", partial=cal)
        n_acc = int(np.sum(scores <= to_bound(theta)))
        cal.curve.append(CurvePoint(theta, value, n_acc, len(scores) - n_acc))
        if best is None or value < best:
            best, cal.chosen = value, theta
    return cal


def write_calibration_csv(cal: ThresholdCalibration, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "objective", "n_accepted", "n_rejected"])
        for p in cal.curve:
            w.writerow([repr(p.theta), repr(p.objective), p.n_accepted, p.n_rejected])


def roc_sweep(pos_scores, neg_scores) -> Tuple[np.ndarray, np.ndarray]:
    """True/false acceptance rates as the bound sweeps every observed score.

    Positives are in-distribution samples; a sample is accepted when its
    score is at most the bound.
    """
    pos = np.sort(np.asarray(pos_scores, dtype=np.float64))
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    bounds = np.concatenate([[-np.inf], np.unique(np.concatenate([pos, neg]))])
    tpr = np.searchsorted(pos, bounds, side="right") / len(pos)
    fpr = np.searchsorted(neg, bounds, side="right") / len(neg)
    return fpr, tpr


def roc_auc(pos_scores, neg_scores) -> float:
    fpr, tpr = roc_sweep(pos_scores, neg_scores)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
