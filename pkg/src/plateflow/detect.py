"""Bounding boxes, detection records and the detection post-processing steps.

Neural detection is not part of this package: detections arrive through a
:class:`DetectorSource` (JSON record files, or the synthetic oracle in
:mod:`plateflow.synth`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Protocol, Sequence

import numpy as np

from .errors import DataError

PLATE_MARGIN = 0.15
CHAR_MARGIN = 0.20
VALIDATION_PLATE_MARGIN = 0.05
IOU_MATCH = 0.5


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def clamp(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(max(0.0, self.x_min), max(0.0, self.y_min),
                           min(float(width), self.x_max), min(float(height), self.y_max))

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def as_list(self) -> List[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float
    tau: Optional[float] = None
    image_id: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    def with_tau(self, tau: float) -> "Detection":
        return replace(self, tau=float(tau))


@dataclass(frozen=True)
class AnchorConfig:
    num_anchors: int = 5
    num_classes: int = 1

    def __post_init__(self):
        if self.num_anchors < 1 or self.num_classes < 1:
            raise ValueError("anchor and class counts must be positive")


def filter_count(cfg: AnchorConfig) -> int:
    """Filters in the last detector layer: ``(classes + 5) * anchors``."""
    return (cfg.num_classes + 5) * cfg.num_anchors


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def expand_margin(box: BoundingBox, margin: float, image_w: float, image_h: float) -> BoundingBox:
    """Push every side outward by ``margin`` times the box size, then clamp."""
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    dx = margin * box.width
    dy = margin * box.height
    x0 = max(0.0, box.x_min - dx)
    y0 = max(0.0, box.y_min - dy)
    x1 = min(float(image_w), box.x_max + dx)
    y1 = min(float(image_h), box.y_max + dy)
    assert x0 < x1 and y0 < y1, "margin expansion produced an empty box"
    return BoundingBox(x0, y0, x1, y1)


def round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def crop(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Pixel-exact sub-image of the box, rounded half away from zero and clamped.

    Rounded coordinates are half-open: a unit box at the origin yields the
    single pixel ``(0, 0)``.
    """
    h, w = image.shape[:2]
    x0 = max(0, round_half_away(box.x_min))
    y0 = max(0, round_half_away(box.y_min))
    x1 = min(w, round_half_away(box.x_max))
    y1 = min(h, round_half_away(box.y_max))
    if x1 <= x0 or y1 <= y0:
        raise DataError(f"box {box.as_list()} does not intersect the {w}x{h} image")
    return image[y0:y1, x0:x1].copy()


def select_best_plate(dets: Sequence[Detection], theta_bound: float) -> Optional[Detection]:
    """Flow veto followed by keep-the-most-confident.

    Detections whose ``tau`` exceeds ``theta_bound`` are dropped.  Among the
    rest the highest confidence wins; ties go to the lower ``tau``, then the
    smaller class id, then the leftmost box.
    """
    survivors = []
    for d in dets:
        if d.tau is None:
            raise ValueError("every detection needs a tau score before selection")
        if d.tau <= theta_bound:
            survivors.append(d)
    if not survivors:
        return None
    return min(survivors, key=lambda d: (-d.confidence, d.tau, d.class_id, d.box.x_min, d.box.y_min))


class DetectorSource(Protocol):
    """Anything that can produce detections for an image.

    A neural detector would implement this; the package ships file-backed
    and synthetic-oracle sources.
    """

    def detect(self, image_id: str, image: np.ndarray) -> "DetectionRecord": ...


# -- detection record files ------------------------------------------------

@dataclass
class RecordEntry:
    label: str
    box: BoundingBox
    confidence: float


@dataclass
class DetectionRecord:
    """One image's detections as stored on disk.

    JSON form::

        {"image_id": ..., "width": W, "height": H,
         "detections": [{"class": "plate", "x_min": .., "y_min": ..,
                         "x_max": .., "y_max": .., "confidence": ..}, ...]}
    """

    image_id: str
    width: int
    height: int
    detections: List[RecordEntry] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "detections": [
                {"class": e.label, "x_min": e.box.x_min, "y_min": e.box.y_min,
                 "x_max": e.box.x_max, "y_max": e.box.y_max, "confidence": e.confidence}
                for e in self.detections
            ],
        }

    @classmethod
    def from_json(cls, doc: dict, source: str = "<record>") -> "DetectionRecord":
        try:
            entries = []
            for i, d in enumerate(doc["detections"]):
                box = BoundingBox(float(d["x_min"]), float(d["y_min"]), float(d["x_max"]), float(d["y_max"]))
                conf = float(d["confidence"])
                if not 0.0 <= conf <= 1.0:
                    raise ValueError(f"detection {i}: confidence {conf} outside [0, 1]")
                entries.append(RecordEntry(str(d["class"]), box, conf))
            return cls(str(doc["image_id"]), int(doc["width"]), int(doc["height"]), entries)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{source}: invalid detection record: {exc}") from exc


def write_detection_record(record: DetectionRecord, path) -> None:
    Path(path).write_text(json.dumps(record.to_json(), indent=1) + "\n")


def read_detection_record(path) -> DetectionRecord:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path.name}: cannot read detection record: {exc}") from exc
    return DetectionRecord.from_json(doc, source=path.name)


class FileDetectorSource:
    """Reads ``<image_id>.json`` records from a directory."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def detect(self, image_id: str, image: np.ndarray = None) -> DetectionRecord:
        path = self.directory / f"{image_id}.json"
        if not path.exists():
            raise DataError(f"no detection record for image {image_id!r} in {self.directory}")
        return read_detection_record(path)
