"""Character classification and Moroccan plate-string assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from statistics import median
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detect import BoundingBox
from .errors import DataError, DivergenceError
from .features import FeatureExtractor, extract_features
from .flow_core import FlowModel
from .scoring import DEFAULT_TRANSFORMS, ScoreScale, TransformSpec, tau_score

CHAR_LABELS: Tuple[str, ...] = (
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "a", "b", "d", "h", "j", "m", "p", "waw", "ww",
)
N_CLASSES = len(CHAR_LABELS)
LABEL_TO_INDEX = {lab: i for i, lab in enumerate(CHAR_LABELS)}
DIGITS = frozenset(CHAR_LABELS[:10])
ARABIC = frozenset(CHAR_LABELS[10:])

# slot-consistency repairs; look-alike pairs observed between glyph classes
LETTER_TO_DIGIT = {"a": "1", "b": "6", "d": "0"}
DIGIT_TO_LETTER = {"1": "a"}

CHAR_PATCH_SHAPE = (40, 24)     # rows, cols
MAX_VEHICLE_DIGITS = 5


def write_label_map(path) -> None:
    Path(path).write_text("".join(f"{i},{lab}\n" for i, lab in enumerate(CHAR_LABELS)))


def read_label_map(path) -> Dict[int, str]:
    mapping = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        idx, sep, lab = line.partition(",")
        if not sep:
            raise DataError(f"{path}:{n}: expected 'index,label'")
        mapping[int(idx)] = lab.strip()
    if mapping != dict(enumerate(CHAR_LABELS)):
        raise DataError(f"{path}: label map differs from the fixed 19-class table")
    return mapping


# -- classifier ------------------------------------------------------------

def smooth_targets(labels: Sequence[int], epsilon: float, n_classes: int = N_CLASSES) -> np.ndarray:
    """``(1 - eps) * onehot + eps / n_classes`` for each label."""
    if not 0.0 <= epsilon < 0.5:
        raise ValueError(f"label smoothing must lie in [0, 0.5), got {epsilon}")
    labels = np.asarray(labels, dtype=int)
    out = np.full((len(labels), n_classes), epsilon / n_classes)
    out[np.arange(len(labels)), labels] += 1.0 - epsilon
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SoftmaxClassifier:
    weights: np.ndarray     # (classes, D)
    bias: np.ndarray        # (classes,)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(np.asarray(x, dtype=np.float64) @ self.weights.T + self.bias)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=-1)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, weights=self.weights, bias=self.bias)

    @classmethod
    def load(cls, path) -> "SoftmaxClassifier":
        with np.load(path) as z:
            return cls(z["weights"].copy(), z["bias"].copy())


@dataclass
class ClassifierConfig:
    steps: int = 600
    learning_rate: float = 0.5
    l2: float = 1e-4
    n_classes: int = N_CLASSES


def train_classifier(features, labels, epsilon: float = 0.1,
                     config: Optional[ClassifierConfig] = None) -> SoftmaxClassifier:
    """Multinomial logistic regression on label-smoothed targets.

    Full-batch gradient descent from zero weights, so the result is
    deterministic.
    """
    config = config or ClassifierConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    missing = sorted(set(range(config.n_classes)) - set(y.tolist()))
    if missing:
        raise DataError(f"no training samples for classes {[CHAR_LABELS[i] if config.n_classes == N_CLASSES else i for i in missing]}")
    targets = smooth_targets(y, epsilon, config.n_classes)
    n = len(x)
    w = np.zeros((config.n_classes, x.shape[1]))
    b = np.zeros(config.n_classes)
    for step in range(config.steps):
        p = softmax(x @ w.T + b)
        g = (p - targets) / n
        gw = g.T @ x + config.l2 * w
        gb = g.sum(axis=0)
        w -= config.learning_rate * gw
        b -= config.learning_rate * gb
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise DivergenceError(f"classifier weights became non-finite at step {step}", step=step)
    w.flags.writeable = False
    b.flags.writeable = False
    return SoftmaxClassifier(w, b)


def cross_entropy(clf: SoftmaxClassifier, features, labels, epsilon: float = 0.0) -> float:
    p = clf.predict_proba(features)
    t = smooth_targets(labels, epsilon, p.shape[1])
    return float(-np.mean(np.sum(t * np.log(p), axis=1)))


# -- per-character verification ------------------------------------------

@dataclass(frozen=True)
class CharDetection:
    label: str
    box: BoundingBox
    confidence: float
    tau: float
    softmax: Tuple[float, ...] = ()
    accepted: bool = True

    @property
    def index(self) -> int:
        return LABEL_TO_INDEX[self.label]

    @property
    def is_arabic(self) -> bool:
        return self.label in ARABIC


def classify_char(patch, classifier: SoftmaxClassifier, flow: FlowModel, ex: FeatureExtractor,
                  transforms: Sequence[TransformSpec] = DEFAULT_TRANSFORMS, theta: float = math.inf, *,
                  scale: ScoreScale = ScoreScale("raw"), box: Optional[BoundingBox] = None,
                  detector_confidence: float = 1.0) -> CharDetection:
    """Softmax class plus flow cross-check for one normalized character patch.

    ``theta`` is the acceptance bound on the (scaled) score.  Rejected
    patches come back with ``accepted=False`` so callers can re-threshold.
    The confidence is the detector confidence times the winning probability.
    """
    probs = classifier.predict_proba(extract_features(patch, ex))
    k = int(np.argmax(probs))
    rep = tau_score(flow, ex, patch, transforms)
    score = scale.apply(rep.tau)
    if box is None:
        h, w = np.asarray(patch).shape[:2]
        box = BoundingBox(0.0, 0.0, float(w), float(h))
    return CharDetection(
        label=CHAR_LABELS[k], box=box, confidence=float(detector_confidence * probs[k]),
        tau=float(score), softmax=tuple(float(p) for p in probs), accepted=bool(score <= theta),
    )


# -- plate assembly ------------------------------------------------------------

LAYOUTS = ("new", "old", "numeric_only")


@dataclass(frozen=True)
class PlateString:
    """Assembled plate.

    ``tokens`` and ``slots`` are aligned and in canonical order
    (vehicle number, series character, province).  Slots are ``vehicle``,
    ``series``, ``province`` or ``digits`` (numeric-only plates).
    """

    layout: str
    tokens: Tuple[str, ...] = ()
    slots: Tuple[str, ...] = ()
    chars: Tuple[CharDetection, ...] = ()
    demoted: Tuple[CharDetection, ...] = ()

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if len(self.tokens) != len(self.slots):
            raise ValueError("tokens and slots must align")

    @property
    def text(self) -> str:
        return "".join(self.tokens)

    def _component(self, slot: str) -> Optional[str]:
        parts = [t for t, s in zip(self.tokens, self.slots) if s == slot]
        return "".join(parts) if parts else None

    @property
    def vehicle_number(self) -> Optional[str]:
        return self._component("vehicle")

    @property
    def province_number(self) -> Optional[str]:
        return self._component("province")

    @property
    def series_char(self) -> Optional[str]:
        return self._component("series")

    def components(self) -> dict:
        return {"vehicle_number": self.vehicle_number, "series_char": self.series_char,
                "province_number": self.province_number}

    @classmethod
    def from_components(cls, layout: str, vehicle: str = "", series: str = "", province: str = "",
                        digits: str = "") -> "PlateString":
        """Build from component strings; multi-letter labels are not split."""
        if layout == "numeric_only":
            toks = tuple(digits)
            return cls(layout, toks, ("digits",) * len(toks))
        toks = list(vehicle) + ([series] if series else []) + list(province)
        slots = ["vehicle"] * len(vehicle) + (["series"] if series else []) + ["province"] * len(province)
        return cls(layout, tuple(toks), tuple(slots))


def _row_key(c: CharDetection):
    x, y = c.box.center
    return (y, x, -c.confidence, c.label)


def _col_key(c: CharDetection):
    x, y = c.box.center
    return (x, y, -c.confidence, c.label)


def split_rows(chars: Sequence[CharDetection], gap_factor: float = 0.5) -> List[List[CharDetection]]:
    """Cluster by vertical centre, then sort each row left to right."""
    ordered = sorted(chars, key=_row_key)
    limit = gap_factor * median(c.box.height for c in ordered)
    rows = [[ordered[0]]]
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.box.center[1] - prev.box.center[1] > limit:
            rows.append([])
        rows[-1].append(cur)
    return [sorted(r, key=_col_key) for r in rows]


def split_groups(row: Sequence[CharDetection], gap_factor: float = 0.6,
                 height: Optional[float] = None) -> List[List[CharDetection]]:
    """Break a sorted row where the empty space between neighbouring boxes
    exceeds ``gap_factor`` times the median character height."""
    if len(row) < 2:
        return [list(row)]
    if height is None:
        height = median(c.box.height for c in row)
    groups = [[row[0]]]
    for a, b in zip(row, row[1:]):
        if b.box.x_min - a.box.x_max > gap_factor * height:
            groups.append([])
        groups[-1].append(b)
    return groups


def assemble_plate(chars: Sequence[CharDetection]) -> PlateString:
    """Order accepted characters into a plate string.

    Rows are split at vertical-centre gaps above half the median character
    height and read top to bottom, each left to right.  With one Arabic
    character: digits before it are the vehicle number and digits after it
    the province (new layout); if nothing precedes it, the first digit group
    after it is the province and the rest the vehicle number (old layout).
    Without one, digits are read in order (numeric-only), unless a single
    row splits into three gap-separated groups whose middle holds a single
    character; that character then occupies the series slot.

    Extra Arabic characters keep their reading position but are listed in
    ``demoted``; only the most confident one fills the series slot.
    """
    chars = list(chars)
    if not chars:
        raise ValueError("cannot assemble a plate from zero characters")
    rows = split_rows(chars)
    height = median(c.box.height for c in chars)
    sequence = [c for r in rows for c in r]
    arabic = [c for c in sequence if c.is_arabic]
    series = None
    demoted: List[CharDetection] = []
    if arabic:
        series = min(arabic, key=lambda c: (-c.confidence, c.tau, _col_key(c)))
        demoted = [c for c in arabic if c is not series]

    if series is None:
        if len(rows) == 1:
            groups = split_groups(rows[0], height=height)
            if len(groups) == 3 and len(groups[1]) == 1:
                vehicle, mid, province = groups
                return _build("new", vehicle, mid[0], province, demoted)
        return PlateString("numeric_only", tuple(c.label for c in sequence),
                           ("digits",) * len(sequence), tuple(sequence), ())

    pos = next(i for i, c in enumerate(sequence) if c is series)
    before, after = sequence[:pos], sequence[pos + 1:]
    if before:
        return _build("new", before, series, after, demoted)

    # old layout: series first, then province group, then vehicle number
    groups: List[List[CharDetection]] = []
    for r in rows:
        rest = [c for c in r if c is not series]
        if rest:
            groups.extend(split_groups(rest, height=height))
    if len(groups) >= 2:
        province = groups[0]
        vehicle = [c for g in groups[1:] for c in g]
    else:
        # no visible break: vehicle numbers have at most five digits
        cut = max(0, len(after) - MAX_VEHICLE_DIGITS)
        province, vehicle = after[:cut], after[cut:]
    return _build("old", vehicle, series, province, demoted)


def _build(layout, vehicle, series, province, demoted) -> PlateString:
    chars = list(vehicle) + [series] + list(province)
    slots = ["vehicle"] * len(vehicle) + ["series"] + ["province"] * len(province)
    return PlateString(layout, tuple(c.label for c in chars), tuple(slots), tuple(chars), tuple(demoted))


def confusion_swap(plate: PlateString, letter_to_digit: Optional[dict] = None,
                   digit_to_letter: Optional[dict] = None) -> PlateString:
    """Repair characters that contradict their slot type.

    Digit slots map look-alike letters to digits; the series slot maps
    look-alike digits to letters.  Numeric-only plates are returned as is.
    """
    if plate.layout == "numeric_only":
        return plate
    l2d = LETTER_TO_DIGIT if letter_to_digit is None else letter_to_digit
    d2l = DIGIT_TO_LETTER if digit_to_letter is None else digit_to_letter
    tokens = list(plate.tokens)
    for i, (tok, slot) in enumerate(zip(plate.tokens, plate.slots)):
        if slot == "series":
            if tok in DIGITS and tok in d2l:
                tokens[i] = d2l[tok]
        elif tok in ARABIC and tok in l2d:
            tokens[i] = l2d[tok]
    if tokens == list(plate.tokens):
        return plate
    return replace(plate, tokens=tuple(tokens))
