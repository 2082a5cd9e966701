"""Detection and recognition metrics: matching, AP/mAP and edit distances."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .detect import BoundingBox, Detection, iou


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: BoundingBox
    image_id: Optional[str] = None


@dataclass
class MatchResult:
    """Greedy matching outcome.

    ``ranked[c]`` lists ``(confidence, is_tp)`` for class ``c`` in the order
    detections were matched (descending confidence, stable).
    """

    tp: Dict[int, int] = field(default_factory=dict)
    fp: Dict[int, int] = field(default_factory=dict)
    fn: Dict[int, int] = field(default_factory=dict)
    n_gt: Dict[int, int] = field(default_factory=dict)
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    ranked: Dict[int, List[Tuple[float, bool]]] = field(default_factory=dict)

    @property
    def classes(self) -> List[int]:
        return sorted(set(self.n_gt) | set(self.ranked))

    def totals(self) -> Tuple[int, int, int]:
        return sum(self.tp.values()), sum(self.fp.values()), sum(self.fn.values())


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_threshold: float = 0.5) -> MatchResult:
    """Per image and class, match detections to ground truths greedily.

    Detections are visited in descending confidence.  Each takes the
    unmatched ground truth of its image and class with the highest IoU
    (lower index on ties); it is a true positive when that IoU reaches
    ``iou_threshold``.  ``pairs`` holds ``(det_index, gt_index, iou)``.
    """
    res = MatchResult()
    by_key = defaultdict(list)
    for gi, g in enumerate(gts):
        by_key[(g.image_id, g.class_id)].append(gi)
        res.n_gt[g.class_id] = res.n_gt.get(g.class_id, 0) + 1
    matched = set()
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    for di in order:
        d = dets[di]
        c = d.class_id
        best, best_gi = -1.0, None
        for gi in by_key.get((d.image_id, c), ()):
            if gi in matched:
                continue
            v = iou(d.box, gts[gi].box)
            if v > best:
                best, best_gi = v, gi
        is_tp = best_gi is not None and best >= iou_threshold
        if is_tp:
            matched.add(best_gi)
            res.pairs.append((di, best_gi, best))
            res.tp[c] = res.tp.get(c, 0) + 1
        else:
            res.fp[c] = res.fp.get(c, 0) + 1
        res.ranked.setdefault(c, []).append((d.confidence, is_tp))
    for c, n in res.n_gt.items():
        res.fn[c] = n - res.tp.get(c, 0)
    for c in res.classes:
        res.tp.setdefault(c, 0)
        res.fp.setdefault(c, 0)
        res.fn.setdefault(c, 0)
    return res


class PrecisionRecall(NamedTuple):
    precision: float
    recall: float
    precision_undefined: bool = False
    recall_undefined: bool = False


def precision_recall_counts(tp: int, fp: int, fn: int) -> PrecisionRecall:
    p_undef = tp + fp == 0
    r_undef = tp + fn == 0
    return PrecisionRecall(0.0 if p_undef else tp / (tp + fp),
                           0.0 if r_undef else tp / (tp + fn), p_undef, r_undef)


def precision_recall(m: MatchResult, class_id: Optional[int] = None) -> PrecisionRecall:
    """Micro-averaged over classes, or for one class; 0/0 gives 0 and a flag."""
    if class_id is None:
        return precision_recall_counts(*m.totals())
    return precision_recall_counts(m.tp.get(class_id, 0), m.fp.get(class_id, 0), m.fn.get(class_id, 0))


def average_precision(flags: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP list.

    ``flags`` must already be in descending-confidence order.  The precision
    curve is replaced by its running maximum from the right and integrated
    over recall.
    """
    if n_gt < 1:
        raise ValueError("average precision needs at least one ground truth")
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = np.concatenate([[0.0], tp / n_gt])
    precision = np.concatenate([[0.0], tp / (tp + fp)])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * envelope[1:]))


def ranked_flags(entries: Sequence[Tuple[float, bool]]) -> List[bool]:
    order = sorted(range(len(entries)), key=lambda i: -entries[i][0])
    return [entries[i][1] for i in order]


def per_class_ap(m: MatchResult) -> Dict[int, float]:
    """AP for every class with at least one ground truth."""
    return {c: average_precision(ranked_flags(m.ranked.get(c, [])), n)
            for c, n in sorted(m.n_gt.items()) if n > 0}


def mean_ap(aps) -> float:
    values = list(aps.values()) if isinstance(aps, dict) else list(aps)
    if not values:
        raise ValueError("mean_ap needs at least one class")
    return float(sum(values) / len(values))


# -- edit distances ----------------------------------------------------------

def _edit_distance(a: Sequence, b: Sequence, sub_cost: int) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (0 if ca == cb else sub_cost))
        prev = cur
    return prev[-1]


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance; works on any sequences."""
    return _edit_distance(a, b, 1)


def levenshtein_ratio(a: Sequence, b: Sequence) -> float:
    """``(|a| + |b| - d2) / (|a| + |b|)`` where ``d2`` charges 2 per substitution."""
    total = len(a) + len(b)
    if total == 0:
        return 1.0
    return (total - _edit_distance(a, b, 2)) / total


def average_levenshtein(pairs: Iterable[Tuple[Sequence, Sequence]]) -> float:
    dists = [levenshtein(p, t) for p, t in pairs]
    if not dists:
        raise ValueError("average_levenshtein needs at least one pair")
    return float(sum(dists) / len(dists))


@dataclass
class LevenshteinStats:
    n: int
    mean_distance: float
    mean_ratio: float
    exact_match_rate: float

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[str, str]]) -> "LevenshteinStats":
        pairs = list(pairs)
        if not pairs:
            raise ValueError("no prediction/target pairs")
        ratios = [levenshtein_ratio(p, t) for p, t in pairs]
        exact = sum(1 for p, t in pairs if p == t)
        return cls(len(pairs), average_levenshtein(pairs), float(np.mean(ratios)), exact / len(pairs))


def read_pairs_csv(path) -> List[Tuple[str, str, str]]:
    """Rows of ``(image_id, predicted, target)`` from a CSV with a header."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_id", "predicted", "target"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [(r["image_id"], r["predicted"], r["target"]) for r in reader]


# -- report --------------------------------------------------------------------

@dataclass
class ClassRow:
    label: str
    n_gt: int
    tp: int
    fp: int
    fn: int
    ap: Optional[float]
    precision: float
    recall: float


@dataclass
class EvalReport:
    classes: List[ClassRow] = field(default_factory=list)
    mAP: Optional[float] = None
    precision: float = 0.0
    recall: float = 0.0
    plate_ap: Optional[float] = None
    plate_recall: Optional[float] = None
    plate_precision: Optional[float] = None
    levenshtein: Optional[LevenshteinStats] = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = asdict(self)
        return doc

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "n_gt", "tp", "fp", "fn", "ap", "precision", "recall"])
            for r in self.classes:
                w.writerow([r.label, r.n_gt, r.tp, r.fp, r.fn, "" if r.ap is None else repr(r.ap),
                            repr(r.precision), repr(r.recall)])
            tp = sum(r.tp for r in self.classes)
            fp = sum(r.fp for r in self.classes)
            fn = sum(r.fn for r in self.classes)
            w.writerow(["__summary__", sum(r.n_gt for r in self.classes), tp, fp, fn,
                        "" if self.mAP is None else repr(self.mAP), repr(self.precision), repr(self.recall)])


def build_report(m: MatchResult, labels: Dict[int, str]) -> EvalReport:
    aps = per_class_ap(m)
    rows = []
    for c in m.classes:
        pr = precision_recall(m, c)
        rows.append(ClassRow(labels.get(c, str(c)), m.n_gt.get(c, 0), m.tp[c], m.fp[c], m.fn[c],
                             aps.get(c), pr.precision, pr.recall))
    total = precision_recall(m)
    return EvalReport(rows, mean_ap(aps) if aps else None, total.precision, total.recall)
