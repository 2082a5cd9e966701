"""Annotation files, dataset splits and label bookkeeping.

Annotations are Pascal-VOC XML.  Fields VOC cannot carry (plate text,
layout, split, generator metadata) go into extra ``<plate_text>``,
``<layout>``, ``<split>`` and ``<meta>`` elements, which standard VOC
readers ignore.
"""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .detect import BoundingBox
from .errors import DataError
from .recognize import CHAR_LABELS

log = logging.getLogger(__name__)

OBJECT_LABELS: Tuple[str, ...] = CHAR_LABELS + ("plate", "vehicle", "motorcycle")
LABEL_IDS: Dict[str, int] = {lab: i for i, lab in enumerate(OBJECT_LABELS)}
PLATE_ID = LABEL_IDS["plate"]

SPLIT_FRACTIONS = {"test": 0.4, "validation": 0.2}


@dataclass
class AnnotatedImage:
    image_id: str
    path: str
    width: int
    height: int
    objects: List[Tuple[str, BoundingBox]] = field(default_factory=list)
    split: Optional[str] = None
    plate_text: Optional[str] = None
    layout: Optional[str] = None
    meta: dict = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def boxes(self, label: str) -> List[BoundingBox]:
        return [b for lab, b in self.objects if lab == label]

    @property
    def char_objects(self) -> List[Tuple[str, BoundingBox]]:
        return [(lab, b) for lab, b in self.objects if lab in CHAR_LABELS]


def _fmt(v: float) -> str:
    return repr(float(v))


def annotation_to_xml(ann: AnnotatedImage) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = Path(ann.path).name
    ET.SubElement(root, "path").text = ann.path
    ET.SubElement(root, "image_id").text = ann.image_id
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = "1"
    for tag in ("split", "plate_text", "layout"):
        value = getattr(ann, tag)
        if value is not None:
            ET.SubElement(root, tag).text = value
    if ann.meta:
        ET.SubElement(root, "meta").text = json.dumps(ann.meta, sort_keys=True)
    for label, box in ann.objects:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = label
        ET.SubElement(obj, "difficult").text = "0"
        bb = ET.SubElement(obj, "bndbox")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), box.as_list()):
            ET.SubElement(bb, tag).text = _fmt(v)
    ET.indent(root, space=" ")
    return ET.tostring(root, encoding="unicode") + "\n"


def write_voc(ann: AnnotatedImage, path) -> None:
    Path(path).write_text(annotation_to_xml(ann))


def _text(node, tag, default=None):
    el = node.find(tag)
    return default if el is None or el.text is None else el.text.strip()


def parse_voc(text: str, source: str = "<xml>") -> AnnotatedImage:
    """Parse one VOC document; out-of-bounds boxes are clamped with a warning."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise DataError(f"{source}: malformed XML: {exc}") from exc
    if root.tag != "annotation":
        raise DataError(f"{source}: root element is <{root.tag}>, expected <annotation>")
    try:
        width = int(float(_text(root, "size/width")))
        height = int(float(_text(root, "size/height")))
    except (TypeError, ValueError) as exc:
        raise DataError(f"{source}: missing or invalid <size>") from exc
    filename = _text(root, "filename", "")
    ann = AnnotatedImage(
        image_id=_text(root, "image_id") or Path(filename).stem or Path(source).stem,
        path=_text(root, "path") or filename,
        width=width, height=height,
        split=_text(root, "split"), plate_text=_text(root, "plate_text"), layout=_text(root, "layout"),
    )
    meta = _text(root, "meta")
    if meta:
        try:
            ann.meta = json.loads(meta)
        except json.JSONDecodeError as exc:
            raise DataError(f"{source}: <meta> is not valid JSON") from exc
    for i, obj in enumerate(root.findall("object")):
        label = _text(obj, "name", "")
        try:
            coords = [float(_text(obj, f"bndbox/{t}")) for t in ("xmin", "ymin", "xmax", "ymax")]
        except (TypeError, ValueError) as exc:
            raise DataError(f"{source}: object {i} has an invalid <bndbox>") from exc
        if label not in LABEL_IDS:
            ann.warnings.append(f"{source}: object {i}: unknown label {label!r} skipped")
            continue
        x0, y0, x1, y1 = coords
        cx0, cy0 = max(0.0, x0), max(0.0, y0)
        cx1, cy1 = min(float(width), x1), min(float(height), y1)
        if (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1):
            ann.warnings.append(f"{source}: object {i} ({label}) clamped to the {width}x{height} image")
        try:
            ann.objects.append((label, BoundingBox(cx0, cy0, cx1, cy1)))
        except ValueError:
            ann.warnings.append(f"{source}: object {i} ({label}) is empty after clamping; skipped")
    for w in ann.warnings:
        log.warning(w)
    return ann


def load_voc(dirpath) -> List[AnnotatedImage]:
    """Every ``*.xml`` file in ``dirpath`` in file-name order."""
    d = Path(dirpath)
    if not d.is_dir():
        raise DataError(f"annotation directory {d} does not exist")
    out = []
    for p in sorted(d.glob("*.xml")):
        try:
            text = p.read_text()
        except OSError as exc:
            raise DataError(f"{p.name}: {exc}") from exc
        out.append(parse_voc(text, source=p.name))
    return out


# -- splitting -----------------------------------------------------------------

def _split_counts(n: int) -> Tuple[int, int, int]:
    n_test = math.floor(SPLIT_FRACTIONS["test"] * n)
    n_val = math.floor(SPLIT_FRACTIONS["validation"] * n)
    return n - n_test - n_val, n_test, n_val


def split_dataset(items: Sequence, seed: int, labels: Optional[Sequence[Hashable]] = None):
    """Seeded 40/40/20 split into ``(train, test, validation)``.

    Test and validation sizes are floored; train takes the remainder.  With
    ``labels`` the split is stratified: each stratum gets its floored share
    and leftover slots go to the strata with the largest fractional parts.
    """
    items = list(items)
    n = len(items)
    if n < 5:
        raise ValueError(f"need at least 5 items to split, got {n}")
    rng = np.random.default_rng(seed)
    n_train, n_test, n_val = _split_counts(n)
    if labels is None:
        order = rng.permutation(n)
        test = [items[i] for i in order[:n_test]]
        val = [items[i] for i in order[n_test:n_test + n_val]]
        train = [items[i] for i in order[n_test + n_val:]]
        return train, test, val

    labels = list(labels)
    if len(labels) != n:
        raise ValueError("labels must align with items")
    strata: Dict[Hashable, List[int]] = {}
    for i, lab in enumerate(labels):
        strata.setdefault(lab, []).append(i)
    keys = sorted(strata, key=repr)
    if n < len(keys):
        raise ValueError("fewer items than strata")
    shuffled = {k: [strata[k][j] for j in rng.permutation(len(strata[k]))] for k in keys}

    def allocate(total, frac, available):
        ideal = {k: frac * len(strata[k]) for k in keys}
        got = {k: min(available[k], math.floor(ideal[k])) for k in keys}
        spare = total - sum(got.values())
        for k in sorted(keys, key=lambda k: (-(ideal[k] - math.floor(ideal[k])), keys.index(k))):
            if spare <= 0:
                break
            if got[k] < available[k]:
                got[k] += 1
                spare -= 1
        for k in keys:
            while spare > 0 and got[k] < available[k]:
                got[k] += 1
                spare -= 1
        return got

    avail = {k: len(strata[k]) for k in keys}
    n_te = allocate(n_test, SPLIT_FRACTIONS["test"], avail)
    avail = {k: avail[k] - n_te[k] for k in keys}
    n_va = allocate(n_val, SPLIT_FRACTIONS["validation"], avail)
    train, test, val = [], [], []
    for k in keys:
        idx = shuffled[k]
        a, b = n_te[k], n_te[k] + n_va[k]
        test += idx[:a]
        val += idx[a:b]
        train += idx[b:]
    return ([items[i] for i in sorted(train)], [items[i] for i in sorted(test)],
            [items[i] for i in sorted(val)])


# -- manifest -------------------------------------------------------------

def write_manifest(entries: List[dict], path) -> None:
    Path(path).write_text(json.dumps({"images": entries}, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> List[dict]:
    try:
        return json.loads(Path(path).read_text())["images"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
