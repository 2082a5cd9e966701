"""Synthetic plates and scenes with exact ground truth.

Glyphs are fixed 5x7 bitmaps scaled by an integer factor.  A scene is a
textured background holding one plate and, optionally, a plate-sized
distractor patch the oracle detector reports as a competing plate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .detect import BoundingBox, DetectionRecord, RecordEntry
from .data_io import AnnotatedImage
from .imaging import rotate
from .recognize import ARABIC, PlateString

_GLYPH_ROWS = {
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
    "a": ("..#..", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "b": (".....", ".....", "#...#", "#...#", "#####", ".....", "..#.."),
    "d": (".....", ".##..", "...#.", "....#", "....#", "#####", "....."),
    "h": ("#####", "...#.", "..#..", ".#...", "#....", "#....", ".####"),
    "j": (".....", "####.", "...#.", "..#..", ".#...", ".#..#", "..##."),
    "m": (".....", "..##.", ".#..#", "..##.", "..#..", "..#..", "..#.."),
    "p": (".#.#.", ".....", "#...#", "#...#", "#####", ".....", "....."),
    "waw": (".....", "..##.", ".#..#", "..###", "....#", "...#.", "##..."),
    "ww": ("#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#", "....."),
}

GLYPHS: Dict[str, np.ndarray] = {
    k: np.array([[ch == "#" for ch in row] for row in rows]) for k, rows in _GLYPH_ROWS.items()
}

PLATE_BG = 0.88
INK = 0.08
LAYOUT_MIX = (("new", 0.85), ("numeric_only", 0.10), ("old", 0.05))
# skewed sampling: these series letters dominate real plate collections
FREQUENT_SERIES = ("a", "b", "d", "h")


@dataclass(frozen=True)
class SyntheticPlateSpec:
    layout: str = "new"
    vehicle_number: int = 12345
    province: int = 6
    series_char: str = "a"
    noise: float = 0.0
    rotation: float = 0.0
    scale: int = 3
    distractor: bool = False

    def __post_init__(self):
        if self.layout not in ("new", "old", "numeric_only"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if not 0 <= self.vehicle_number <= 99999:
            raise ValueError("vehicle number must lie in 0..99999")
        if not 0 <= self.province <= 99:
            raise ValueError("province must lie in 0..99")
        if self.layout != "numeric_only" and self.series_char not in ARABIC:
            raise ValueError(f"series character must be one of {sorted(ARABIC)}")
        if self.noise < 0 or self.scale < 1:
            raise ValueError("noise must be >= 0 and scale >= 1")

    def plate_string(self) -> PlateString:
        v, p = str(self.vehicle_number), str(self.province)
        if self.layout == "numeric_only":
            return PlateString.from_components("numeric_only", digits=p + v)
        return PlateString.from_components(self.layout, vehicle=v, series=self.series_char, province=p)

    @property
    def text(self) -> str:
        return self.plate_string().text


def random_plate_spec(rng: np.random.Generator, *, layout: Optional[str] = None,
                      layout_sampling: str = "mix", class_sampling: str = "uniform", noise: Tuple[float, float] = (0.0, 0.0),
                      rotation: float = 0.0, scales=(2, 3), distractor_prob: float = 0.0) -> SyntheticPlateSpec:
    if layout is None:
        names, probs = zip(*LAYOUT_MIX)
        if layout_sampling == "uniform":
            probs = (1.0 / len(names),) * len(names)
        elif layout_sampling != "mix":
            raise ValueError(f"unknown layout sampling {layout_sampling!r}")
        layout = str(rng.choice(names, p=probs))
    series_pool = sorted(ARABIC)
    if class_sampling == "uniform":
        series = str(rng.choice(series_pool))
    elif class_sampling == "skewed":
        weights = np.array([4.0 if s in FREQUENT_SERIES else 1.0 for s in series_pool])
        series = str(rng.choice(series_pool, p=weights / weights.sum()))
    else:
        raise ValueError(f"unknown class sampling {class_sampling!r}")
    n_digits = int(rng.integers(1, 6))
    vehicle = int(rng.integers(10 ** (n_digits - 1) if n_digits > 1 else 0, 10 ** n_digits))
    province = int(rng.integers(1, 100))
    return SyntheticPlateSpec(
        layout=layout, vehicle_number=vehicle, province=province, series_char=series,
        noise=float(rng.uniform(*noise)), rotation=float(rng.uniform(-rotation, rotation)) if rotation else 0.0,
        scale=int(rng.choice(scales)), distractor=bool(rng.random() < distractor_prob),
    )


def _layout_cells(spec: SyntheticPlateSpec) -> List[List[Optional[str]]]:
    """Rows of glyph labels; ``None`` entries mark separator bars."""
    v, p = str(spec.vehicle_number), str(spec.province)
    if spec.layout == "numeric_only":
        return [list(p), list(v)]
    if spec.layout == "new":
        seq = list(v) + [None] + [spec.series_char] + [None] + list(p)
    else:
        seq = [spec.series_char] + [None] + list(p) + [None] + list(v)
    return [seq]


def render_plate(spec: SyntheticPlateSpec):
    """Noise-free plate canvas plus per-glyph ink masks in canvas coordinates."""
    s = spec.scale
    gw, gh = 5 * s, 7 * s
    gap = s                  # between glyphs
    sep = 3 * s              # separator slot width
    pad = 2 * s
    rows = _layout_cells(spec)

    def row_width(row):
        w = 0
        for i, item in enumerate(row):
            w += sep if item is None else gw
            if i + 1 < len(row):
                w += gap
        return w

    width = max(row_width(r) for r in rows) + 2 * pad
    row_gap = 2 * s
    height = len(rows) * gh + (len(rows) - 1) * row_gap + 2 * pad
    canvas = np.full((height, width), PLATE_BG)
    canvas[0, :] = canvas[-1, :] = canvas[:, 0] = canvas[:, -1] = INK
    glyphs = []
    for r, row in enumerate(rows):
        y = pad + r * (gh + row_gap)
        x = pad + (width - 2 * pad - row_width(row)) // 2
        for item in row:
            if item is None:
                bar = x + sep // 2 - max(1, s // 2) // 2
                canvas[2:-2, bar:bar + max(1, s // 2)] = INK
                x += sep + gap
                continue
            mask = np.zeros((height, width), dtype=bool)
            mask[y:y + gh, x:x + gw] = np.kron(GLYPHS[item], np.ones((s, s), dtype=bool))
            canvas[mask] = INK
            glyphs.append((item, mask))
            x += gw + gap
    return canvas, glyphs


def _mask_box(mask: np.ndarray) -> Optional[BoundingBox]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _background(rng, h, w) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    a, b, c = rng.uniform(-0.15, 0.15, size=3)
    bg = 0.45 + a * xx + b * yy + 0.05 * np.sin(2 * np.pi * (xx * rng.uniform(1, 4) + c))
    return np.clip(bg, 0.15, 0.75)


def _distractor_patch(rng, h, w) -> np.ndarray:
    kind = rng.integers(3)
    if kind == 0:           # grille stripes
        period = int(rng.integers(3, 8))
        rows = (np.arange(h) // period) % 2
        patch = np.where(rows[:, None] == 1, 0.8, 0.2) * np.ones((1, w))
    elif kind == 1:         # blocky texture
        bh, bw = max(1, h // 4), max(1, w // 10)
        blocks = rng.uniform(0.1, 0.9, size=(-(-h // bh), -(-w // bw)))
        patch = np.kron(blocks, np.ones((bh, bw)))[:h, :w]
    else:                   # fine noise
        patch = rng.uniform(0.0, 1.0, size=(h, w))
    return patch


def synth_plate(spec: SyntheticPlateSpec, seed: int, image_id: Optional[str] = None):
    """Render a scene containing one plate.

    Returns ``(image, annotation, plate_string)``.  Character boxes are the
    exact bounding rectangles of each glyph's ink after rotation.
    """
    rng = np.random.default_rng(seed)
    canvas, glyphs = render_plate(spec)
    ph, pw = canvas.shape
    margin = 24
    height = max(160, 2 * ph + 2 * margin + 16) if spec.distractor else max(160, ph + 2 * margin)
    width = max(256, pw + 2 * margin)
    image = _background(rng, height, width)

    ox = int(rng.integers(margin, width - pw - margin + 1))
    distractor_box = None
    if spec.distractor:
        # plate and distractor each get one horizontal band of the scene
        half = height // 2
        top = int(rng.integers(4, half - ph - 4 + 1))
        bottom = int(rng.integers(half + 4, height - ph - 4 + 1))
        oy, dy = (top, bottom) if rng.random() < 0.5 else (bottom, top)
        dx = int(rng.integers(4, width - pw - 4 + 1))
        image[dy:dy + ph, dx:dx + pw] = _distractor_patch(rng, ph, pw)
        distractor_box = BoundingBox(float(dx), float(dy), float(dx + pw), float(dy + ph))
    else:
        oy = int(rng.integers(margin, height - ph - margin + 1))

    image[oy:oy + ph, ox:ox + pw] = canvas
    masks = []
    for label, mask in glyphs:
        full = np.zeros((height, width))
        full[oy:oy + ph, ox:ox + pw] = mask
        masks.append((label, full))
    plate_mask = np.zeros((height, width))
    plate_mask[oy:oy + ph, ox:ox + pw] = 1.0

    if spec.rotation:
        center = (oy + (ph - 1) / 2.0, ox + (pw - 1) / 2.0)
        image = rotate(image, spec.rotation, center)
        masks = [(lab, rotate(m, spec.rotation, center)) for lab, m in masks]
        plate_mask = rotate(plate_mask, spec.rotation, center)
    if spec.noise > 0:
        image = np.clip(image + rng.normal(0.0, spec.noise, size=image.shape), 0.0, 1.0)

    image_id = image_id or f"synth_{seed}"
    objects = [("motorcycle" if spec.layout == "numeric_only" else "vehicle",
                BoundingBox(0.0, 0.0, float(width), float(height)))]
    objects.append(("plate", _mask_box(plate_mask > 0.5)))
    for label, m in masks:
        box = _mask_box(m > 0.5)
        if box is not None:
            objects.append((label, box))
    plate = spec.plate_string()
    meta = {"scale": spec.scale, "noise": spec.noise, "rotation": spec.rotation, "seed": seed}
    if distractor_box is not None:
        meta["distractor"] = distractor_box.as_list()
    ann = AnnotatedImage(image_id=image_id, path=f"{image_id}.png", width=width, height=height,
                         objects=objects, plate_text=plate.text, layout=spec.layout, meta=meta)
    return image, ann, plate


def oracle_detections(ann: AnnotatedImage, seed: int, *, jitter: float = 0.0,
                      spurious_chars: int = 0) -> DetectionRecord:
    """Detector stand-in built from ground truth.

    Emits the plate, the distractor recorded in ``ann.meta`` (as a competing
    plate whose confidence may beat the real one), every character box and
    ``spurious_chars`` false character boxes on the plate frame.  Boxes
    are jittered by up to ``jitter`` pixels per side; the output order is
    shuffled.
    """
    rng = np.random.default_rng(seed)
    entries = []

    def jittered(box: BoundingBox) -> BoundingBox:
        if jitter <= 0:
            return box
        d = rng.uniform(-jitter, jitter, size=4)
        x0, y0, x1, y1 = (np.array(box.as_list()) + d).tolist()
        if x1 - x0 < 1 or y1 - y0 < 1:
            return box
        return BoundingBox(x0, y0, x1, y1).clamp(ann.width, ann.height)

    plate = ann.boxes("plate")[0]
    entries.append(RecordEntry("plate", jittered(plate), round(float(rng.uniform(0.55, 0.95)), 4)))
    if "distractor" in ann.meta:
        entries.append(RecordEntry("plate", BoundingBox(*ann.meta["distractor"]),
                                   round(float(rng.uniform(0.6, 0.99)), 4)))
    chars = ann.char_objects
    for _, box in chars:
        entries.append(RecordEntry("char", jittered(box), round(float(rng.uniform(0.7, 0.99)), 4)))
    if chars and spurious_chars:
        cw = float(np.median([b.width for _, b in chars]))
        ch = float(np.median([b.height for _, b in chars]))
        for _ in range(spurious_chars):
            # a glyph-sized box straddling a plate corner: frame, background, no ink
            corner_x = plate.x_min if rng.random() < 0.5 else plate.x_max - cw
            corner_y = plate.y_min - ch * 0.4 if rng.random() < 0.5 else plate.y_max - ch * 0.6
            box = BoundingBox(corner_x, corner_y, corner_x + cw, corner_y + ch).clamp(ann.width, ann.height)
            entries.append(RecordEntry("char", box, round(float(rng.uniform(0.3, 0.8)), 4)))
    order = rng.permutation(len(entries))
    return DetectionRecord(ann.image_id, ann.width, ann.height, [entries[i] for i in order])
