"""Small grayscale image helpers shared by the transforms, crops and renderer.

Images are 2-D float64 arrays with values in [0, 1]; pixel ``(r, c)`` has
its centre at coordinate ``(r, c)``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

_LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[:, :, :3]
        arr = arr @ _LUMA if arr.shape[2] == 3 else arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D or 3-D image, got shape {arr.shape}")
    return arr


def bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional coordinates, clamping to the edges."""
    h, w = img.shape
    rows = np.clip(rows, 0.0, h - 1.0)
    cols = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = rows - r0
    fc = cols - c0
    top = img[r0, c0] * (1.0 - fc) + img[r0, c1] * fc
    bottom = img[r1, c0] * (1.0 - fc) + img[r1, c1] * fc
    return top * (1.0 - fr) + bottom * fr


def resize_bilinear(img: np.ndarray, shape) -> np.ndarray:
    """Resize to ``shape = (rows, cols)`` with half-pixel aligned sampling."""
    h, w = img.shape
    oh, ow = int(shape[0]), int(shape[1])
    if oh < 1 or ow < 1:
        raise ValueError(f"invalid target shape {shape}")
    if (oh, ow) == (h, w):
        return img.copy()
    rs = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    cs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    rr, cc = np.meshgrid(rs, cs, indexing="ij")
    return bilinear_sample(img, rr, cc)


def _area_matrix(n_out: int, n_in: int) -> np.ndarray:
    # row i averages source interval [i*n_in/n_out, (i+1)*n_in/n_out)
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = edges[:-1, None]
    hi = edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resize_area(img: np.ndarray, shape) -> np.ndarray:
    """Box-filter resize; each output pixel averages the area it covers."""
    h, w = img.shape
    return _area_matrix(int(shape[0]), h) @ img @ _area_matrix(int(shape[1]), w).T


def rotate(img: np.ndarray, angle_deg: float, center=None) -> np.ndarray:
    """Rotate counter-clockwise (as displayed) by ``angle_deg`` about ``center``.

    Output keeps the input shape; samples falling outside take the nearest
    edge value.
    """
    h, w = img.shape
    if center is None:
        center = ((h - 1) / 2.0, (w - 1) / 2.0)
    cy, cx = center
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = rr - cy, cc - cx
    # inverse map: rotate output coordinates back by -theta (y axis points down)
    src_c = cx + cos * dx - sin * dy
    src_r = cy + sin * dx + cos * dy
    return bilinear_sample(img, src_r, src_c)


def letterbox(img: np.ndarray, shape, fill=None) -> np.ndarray:
    """Pad to the aspect ratio of ``shape`` (centred), then resize to it.

    Padding uses ``fill`` or, by default, the median border value.
    """
    h, w = img.shape
    oh, ow = int(shape[0]), int(shape[1])
    if fill is None:
        border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
        fill = float(np.median(border))
    target = oh / ow
    if h / w > target:
        new_w = int(round(h / target))
        pad = new_w - w
        img = np.pad(img, ((0, 0), (pad // 2, pad - pad // 2)), constant_values=fill)
    elif h / w < target:
        new_h = int(round(w * target))
        pad = new_h - h
        img = np.pad(img, ((pad // 2, pad - pad // 2), (0, 0)), constant_values=fill)
    return resize_bilinear(img, (oh, ow))


def save_image(img: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(Path(path), format="PNG", optimize=False)


def load_image(path) -> np.ndarray:
    with PILImage.open(Path(path)) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        return to_gray(np.asarray(im))
