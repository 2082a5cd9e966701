"""Deterministic feature extractors feeding the flows and the classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .imaging import resize_area, to_gray

MIN_PATCH = 8
METHODS = ("raw_patch", "grad_hist")


@dataclass(frozen=True)
class FeatureExtractor:
    """``raw_patch``: box-filtered grayscale thumbnail of ``grid`` size.
    ``grad_hist``: magnitude-weighted histogram of unsigned gradient
    orientation with ``bins`` bins in each cell of a ``grid`` layout.

    Both outputs are standardized per vector (zero mean, unit variance).
    """

    method: str = "raw_patch"
    grid: Tuple[int, int] = (10, 6)
    bins: int = 4

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown feature method {self.method!r}")
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"feature dimension must be even and >= 2, got {self.dim}")

    @property
    def dim(self) -> int:
        rows, cols = self.grid
        return rows * cols * (self.bins if self.method == "grad_hist" else 1)

    def to_json(self) -> dict:
        return {"method": self.method, "grid": list(self.grid), "bins": self.bins}

    @classmethod
    def from_json(cls, doc: dict) -> "FeatureExtractor":
        return cls(method=doc["method"], grid=tuple(doc["grid"]), bins=int(doc.get("bins", 4)))


def standardize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    sd = v.std()
    if sd < 1e-12:
        return np.zeros_like(v)
    return (v - v.mean()) / sd


def _orientation_hist(img: np.ndarray, grid, bins: int) -> np.ndarray:
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)          # unsigned, [0, pi)
    pos = ang / np.pi * bins
    # linear vote split between the two nearest bins (circular)
    b0 = np.floor(pos).astype(int) % bins
    b1 = (b0 + 1) % bins
    w1 = pos - np.floor(pos)
    rows, cols = grid
    h, w = img.shape
    r_idx = np.minimum((np.arange(h) * rows) // h, rows - 1)
    c_idx = np.minimum((np.arange(w) * cols) // w, cols - 1)
    cell = (r_idx[:, None] * cols + c_idx[None, :]).ravel()
    hist = np.zeros((rows * cols, bins))
    np.add.at(hist, (cell, b0.ravel()), (mag * (1.0 - w1)).ravel())
    np.add.at(hist, (cell, b1.ravel()), (mag * w1).ravel())
    return hist.ravel()


def extract_features(patch, ex: FeatureExtractor) -> np.ndarray:
    img = to_gray(patch)
    if img.shape[0] < MIN_PATCH or img.shape[1] < MIN_PATCH:
        raise ValueError(f"patch {img.shape} is smaller than {MIN_PATCH}x{MIN_PATCH}")
    if ex.method == "raw_patch":
        v = resize_area(img, ex.grid).ravel()
    else:
        v = _orientation_hist(img, ex.grid, ex.bins)
    return standardize(v)
