"""Gaussian heatmap encoding of landmarks / line ROIs and argmax decoding.

Heatmap pixel ``j`` covers input pixels ``j*scale ... j*scale + scale - 1``, so
its centre sits at input coordinate ``j*scale + scale/2 - 0.5``.  Encoding uses
the inverse of that map, which makes encode/decode exact on grid nodes.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import ndimage

LANDMARK_SIGMA = 6.0  # input-resolution pixels
HEATMAP_SCALE = 4
ROI_THRESHOLD = 0.5


class DecodedPoint(NamedTuple):
    x: float
    y: float
    degenerate: bool = False

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


def input_to_heatmap(pts, scale: int = HEATMAP_SCALE) -> np.ndarray:
    return (np.asarray(pts, dtype=float) + 0.5) / scale - 0.5


def heatmap_to_input(pts, scale: int = HEATMAP_SCALE) -> np.ndarray:
    return np.asarray(pts, dtype=float) * scale + scale / 2.0 - 0.5


def _check_in_canvas(point, shape, scale):
    h, w = shape
    x, y = point
    if not (-0.5 <= x <= w * scale - 0.5 and -0.5 <= y <= h * scale - 0.5):
        raise ValueError(f"point ({x:.3f}, {y:.3f}) lies outside the {w * scale}x{h * scale} input canvas")


def _gaussian(centres: np.ndarray, shape, sigma_hm: float) -> np.ndarray:
    h, w = shape
    ii = np.arange(h, dtype=float)[:, None]
    jj = np.arange(w, dtype=float)[None, :]
    out = np.zeros(shape)
    for x, y in centres:
        g = np.exp(-((jj - x) ** 2 + (ii - y) ** 2) / (2.0 * sigma_hm ** 2))
        np.maximum(out, g, out=out)
    return out


def encode_landmark(point, shape, scale: int = HEATMAP_SCALE, sigma: float = LANDMARK_SIGMA) -> np.ndarray:
    """Unnormalized Gaussian (peak 1) centred on ``point`` given in input coordinates."""
    point = np.asarray(point, dtype=float)
    _check_in_canvas(point, shape, scale)
    return _gaussian(input_to_heatmap(point, scale)[None], shape, sigma / scale)


def line_pseudo_landmarks(p_prox, p_dist, spacing: float) -> np.ndarray:
    """Equidistant points on the segment, endpoints included, gap <= ``spacing``."""
    a, b = np.asarray(p_prox, dtype=float), np.asarray(p_dist, dtype=float)
    length = float(np.hypot(*(b - a)))
    if length == 0.0:
        raise ValueError("line endpoints coincide")
    k = int(np.ceil(length / spacing - 1e-9)) + 1
    t = np.linspace(0.0, 1.0, max(k, 2))
    return a + t[:, None] * (b - a)


def encode_line_roi(p_prox, p_dist, shape, scale: int = HEATMAP_SCALE,
                    sigma: float = LANDMARK_SIGMA) -> np.ndarray:
    """Max-combination of Gaussians on pseudo landmarks spaced one sigma apart."""
    for p in (p_prox, p_dist):
        _check_in_canvas(np.asarray(p, dtype=float), shape, scale)
    nodes = line_pseudo_landmarks(p_prox, p_dist, sigma)
    return _gaussian(input_to_heatmap(nodes, scale), shape, sigma / scale)


def decode_landmark(heatmap, scale: int = HEATMAP_SCALE) -> DecodedPoint:
    """Argmax location in input coordinates; ties go to the first in row-major order."""
    hm = np.asarray(heatmap, dtype=float)
    if hm.size == 0:
        raise ValueError("empty heatmap")
    if np.all(hm == hm.flat[0]):
        x, y = heatmap_to_input((0.0, 0.0), scale)
        return DecodedPoint(float(x), float(y), True)
    i, j = np.unravel_index(int(np.argmax(hm)), hm.shape)
    x, y = heatmap_to_input((j, i), scale)
    return DecodedPoint(float(x), float(y), False)


def threshold_roi(heatmap, tau: float = ROI_THRESHOLD) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    return np.asarray(heatmap) >= tau


def upsample_heatmap(heatmap, scale: int = HEATMAP_SCALE, order: int = 1) -> np.ndarray:
    """Resample a heatmap onto the input-resolution pixel grid (bilinear by default)."""
    hm = np.asarray(heatmap, dtype=float)
    h, w = hm.shape
    grid = input_to_heatmap(np.arange(h * scale), scale)
    gx = input_to_heatmap(np.arange(w * scale), scale)
    rr, cc = np.meshgrid(grid, gx, indexing="ij")
    return ndimage.map_coordinates(hm, [rr, cc], order=order, mode="nearest")


def area_fraction(mask, scale: int = HEATMAP_SCALE) -> np.ndarray:
    """Fraction of each ``scale`` x ``scale`` block covered by ``mask``."""
    m = np.asarray(mask, dtype=float)
    h, w = m.shape
    blocks = m[: h - h % scale, : w - w % scale].reshape(h // scale, scale, w // scale, scale)
    return blocks.mean(axis=(1, 3))


def downsample_mask(mask, scale: int = HEATMAP_SCALE) -> np.ndarray:
    """Block-average a binary mask by ``scale`` and re-binarize at 0.5."""
    return area_fraction(mask, scale) >= 0.5
