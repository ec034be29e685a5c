"""Cortex-line fitting and Schoettle Point construction.

LM1 is fitted to the femur outline inside the predicted line ROI; LM2 and
LM3 are the perpendiculars to LM1 through ``p_blum`` and ``p_tmc``.  The
Schoettle Point is the centre of the circle tangent to all three lines, on
the femur side of LM1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .augment import NormalizeTransform
from .errors import PlanningError
from .heatmaps import HEATMAP_SCALE, ROI_THRESHOLD, decode_landmark, threshold_roi, upsample_heatmap

SCHOETTLE_RADIUS_MM = 2.5


@dataclass(frozen=True)
class Line2D:
    """The line ``{x : n . x = c}`` with unit normal ``n``."""

    n: np.ndarray
    c: float

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float).reshape(2)
        norm = float(np.hypot(*n))
        if norm == 0.0:
            raise ValueError("line normal must be non-zero")
        object.__setattr__(self, "n", n / norm)
        object.__setattr__(self, "c", float(self.c) / norm)

    @classmethod
    def through(cls, point, direction) -> "Line2D":
        d = np.asarray(direction, dtype=float)
        n = np.array([-d[1], d[0]])
        n = n / np.hypot(*n)
        return cls(n, float(n @ np.asarray(point, dtype=float)))

    @property
    def direction(self) -> np.ndarray:
        return np.array([-self.n[1], self.n[0]])

    def signed_distance(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.n - self.c

    def distance(self, pts) -> np.ndarray:
        return np.abs(self.signed_distance(pts))

    def project(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts - np.multiply.outer(self.signed_distance(pts), self.n)

    def to_dict(self) -> dict:
        return {"normal": [float(v) for v in self.n], "offset": float(self.c)}

    @classmethod
    def from_dict(cls, d: dict) -> "Line2D":
        return cls(np.asarray(d["normal"], dtype=float), float(d["offset"]))


def fit_line_tls(points) -> Line2D:
    """Orthogonal least-squares line through ``points`` (N x 2)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise PlanningError("insufficient contour support: fewer than 2 points")
    centroid = pts.mean(axis=0)
    centred = pts - centroid
    if np.allclose(centred, 0.0):
        raise PlanningError("insufficient contour support: points coincide")
    _, vecs = np.linalg.eigh(centred.T @ centred)
    n = vecs[:, 0]
    # canonical sign so the result does not depend on eigh internals
    if n[0] < 0 or (n[0] == 0 and n[1] < 0):
        n = -n
    return Line2D(n, float(n @ centroid))


_NEIGHBOURS = ((0, 1), (0, -1), (1, 0), (-1, 0))


def boundary_mask(mask) -> np.ndarray:
    """Mask pixels with at least one background 4-neighbour (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1)
    interior = p[1:-1, 2:] & p[1:-1, :-2] & p[2:, 1:-1] & p[:-2, 1:-1]
    return m & ~interior


def outline_points(mask, select=None) -> np.ndarray:
    """Sub-pixel outline: midpoints between boundary pixels and their background 4-neighbours.

    Only boundary pixels where ``select`` is true contribute.  Returns (N, 2) (x, y).
    """
    m = np.asarray(mask, dtype=bool)
    keep = boundary_mask(m)
    if select is not None:
        keep &= np.asarray(select, dtype=bool)
    p = np.pad(m, 1)
    h, w = m.shape
    out = []
    for dy, dx in _NEIGHBOURS:
        nb = p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        rows, cols = np.nonzero(keep & ~nb)
        out.append(np.stack([cols + 0.5 * dx, rows + 0.5 * dy], axis=1))
    return np.concatenate(out, axis=0)


def fit_cortex_line(femur_mask, roi_mask) -> Line2D:
    femur_mask = np.asarray(femur_mask, dtype=bool)
    roi_mask = np.asarray(roi_mask, dtype=bool)
    if femur_mask.shape != roi_mask.shape:
        raise ValueError(f"mask shapes differ: {femur_mask.shape} vs {roi_mask.shape}")
    return fit_line_tls(outline_points(femur_mask, roi_mask))


def perpendicular_through(line: Line2D, p) -> Line2D:
    """Line through ``p`` running along ``line.n``."""
    return Line2D.through(p, line.n)


@dataclass
class PlanningResult:
    lm1: Line2D
    lm2: Line2D
    lm3: Line2D
    p_sp: np.ndarray
    radius_px: float
    radius_mm: float | None = None
    mm_per_px: float | None = None
    reference_distance_mm: float | None = None
    inside_schoettle_area: bool | None = None
    p_blum: np.ndarray | None = None
    p_tmc: np.ndarray | None = None

    def to_dict(self) -> dict:
        def pt(v):
            return None if v is None else [float(a) for a in v]

        return {
            "lm1": self.lm1.to_dict(), "lm2": self.lm2.to_dict(), "lm3": self.lm3.to_dict(),
            "p_sp": pt(self.p_sp), "radius_px": float(self.radius_px),
            "radius_mm": self.radius_mm, "mm_per_px": self.mm_per_px,
            "reference_distance_mm": self.reference_distance_mm,
            "inside_schoettle_area": self.inside_schoettle_area,
            "p_blum": pt(self.p_blum), "p_tmc": pt(self.p_tmc),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlanningResult":
        def arr(v):
            return None if v is None else np.asarray(v, dtype=float)

        return cls(Line2D.from_dict(d["lm1"]), Line2D.from_dict(d["lm2"]), Line2D.from_dict(d["lm3"]),
                   arr(d["p_sp"]), float(d["radius_px"]), d.get("radius_mm"), d.get("mm_per_px"),
                   d.get("reference_distance_mm"), d.get("inside_schoettle_area"),
                   arr(d.get("p_blum")), arr(d.get("p_tmc")))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PlanningResult":
        return cls.from_dict(json.loads(text))


def schoettle_point(lm1: Line2D, p_blum, p_tmc, side_hint, min_gap: float = 1.0) -> PlanningResult:
    p_blum = np.asarray(p_blum, dtype=float)
    p_tmc = np.asarray(p_tmc, dtype=float)
    d = lm1.direction
    t_blum, t_tmc = float(d @ p_blum), float(d @ p_tmc)
    gap = abs(t_blum - t_tmc)
    if gap < min_gap:
        raise PlanningError(f"parallel-line gap degenerate: {gap:.3f} px < {min_gap:.3f} px")
    r = gap / 2.0
    side = 1.0 if lm1.signed_distance(np.asarray(side_hint, dtype=float)) >= 0 else -1.0
    centre = d * (t_blum + t_tmc) / 2.0 + lm1.n * (lm1.c + side * r)
    return PlanningResult(lm1, perpendicular_through(lm1, p_blum), perpendicular_through(lm1, p_tmc),
                          centre, r, p_blum=p_blum, p_tmc=p_tmc)


def finalize(result: PlanningResult, mm_per_px: float | None = None, reference_point=None,
             area_radius_mm: float = SCHOETTLE_RADIUS_MM) -> PlanningResult:
    """Attach mm quantities and the inside-Schoettle-area flag."""
    result.mm_per_px = mm_per_px
    if mm_per_px is not None:
        result.radius_mm = result.radius_px * mm_per_px
    if reference_point is not None:
        dist_px = float(np.hypot(*(result.p_sp - np.asarray(reference_point, dtype=float))))
        scale = 1.0 if mm_per_px is None else mm_per_px
        result.reference_distance_mm = dist_px * scale
        result.inside_schoettle_area = result.reference_distance_mm <= area_radius_mm
    return result


def plan_from_inputs(p_blum, p_tmc, femur_mask, roi_mask, mm_per_px: float | None = None,
                     reference_point=None, min_gap: float = 1.0) -> PlanningResult:
    """Plan from explicit landmarks and full-resolution femur / ROI masks."""
    femur_mask = np.asarray(femur_mask, dtype=bool)
    if not femur_mask.any():
        raise PlanningError("femur mask is empty")
    lm1 = fit_cortex_line(femur_mask, roi_mask)
    rows, cols = np.nonzero(femur_mask)
    side_hint = np.array([cols.mean(), rows.mean()])
    result = schoettle_point(lm1, p_blum, p_tmc, side_hint, min_gap=min_gap)
    return finalize(result, mm_per_px, reference_point)


def _to_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=float)


def plan(network_output, inverse_transform: NormalizeTransform, femur_mask_fullres=None,
         mm_per_px: float | None = None, reference_point=None, scale: int = HEATMAP_SCALE,
         roi_threshold: float = ROI_THRESHOLD) -> PlanningResult:
    """Plan from one image's head outputs (``seg`` 4xhxw logits, ``lm`` 2xhxw, ``roi`` 1xhxw).

    Landmarks are decoded by argmax and mapped back to original pixels; the
    ROI and (if no mask is supplied) the femur logits are upsampled to the
    original grid before thresholding.
    """
    seg, lm, roi = (_to_numpy(getattr(network_output, k)) for k in ("seg", "lm", "roi"))
    pts = []
    for ch in range(2):
        dec = decode_landmark(lm[ch], scale)
        if dec.degenerate:
            raise PlanningError(f"landmark heatmap {ch} is constant")
        pts.append(inverse_transform.inverse(dec.xy))
    roi_full = inverse_transform.to_original(upsample_heatmap(roi[0], scale))
    roi_mask = threshold_roi(roi_full, roi_threshold)
    if femur_mask_fullres is None:
        femur_logit = inverse_transform.to_original(upsample_heatmap(seg[0], scale))
        femur_mask_fullres = femur_logit >= 0.0
    min_gap = scale / inverse_transform.scale
    return plan_from_inputs(pts[0], pts[1], femur_mask_fullres, roi_mask, mm_per_px,
                            reference_point, min_gap=min_gap)
