"""Segmentation, landmark and planning metrics plus inter-rater statistics."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .planner import Line2D, boundary_mask


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def iou(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    _same_shape(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary_points(mask) -> np.ndarray:
    """(x, y) centres of 4-neighbourhood boundary pixels."""
    rows, cols = np.nonzero(boundary_mask(mask))
    return np.stack([cols, rows], axis=1).astype(float)


def _directed_distances(mask_a, mask_b):
    a, b = np.asarray(mask_a, dtype=bool), np.asarray(mask_b, dtype=bool)
    _same_shape(a, b)
    if not a.any() or not b.any():
        raise ValueError("undefined surface: empty mask")
    pa, pb = boundary_points(a), boundary_points(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return d_ab, d_ba


def average_surface_distance(pred, gt, mm_per_px: float = 1.0) -> float:
    """Symmetric ASD: mean of the two directed mean boundary distances."""
    d_ab, d_ba = _directed_distances(pred, gt)
    return 0.5 * (d_ab.mean() + d_ba.mean()) * mm_per_px


def hausdorff(pred, gt, mm_per_px: float = 1.0) -> float:
    d_ab, d_ba = _directed_distances(pred, gt)
    return max(d_ab.max(), d_ba.max()) * mm_per_px


def landmark_ed(pred_point, gt_point, mm_per_px: float = 1.0) -> float:
    d = np.asarray(pred_point, dtype=float) - np.asarray(gt_point, dtype=float)
    return float(np.hypot(*d)) * mm_per_px


def line_alignment(pred_line: Line2D, p_prox, p_dist, mm_per_px: float = 1.0) -> float:
    return float(pred_line.distance(np.stack([p_prox, p_dist])).mean()) * mm_per_px


def median_ci80(values, resamples: int = 10_000, seed: int = 0) -> tuple[float, float, float]:
    """Sample median with a seeded percentile-bootstrap 80 % interval."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("median_ci80 needs at least one value")
    med = float(np.median(v))
    rng = np.random.default_rng(seed)
    boot = np.median(v[rng.integers(0, v.size, size=(resamples, v.size))], axis=1)
    lo, hi = np.percentile(boot, [10.0, 90.0])
    return med, float(min(lo, med)), float(max(hi, med))


def project_error_axes(pred_sp, ref_sp, lm1_direction, mm_per_px: float = 1.0) -> tuple[float, float]:
    """Signed error components (along LM1, perpendicular to LM1) in mm."""
    d = np.asarray(lm1_direction, dtype=float)
    d = d / np.hypot(*d)
    e = (np.asarray(pred_sp, dtype=float) - np.asarray(ref_sp, dtype=float)) * mm_per_px
    perp = np.array([-d[1], d[0]])
    return float(e @ d), float(e @ perp)


@dataclass
class RaterRow:
    first: str
    second: str
    n_images: int
    median: float
    ci_low: float
    ci_high: float
    distances: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"first": self.first, "second": self.second, "n_images": self.n_images,
                "median_mm": self.median, "ci80_mm": [self.ci_low, self.ci_high],
                "distances_mm": self.distances}


CENTROID = "Expert centroid"


def pairwise_rater_table(plans: dict, mm_per_px, auto_key: str | None = "auto", subset=None,
                         resamples: int = 10_000, seed: int = 0) -> list[RaterRow]:
    """Per-image ED between every pair of experts, then automatic vs each expert and vs the centroid.

    ``plans`` maps rater name to an (N, 2) array of points (px) over the same
    N images; ``mm_per_px`` is a scalar or length-N sequence; ``subset`` is an
    optional boolean/index selection of images.
    """
    arrays = {k: np.asarray(v, dtype=float).reshape(-1, 2) for k, v in plans.items()}
    sizes = {len(v) for v in arrays.values()}
    if len(sizes) != 1:
        raise ValueError(f"rater point lists have different lengths: { {k: len(v) for k, v in arrays.items()} }")
    n = sizes.pop()
    spacing = np.broadcast_to(np.asarray(mm_per_px, dtype=float), (n,))
    idx = np.arange(n) if subset is None else np.arange(n)[np.asarray(subset)]
    experts = [k for k in arrays if k != auto_key]
    if len(experts) + (auto_key in arrays) < 2:
        raise ValueError("need at least two raters")

    def row(a_name, a, b_name, b):
        d = np.hypot(*(a[idx] - b[idx]).T) * spacing[idx]
        med, lo, hi = median_ci80(d, resamples, seed)
        return RaterRow(a_name, b_name, len(idx), med, lo, hi, [float(x) for x in d])

    rows = [row(a, arrays[a], b, arrays[b]) for a, b in itertools.combinations(experts, 2)]
    if auto_key in arrays:
        auto = arrays[auto_key]
        rows += [row(auto_key, auto, e, arrays[e]) for e in experts]
        if experts:
            centroid = np.mean([arrays[e] for e in experts], axis=0)
            rows.append(row(auto_key, auto, CENTROID, centroid))
    return rows


def format_rater_table(rows: list[RaterRow]) -> str:
    header = f"{'First rater':<14}{'Second rater':<18}{'N':>4}  {'Median ED, [CI80] (mm)':<28}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.first:<14}{r.second:<18}{r.n_images:>4}  "
                     f"{r.median:.2f}, [{r.ci_low:.2f}, {r.ci_high:.2f}]")
    return "\n".join(lines)


@dataclass
class MetricReport:
    segmentation: dict = field(default_factory=dict)  # bone -> {metric: {mean, std}}
    landmarks: dict = field(default_factory=dict)  # name -> {median, ci80_low, ci80_high}
    line_alignment: dict = field(default_factory=dict)
    schoettle: dict = field(default_factory=dict)
    axis_errors: list = field(default_factory=list)  # (along, perp) per image, mm
    rater_table: list = field(default_factory=list)
    per_image: list = field(default_factory=list)
    units: str = "mm"

    def to_dict(self) -> dict:
        return {"units": self.units, "segmentation": self.segmentation, "landmarks": self.landmarks,
                "line_alignment": self.line_alignment, "schoettle": self.schoettle,
                "axis_errors": self.axis_errors,
                "rater_table": [r.to_dict() if isinstance(r, RaterRow) else r for r in self.rater_table],
                "per_image": self.per_image}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def render_text(self) -> str:
        u = self.units
        out = [f"{'Anatomy':<10}{'mean IOU':>18}{'ASD (' + u + ')':>20}{'HD (' + u + ')':>20}"]
        for bone, m in self.segmentation.items():
            cells = [f"{m[k]['mean']:.2f} +- {m[k]['std']:.2f}" for k in ("iou", "asd", "hausdorff")]
            out.append(f"{bone:<10}{cells[0]:>18}{cells[1]:>20}{cells[2]:>20}")
        out.append("")
        for name, s in {**self.landmarks, **({"line": self.line_alignment} if self.line_alignment else {}),
                        **({"schoettle": self.schoettle} if self.schoettle else {})}.items():
            out.append(f"{name:<10} median {s['median']:.2f} {u}, CI80 [{s['ci80_low']:.2f}, {s['ci80_high']:.2f}]")
        if self.rater_table:
            rows = [r if isinstance(r, RaterRow) else RaterRow(r["first"], r["second"], r["n_images"],
                                                               r["median_mm"], *r["ci80_mm"])
                    for r in self.rater_table]
            out += ["", format_rater_table(rows)]
        return "\n".join(out) + "\n"


def summarize_median(values, resamples: int = 10_000, seed: int = 0) -> dict:
    med, lo, hi = median_ci80(values, resamples, seed)
    return {"median": med, "ci80_low": lo, "ci80_high": hi, "n": len(values)}


def summarize_mean(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}
