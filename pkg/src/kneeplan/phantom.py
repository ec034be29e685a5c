"""Synthetic lateral-knee phantoms with closed-form ground truth.

Shapes are laid out in a local frame where the femoral shaft is vertical
(proximal = up, posterior = -x).  The local frame is then rotated by
``femur_shaft_angle`` about the canvas centre and shifted by ``offset``;
masks are rasterized exactly by mapping every pixel centre back into the
local frame.

Femur = shaft rectangle + two overlapping condyle discs.  The posterior shaft
edge is straight down to the point where it meets the posterior condyle, so
the cortex line is exact.  ``p_tmc`` sits at that shaft/condyle transition,
``p_blum`` at the posterior end of a chord across condyle A (drawn brighter in
the image).  Both are pulled 0.8 px into the bone so that the nearest pixel
is always a femur pixel; this does not move their projection on the cortex
line for ``p_tmc``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dataset_io import AnnotationSet, GrayImage, Sample, calibrate_spacing
from .errors import ConfigError, ValidationError

LANDMARK_INSET = 0.8
BLUM_ANGLE = math.radians(160.0)  # posterior end of the chord on condyle A
BLUM_CHORD_END = math.radians(35.0)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    canvas: tuple[int, int] = (256, 256)
    femur_shaft_angle: float = 0.0
    condyle_radius: float = 36.0
    overlap_fraction: float = 0.3
    noise_std: float = 0.02
    sphere_diameter_px: float | None = None
    offset: tuple[float, float] = (0.0, 0.0)

    def validate(self) -> None:
        h, w = self.canvas
        if h < 128 or w < 128:
            raise ConfigError(f"canvas must be at least 128x128, got {self.canvas}")
        if not self.condyle_radius > 0:
            raise ConfigError("condyle_radius must be positive")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ConfigError("overlap_fraction must lie in [0, 1]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if self.sphere_diameter_px is not None and not self.sphere_diameter_px > 0:
            raise ConfigError("sphere_diameter_px must be positive")


def random_spec(seed: int, canvas=(256, 256), **overrides) -> PhantomSpec:
    """Draw a plausible phantom spec (angle, condyle size, overlap) from ``seed``."""
    rng = np.random.default_rng(seed)
    s = min(canvas)
    params = dict(
        seed=seed,
        canvas=tuple(canvas),
        femur_shaft_angle=float(rng.uniform(-12.0, 12.0)),
        condyle_radius=float(rng.uniform(0.125, 0.155) * s),
        overlap_fraction=float(rng.uniform(0.15, 0.45)),
        noise_std=0.02,
        sphere_diameter_px=float(rng.uniform(0.08, 0.11) * s),
        offset=(float(rng.uniform(-0.03, 0.03) * s), float(rng.uniform(-0.03, 0.03) * s)),
    )
    params.update(overrides)
    return PhantomSpec(**params)


class _Layout:
    """Local-frame shape parameters and the local <-> image rigid motion."""

    def __init__(self, spec: PhantomSpec):
        h, w = spec.canvas
        s = float(min(h, w))
        self.s = s
        self.centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        theta = math.radians(spec.femur_shaft_angle)
        c, sn = math.cos(theta), math.sin(theta)
        self.rot = np.array([[c, -sn], [sn, c]])
        self.shift = self.centre + np.asarray(spec.offset, dtype=float)

        cx, cy = self.centre
        r = spec.condyle_radius
        self.r = r
        self.xp = cx - 0.14 * s  # posterior cortex line x = xp
        self.shaft_width = 0.22 * s
        self.ya = cy + 0.12 * s  # condyle A centre row, also shaft end
        self.ca = np.array([self.xp + 0.7 * r, self.ya])
        self.cb = np.array([self.xp + 0.95 * r, self.ya + 0.1 * r])
        self.rb = 0.9 * r
        y_tmc = self.ya - math.sqrt(r * r - (0.7 * r) ** 2)
        self.tmc_exact = np.array([self.xp, y_tmc])
        self.tmc = np.array([self.xp + LANDMARK_INSET, y_tmc])
        u = np.array([math.cos(BLUM_ANGLE), math.sin(BLUM_ANGLE)])
        self.blum = self.ca + (r - LANDMARK_INSET) * u
        self.blum_far = self.ca + (r - LANDMARK_INSET) * np.array(
            [math.cos(BLUM_CHORD_END), math.sin(BLUM_CHORD_END)])
        self.prox = np.array([self.xp, cy - 0.42 * s])
        self.dist = np.array([self.xp, y_tmc - 0.045 * s])

        self.patella_c = np.array([self.xp + self.shaft_width + 0.11 * s, self.ya - 0.06 * s])
        self.patella_ax = (0.055 * s, 0.12 * s)
        ov = spec.overlap_fraction
        self.tibia_top = self.ya + r + 2.0 - ov * 0.6 * r
        self.tibia_x = (self.xp - 0.05 * s, self.xp + self.shaft_width + 0.08 * s)
        wf = 0.07 * s
        self.fibula_x = (self.tibia_x[0] - wf * (1.0 - ov), self.tibia_x[0] + wf * ov)
        self.fibula_top = self.tibia_top + 0.12 * s
        self.corner = 0.04 * s
        self.sphere_c = np.array([cx + 0.3 * s, cy - 0.32 * s])

    def to_image(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return (pts - self.centre) @ self.rot.T + self.shift

    def to_local(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return (pts - self.shift) @ self.rot + self.centre


def _in_disc(x, y, c, r):
    return (x - c[0]) ** 2 + (y - c[1]) ** 2 <= r * r


def _in_rounded_rect(x, y, x0, x1, y0, y1, rad):
    """Axis-aligned rectangle with rounded corners (``y1`` may be +inf)."""
    inside = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    cx = np.clip(x, x0 + rad, x1 - rad)
    cy = np.clip(y, y0 + rad, y1 - rad)
    return inside & ((x - cx) ** 2 + (y - cy) ** 2 <= rad * rad)


def _shape_masks(lay: _Layout, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Membership of local-frame points in (femur, patella, tibia, fibula)."""
    big = 4.0 * lay.s
    shaft = (x >= lay.xp) & (x <= lay.xp + lay.shaft_width) & (y >= -big) & (y <= lay.ya)
    femur = shaft | _in_disc(x, y, lay.ca, lay.r) | _in_disc(x, y, lay.cb, lay.rb)
    ax, ay = lay.patella_ax
    patella = ((x - lay.patella_c[0]) / ax) ** 2 + ((y - lay.patella_c[1]) / ay) ** 2 <= 1.0
    tibia = _in_rounded_rect(x, y, *lay.tibia_x, lay.tibia_top, big, lay.corner)
    fibula = _in_rounded_rect(x, y, *lay.fibula_x, lay.fibula_top, big, lay.corner / 2)
    return np.stack([femur, patella, tibia, fibula])


def rasterize_masks(spec: PhantomSpec, image_to_canvas=None, shape=None) -> np.ndarray:
    """Exact (4, H, W) masks of the phantom shapes.

    ``image_to_canvas`` is an optional 2x3 affine mapping phantom image
    coordinates to the output canvas; shapes are rasterized after it.
    """
    lay = _Layout(spec)
    h, w = shape or spec.canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    if image_to_canvas is not None:
        m = np.asarray(image_to_canvas, dtype=float)
        a_inv = np.linalg.inv(m[:, :2])
        pts = (pts - m[:, 2]) @ a_inv.T
    loc = lay.to_local(pts)
    return _shape_masks(lay, loc[:, 0], loc[:, 1]).reshape(4, h, w)


def _chord_distance(lay: _Layout, x, y):
    a, b = lay.blum, lay.blum_far
    d = b - a
    t = np.clip(((x - a[0]) * d[0] + (y - a[1]) * d[1]) / d.dot(d), 0.0, 1.0)
    return np.hypot(x - (a[0] + t * d[0]), y - (a[1] + t * d[1]))


def generate_phantom(spec: PhantomSpec) -> Sample:
    spec.validate()
    lay = _Layout(spec)
    h, w = spec.canvas
    masks = rasterize_masks(spec)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    loc = lay.to_local(np.stack([xx.ravel(), yy.ravel()], axis=1))
    lx, ly = loc[:, 0].reshape(h, w), loc[:, 1].reshape(h, w)

    # superimposition: attenuation adds up where bones overlap
    img = 0.08 + 0.12 * np.exp(-(((lx - lay.centre[0]) / (0.45 * lay.s)) ** 2))
    img = img + masks.astype(float).T.dot([0.34, 0.26, 0.32, 0.26]).T
    img += 0.12 * np.exp(-0.5 * (_chord_distance(lay, lx, ly) / 1.2) ** 2) * masks[0]
    mm_per_px = None
    if spec.sphere_diameter_px is not None:
        c = lay.to_image(lay.sphere_c)
        sphere = (xx - c[0]) ** 2 + (yy - c[1]) ** 2 <= (spec.sphere_diameter_px / 2.0) ** 2
        img = np.where(sphere, img + 0.45, img)
        mm_per_px = calibrate_spacing(spec.sphere_diameter_px)
    rng = np.random.default_rng(spec.seed)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    pts = lay.to_image(np.stack([lay.blum, lay.tmc, lay.prox, lay.dist]))
    for name, (x, y) in zip(("p_blum", "p_tmc", "p_prox", "p_dist"), pts):
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            raise ValidationError(f"phantom {name} falls outside the canvas for {spec}")
    ann = AnnotationSet(*pts, masks=masks)
    image = GrayImage(img, mm_per_px, source_id=f"phantom_{spec.seed:05d}")
    return Sample(image, ann, "train", meta={"phantom_spec": spec})


def analytic_cortex_line(spec: PhantomSpec):
    """Exact posterior cortex line as ``(unit normal, offset)`` in image coordinates.

    The normal points anteriorly (into the femur).
    """
    lay = _Layout(spec)
    n = lay.rot @ np.array([1.0, 0.0])
    p = lay.to_image(np.array([lay.xp, lay.ya]))
    return n, float(n @ p)


def analytic_schoettle(spec: PhantomSpec) -> tuple[np.ndarray, float]:
    """Exact Schoettle point (image px) and incircle radius for ``spec``."""
    spec.validate()
    lay = _Layout(spec)
    y_b, y_t = lay.blum[1], lay.tmc[1]
    radius = abs(y_b - y_t) / 2.0
    centre_local = np.array([lay.xp + radius, (y_b + y_t) / 2.0])
    return lay.to_image(centre_local), float(radius)


def transformed_spec(spec: PhantomSpec, angle: float = 0.0, shift=(0.0, 0.0)) -> PhantomSpec:
    """Spec rigidly moved by ``angle`` degrees about the canvas centre then ``shift``."""
    theta = math.radians(angle)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    off = rot @ np.asarray(spec.offset, dtype=float) + np.asarray(shift, dtype=float)
    return replace(spec, femur_shaft_angle=spec.femur_shaft_angle + angle, offset=(float(off[0]), float(off[1])))
