"""Training-time augmentation and normalization to the square network input."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset_io import AnnotationSet, GrayImage, Sample, POINT_KEYS

INPUT_SIZE = 256


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.5
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    scale: tuple[float, float] = (0.9, 1.1)
    contrast_gain: tuple[float, float] = (0.75, 1.25)
    contrast_bias: tuple[float, float] = (-0.1, 0.1)
    max_retries: int = 10


@dataclass(frozen=True)
class AugmentDraw:
    """One concrete augmentation: a spatial affine plus a contrast map."""

    flip: bool = False
    angle: float = 0.0
    scale: float = 1.0
    gain: float = 1.0
    bias: float = 0.0

    def matrix(self, shape) -> np.ndarray:
        """2x3 affine mapping input (x, y) to output (x, y): flip -> rotate -> scale."""
        h, w = shape
        c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        a = np.eye(2)
        t = np.zeros(2)
        if self.flip:
            a = np.array([[-1.0, 0.0], [0.0, 1.0]])
            t = np.array([w - 1.0, 0.0])
        th = math.radians(self.angle)
        rs = self.scale * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        # about the canvas centre
        return np.hstack([rs @ a, (rs @ (t - c) + c)[:, None]])


def draw_augmentation(rng: np.random.Generator, params: AugmentConfig) -> AugmentDraw:
    p = params.probability
    flip = bool(rng.random() < p)
    angle = float(rng.uniform(*params.rotation_deg)) if rng.random() < p else 0.0
    scale = float(rng.uniform(*params.scale)) if rng.random() < p else 1.0
    if rng.random() < p:
        gain, bias = float(rng.uniform(*params.contrast_gain)), float(rng.uniform(*params.contrast_bias))
    else:
        gain, bias = 1.0, 0.0
    return AugmentDraw(flip, angle, scale, gain, bias)


def transform_points(matrix: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    return pts @ matrix[:, :2].T + matrix[:, 2]


def _warp(arr: np.ndarray, matrix: np.ndarray, out_shape, order: int) -> np.ndarray:
    """Resample ``arr`` so that output(x, y) = arr(M^-1 (x, y)); zero outside."""
    a_inv = np.linalg.inv(matrix[:, :2])
    t_inv = -a_inv @ matrix[:, 2]
    # ndimage works in (row, col)
    swap = np.array([[0, 1], [1, 0]])
    return ndimage.affine_transform(
        arr, swap @ a_inv @ swap, offset=swap @ t_inv, output_shape=out_shape,
        order=order, mode="constant", cval=0.0,
    )


def apply_augmentation(sample: Sample, draw: AugmentDraw) -> Sample:
    shape = sample.image.shape
    m = draw.matrix(shape)
    identity = np.allclose(m, np.hstack([np.eye(2), np.zeros((2, 1))]))
    pix = sample.image.pixels if identity else _warp(sample.image.pixels, m, shape, order=1)
    pix = np.clip(draw.gain * pix + draw.bias, 0.0, 1.0)
    if identity:
        masks = sample.annotation.masks.copy()
    else:
        masks = np.stack([_warp(mk.astype(np.uint8), m, shape, order=0) > 0
                          for mk in sample.annotation.masks])
    pts = transform_points(m, np.stack(list(sample.annotation.points().values())))
    image = GrayImage(pix, sample.image.mm_per_px, sample.image.source_id)
    ann = AnnotationSet(*pts, masks=masks)
    meta = dict(sample.meta, augmentation=draw)
    return Sample(image, ann, sample.split_tag, meta)


def _points_inside(pts: np.ndarray, shape) -> bool:
    h, w = shape
    return bool(np.all((pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)))


def augment_sample(sample: Sample, rng_seed: int, params: AugmentConfig | None = None) -> Sample:
    """Randomly flip/rotate/scale/contrast-stretch ``sample`` (each with prob. p).

    Draws that push any reference point off the canvas are redrawn up to
    ``max_retries`` times; after that the sample is returned unchanged with
    ``meta["augment_skipped"] = True``.
    """
    params = params or AugmentConfig()
    rng = np.random.default_rng(rng_seed)
    pts = np.stack(list(sample.annotation.points().values()))
    for _ in range(params.max_retries + 1):
        draw = draw_augmentation(rng, params)
        if _points_inside(transform_points(draw.matrix(sample.image.shape), pts), sample.image.shape):
            return apply_augmentation(sample, draw)
    return Sample(sample.image, sample.annotation, sample.split_tag,
                  dict(sample.meta, augment_skipped=True))


@dataclass(frozen=True)
class NormalizeTransform:
    """Zero-pad to square then scale: ``u = (x + pad) * scale``."""

    original_shape: tuple[int, int]
    pad_x: int
    pad_y: int
    scale: float
    size: int = INPUT_SIZE

    def forward(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return (pts + np.array([self.pad_x, self.pad_y])) * self.scale

    def inverse(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts / self.scale - np.array([self.pad_x, self.pad_y])

    @property
    def is_identity(self) -> bool:
        return self.pad_x == 0 and self.pad_y == 0 and self.scale == 1.0

    def to_original(self, arr: np.ndarray, order: int = 1) -> np.ndarray:
        """Resample an input-resolution map back onto the original pixel grid."""
        if self.is_identity:
            return np.array(arr, copy=True)
        h, w = self.original_shape
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        u = self.forward(np.stack([xx.ravel(), yy.ravel()], axis=1))
        out = ndimage.map_coordinates(np.asarray(arr, dtype=float), [u[:, 1], u[:, 0]],
                                      order=order, mode="nearest")
        return out.reshape(h, w)

    def to_dict(self) -> dict:
        return {"original_shape": list(self.original_shape), "pad_x": self.pad_x,
                "pad_y": self.pad_y, "scale": self.scale, "size": self.size}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizeTransform":
        return cls(tuple(d["original_shape"]), int(d["pad_x"]), int(d["pad_y"]),
                   float(d["scale"]), int(d.get("size", INPUT_SIZE)))


def normalize_transform(shape, size: int = INPUT_SIZE) -> NormalizeTransform:
    h, w = shape
    side = max(h, w)
    return NormalizeTransform((h, w), (side - w) // 2, (side - h) // 2, size / side, size)


def _resample(arr: np.ndarray, tr: NormalizeTransform, order: int) -> np.ndarray:
    h, w = tr.original_shape
    side = max(h, w)
    padded = np.zeros((side, side), dtype=arr.dtype)
    padded[tr.pad_y:tr.pad_y + h, tr.pad_x:tr.pad_x + w] = arr
    if tr.scale == 1.0:
        return padded
    src = padded.astype(float)
    if order > 0 and tr.scale < 1.0:
        src = ndimage.gaussian_filter(src, sigma=(1.0 / tr.scale - 1.0) / 2.0)
    step = 1.0 / tr.scale
    return ndimage.affine_transform(src, np.diag([step, step]), output_shape=(tr.size, tr.size),
                                    order=order, mode="constant", cval=0.0)


def normalize_to_input(sample: Sample, size: int = INPUT_SIZE) -> tuple[Sample, NormalizeTransform]:
    tr = normalize_transform(sample.image.shape, size)
    pix = np.clip(_resample(sample.image.pixels, tr, order=1), 0.0, 1.0)
    masks = np.stack([_resample(m.astype(np.uint8), tr, order=0) > 0 for m in sample.annotation.masks])
    pts = tr.forward(np.stack([sample.annotation.points()[k] for k in POINT_KEYS]))
    mm = sample.image.mm_per_px
    image = GrayImage(pix, None if mm is None else mm / tr.scale, sample.image.source_id)
    ann = AnnotationSet(*pts, masks=masks)
    return Sample(image, ann, sample.split_tag, dict(sample.meta, normalize=tr)), tr
