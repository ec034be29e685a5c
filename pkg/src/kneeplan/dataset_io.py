"""On-disk sample format, loading/saving, calibration and train/val splitting.

A sample directory holds ``image.png`` (8 or 16 bit gray), one 0/255 PNG per
bone (``mask_femur.png`` ... ``mask_fibula.png``) and ``annotation.json``
with the four reference points as ``[x, y]`` pixel coordinates
(x = column, y = row, origin at the centre of the top-left pixel).
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetLoadError, ValidationError

BONES = ("femur", "patella", "tibia", "fibula")
POINT_KEYS = ("p_blum", "p_tmc", "p_prox", "p_dist")
SPLITS = ("train", "val", "test")
SPHERE_DIAMETER_MM = 30.0

IMAGE_FILE = "image.png"
ANNOTATION_FILE = "annotation.json"
SPLIT_FILE = "split.json"


def mask_filename(bone: str) -> str:
    return f"mask_{bone}.png"


@dataclass
class GrayImage:
    pixels: np.ndarray
    mm_per_px: float | None = None
    source_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ValidationError(f"image must be a non-empty 2D array, got shape {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValidationError("image intensities must lie in [0, 1]")
        if self.mm_per_px is not None and not self.mm_per_px > 0:
            raise ValidationError(f"mm_per_px must be positive, got {self.mm_per_px}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class AnnotationSet:
    p_blum: np.ndarray
    p_tmc: np.ndarray
    p_prox: np.ndarray
    p_dist: np.ndarray
    masks: np.ndarray  # (4, H, W) bool, order BONES

    def __post_init__(self):
        for key in POINT_KEYS:
            pt = np.asarray(getattr(self, key), dtype=np.float64).reshape(-1)
            if pt.shape != (2,) or not np.all(np.isfinite(pt)):
                raise ValidationError(f"{key} must be a finite 2D point")
            setattr(self, key, pt)
        self.masks = np.asarray(self.masks).astype(bool)
        if self.masks.ndim != 3 or self.masks.shape[0] != len(BONES):
            raise ValidationError(f"masks must have shape (4, H, W), got {self.masks.shape}")
        if np.allclose(self.p_prox, self.p_dist):
            raise ValidationError("p_prox and p_dist coincide")

    def points(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in POINT_KEYS}

    def mask(self, bone: str) -> np.ndarray:
        return self.masks[BONES.index(bone)]


@dataclass
class Sample:
    image: GrayImage
    annotation: AnnotationSet
    split_tag: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split_tag not in SPLITS:
            raise ValidationError(f"split_tag must be one of {SPLITS}, got {self.split_tag!r}")
        validate_sample(self)

    @property
    def sample_id(self) -> str:
        return self.image.source_id


def validate_sample(sample: Sample) -> None:
    h, w = sample.image.shape
    if sample.annotation.masks.shape[1:] != (h, w):
        raise ValidationError(
            f"mask shape {sample.annotation.masks.shape[1:]} does not match image shape {(h, w)}"
        )
    for key, (x, y) in sample.annotation.points().items():
        if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
            raise ValidationError(f"{key}=({x:.3f}, {y:.3f}) lies outside the {w}x{h} image")


def calibrate_spacing(sphere_diameter_px: float) -> float:
    """Pixel spacing in mm/px from the imaged diameter of a 30 mm sphere."""
    if not sphere_diameter_px > 0:
        raise ValueError(f"sphere diameter must be positive, got {sphere_diameter_px}")
    return SPHERE_DIAMETER_MM / sphere_diameter_px


def _read_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetLoadError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except OSError as exc:
        raise DatasetLoadError(f"cannot read {path}: {exc}") from exc
    if arr.ndim == 3:
        raise DatasetLoadError(f"{path} is not single-channel (mode {mode})")
    if arr.dtype == np.uint8 or mode == "L":
        return arr.astype(np.float64) / 255.0
    if arr.dtype == bool:
        return arr.astype(np.float64)
    # 16-bit PNGs surface as I;16 / I depending on the Pillow version
    return arr.astype(np.float64) / 65535.0


def load_sample(path, split_tag: str = "train") -> Sample:
    root = Path(path)
    pixels = _read_png(root / IMAGE_FILE)
    masks = np.stack([_read_png(root / mask_filename(b)) >= 0.5 for b in BONES])
    ann_path = root / ANNOTATION_FILE
    if not ann_path.is_file():
        raise DatasetLoadError(f"missing file: {ann_path}")
    try:
        raw = json.loads(ann_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetLoadError(f"malformed annotation {ann_path}: {exc}") from exc
    missing = [k for k in POINT_KEYS if k not in raw]
    if missing:
        raise ValidationError(f"{ann_path} lacks keys {missing}")
    for b, m in zip(BONES, masks):
        if m.shape != pixels.shape:
            raise ValidationError(f"{mask_filename(b)} has shape {m.shape}, image has {pixels.shape}")
    image = GrayImage(pixels, raw.get("mm_per_px"), source_id=root.name)
    ann = AnnotationSet(*(np.asarray(raw[k], dtype=np.float64) for k in POINT_KEYS), masks=masks)
    return Sample(image, ann, split_tag)


def save_sample(sample: Sample, path) -> Path:
    """Write ``sample`` as a sample directory; returns the directory path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    pix = np.round(sample.image.pixels * 65535.0).astype(np.uint16)
    Image.fromarray(pix).save(root / IMAGE_FILE)
    for bone, m in zip(BONES, sample.annotation.masks):
        Image.fromarray(np.where(m, 255, 0).astype(np.uint8)).save(root / mask_filename(bone))
    raw = {k: [float(v) for v in p] for k, p in sample.annotation.points().items()}
    if sample.image.mm_per_px is not None:
        raw["mm_per_px"] = float(sample.image.mm_per_px)
    (root / ANNOTATION_FILE).write_text(json.dumps(raw, indent=2) + "\n", encoding="utf-8")
    return root


def split_dataset(samples, ratio: float = 0.8, seed: int = 0, n_train: int | None = None):
    """Seeded shuffle-then-cut split into ``(train, val)``.

    ``n_train`` overrides the ratio with an explicit count (e.g. 149 of 185).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot split an empty sample list")
    if n_train is None:
        if not 0.0 < ratio < 1.0:
            raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
        n_train = round(ratio * len(samples))
    elif not 0 <= n_train <= len(samples):
        raise ValueError(f"n_train={n_train} out of range for {len(samples)} samples")
    order = list(range(len(samples)))
    random.Random(seed).shuffle(order)
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:]]
    return train, val


def write_split(root, split: dict[str, list[str]]) -> None:
    payload = {k: list(split.get(k, [])) for k in SPLITS}
    (Path(root) / SPLIT_FILE).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_split(root) -> dict[str, list[str]]:
    path = Path(root) / SPLIT_FILE
    if not path.is_file():
        raise DatasetLoadError(f"missing file: {path}")
    raw = json.loads(path.read_text(encoding="utf-8"))
    return {k: list(raw.get(k, [])) for k in SPLITS}


def load_dataset(root, splits=SPLITS) -> dict[str, list[Sample]]:
    """Load every sample listed in ``split.json`` grouped by split."""
    root = Path(root)
    index = read_split(root)
    return {s: [load_sample(root / sid, split_tag=s) for sid in index[s]] for s in splits}
