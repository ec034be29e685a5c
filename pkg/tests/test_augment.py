import numpy as np
import pytest
from scipy import ndimage

from kneeplan.augment import (AugmentConfig, AugmentDraw, NormalizeTransform, apply_augmentation, augment_sample,
                              normalize_to_input, normalize_transform, transform_points)
from kneeplan.dataset_io import BONES, AnnotationSet, GrayImage, Sample
from kneeplan.phantom import generate_phantom, random_spec, rasterize_masks


def test_identity_draw_is_noop():
    s = generate_phantom(random_spec(1))
    out = apply_augmentation(s, AugmentDraw())
    assert np.array_equal(out.image.pixels, s.image.pixels)
    assert np.array_equal(out.annotation.masks, s.annotation.masks)
    for k, v in s.annotation.points().items():
        np.testing.assert_allclose(out.annotation.points()[k], v)


def test_flip_maps_x():
    m = AugmentDraw(flip=True).matrix((100, 200))
    np.testing.assert_allclose(transform_points(m, [[0.0, 5.0], [199.0, 7.0]]), [[199.0, 5.0], [0.0, 7.0]])


def test_flip_is_exact_on_pixels():
    s = generate_phantom(random_spec(2))
    out = apply_augmentation(s, AugmentDraw(flip=True))
    np.testing.assert_allclose(out.image.pixels, s.image.pixels[:, ::-1], atol=1e-12)
    assert np.array_equal(out.annotation.masks, s.annotation.masks[:, :, ::-1])


def test_contrast_map_clipped():
    s = generate_phantom(random_spec(3))
    out = apply_augmentation(s, AugmentDraw(gain=1.25, bias=0.1))
    np.testing.assert_allclose(out.image.pixels, np.clip(1.25 * s.image.pixels + 0.1, 0, 1))


def test_zero_probability_is_identity():
    s = generate_phantom(random_spec(4))
    out = augment_sample(s, 123, AugmentConfig(probability=0.0))
    assert np.array_equal(out.image.pixels, s.image.pixels)


def test_seeded_determinism():
    s = generate_phantom(random_spec(5))
    a, b = augment_sample(s, 77), augment_sample(s, 77)
    assert np.array_equal(a.image.pixels, b.image.pixels)
    assert a.meta["augmentation"] == b.meta["augmentation"]


def test_draw_ranges_respected():
    s = generate_phantom(random_spec(6))
    for seed in range(40):
        out = augment_sample(s, seed, AugmentConfig(probability=1.0))
        d = out.meta.get("augmentation")
        if d is None:
            continue
        assert d.flip and -15 <= d.angle <= 15 and 0.9 <= d.scale <= 1.1
        assert 0.75 <= d.gain <= 1.25 and -0.1 <= d.bias <= 0.1


def test_retry_fallback_when_points_cannot_stay_inside():
    shape = (64, 64)
    masks = np.zeros((4,) + shape, bool)
    pts = [np.array(p, float) for p in ((0.0, 0.0), (63.0, 63.0), (0.0, 63.0), (63.0, 0.0))]
    s = Sample(GrayImage(np.zeros(shape), None, "corner"), AnnotationSet(*pts, masks=masks))
    cfg = AugmentConfig(probability=1.0, rotation_deg=(20.0, 30.0), scale=(1.05, 1.1), max_retries=3)
    out = augment_sample(s, 0, cfg)
    assert out.meta.get("augment_skipped") is True
    assert np.array_equal(out.image.pixels, s.image.pixels)


@pytest.mark.parametrize("seed", range(6))
def test_mask_consistency_with_exact_rasterization(seed):
    spec = random_spec(seed, canvas=(512, 512))
    s = generate_phantom(spec)
    draw = AugmentDraw(flip=bool(seed % 2), angle=-12.0 + 5 * seed, scale=0.92 + 0.03 * seed)
    out = apply_augmentation(s, draw)
    m = draw.matrix(s.image.shape)
    exact = rasterize_masks(spec, image_to_canvas=m)
    # only compare where the warped canvas is covered by the source image
    src_valid = apply_augmentation(Sample(s.image, AnnotationSet(*s.annotation.points().values(),
                                                                 masks=np.ones_like(s.annotation.masks)),
                                          s.split_tag), draw).annotation.masks[0]
    valid = ndimage.binary_erosion(src_valid, iterations=3)
    for k, bone in enumerate(BONES):
        a, b = out.annotation.masks[k] & valid, exact[k] & valid
        band = ndimage.binary_dilation(exact[k], iterations=1) & ~ndimage.binary_erosion(exact[k], iterations=1)
        assert not np.any((a ^ b) & ~band), bone
        if bone in ("femur", "tibia"):
            assert (a & b).sum() / (a | b).sum() >= 0.99, bone


def test_normalize_forward_example():
    tr = normalize_transform((400, 300), 256)
    assert (tr.pad_x, tr.pad_y) == (50, 0)
    np.testing.assert_allclose(tr.forward([[100.0, 300.0]]), [[96.0, 192.0]])


def test_normalize_spec_example():
    tr = NormalizeTransform((300, 400), 0, 50, 256 / 400, 256)
    np.testing.assert_allclose(tr.forward([[100.0, 300.0]]), [[64.0, 224.0]])
    # a 512x256 (height x width) radiograph is padded in x and halved
    tr = normalize_transform((512, 256), 256)
    assert (tr.pad_x, tr.pad_y, tr.scale) == (128, 0, 0.5)
    np.testing.assert_allclose(tr.forward([[100.0, 300.0]]), [[114.0, 150.0]])


def test_normalize_inverse_round_trip():
    rng = np.random.default_rng(0)
    for shape in ((256, 256), (300, 500), (700, 210)):
        tr = normalize_transform(shape)
        pts = rng.uniform(0, min(shape), (50, 2))
        np.testing.assert_allclose(tr.inverse(tr.forward(pts)), pts, atol=1e-12)
        assert NormalizeTransform.from_dict(tr.to_dict()) == tr


def test_normalize_identity_at_input_size():
    s = generate_phantom(random_spec(0))
    norm, tr = normalize_to_input(s)
    assert tr.is_identity
    assert np.array_equal(norm.image.pixels, s.image.pixels)
    assert np.array_equal(norm.annotation.masks, s.annotation.masks)


def test_normalize_downsamples_and_rescales_spacing():
    s = generate_phantom(random_spec(1, canvas=(512, 384)))
    norm, tr = normalize_to_input(s)
    assert norm.image.shape == (256, 256)
    assert norm.image.mm_per_px == pytest.approx(s.image.mm_per_px * 2)
    np.testing.assert_allclose(norm.annotation.p_blum, tr.forward(s.annotation.p_blum))
    femur = norm.annotation.mask("femur")
    assert abs(femur.sum() * 4 - s.annotation.mask("femur").sum()) / s.annotation.mask("femur").sum() < 0.03
    back = tr.to_original(femur.astype(float), order=0) > 0.5
    assert (back & s.annotation.mask("femur")).sum() / (back | s.annotation.mask("femur")).sum() > 0.95
