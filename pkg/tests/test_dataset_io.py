import json

import numpy as np
import pytest

from kneeplan.dataset_io import (BONES, AnnotationSet, GrayImage, Sample, calibrate_spacing, load_dataset,
                                 load_sample, read_split, save_sample, split_dataset, write_split)
from kneeplan.errors import DatasetLoadError, ValidationError
from kneeplan.phantom import generate_phantom, random_spec


def make_sample(shape=(40, 50), **points):
    masks = np.zeros((4,) + shape, bool)
    masks[0, 5:20, 5:30] = True
    pts = dict(p_blum=(10.0, 12.0), p_tmc=(20.0, 14.5), p_prox=(8.0, 2.0), p_dist=(9.0, 30.0))
    pts.update(points)
    ann = AnnotationSet(*(np.asarray(pts[k], float) for k in ("p_blum", "p_tmc", "p_prox", "p_dist")), masks=masks)
    pix = np.linspace(0, 1, shape[0] * shape[1]).reshape(shape)
    return Sample(GrayImage(pix, 0.2, "s1"), ann)


def test_calibrate_spacing():
    assert calibrate_spacing(150.0) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        calibrate_spacing(0.0)


def test_image_validation():
    with pytest.raises(ValidationError):
        GrayImage(np.full((4, 4), 1.5), None, "x")
    with pytest.raises(ValidationError):
        GrayImage(np.zeros((4, 4)), -1.0, "x")


def test_identical_line_points_rejected():
    with pytest.raises(ValidationError):
        make_sample(p_dist=(8.0, 2.0))


def test_point_outside_rejected():
    with pytest.raises(ValidationError):
        make_sample(p_blum=(60.0, 12.0))


def test_round_trip(tmp_path):
    s = make_sample()
    save_sample(s, tmp_path / "s1")
    back = load_sample(tmp_path / "s1")
    np.testing.assert_allclose(back.image.pixels, s.image.pixels, atol=1 / 65535)
    assert np.array_equal(back.annotation.masks, s.annotation.masks)
    for k, v in s.annotation.points().items():
        np.testing.assert_array_equal(back.annotation.points()[k], v)
    assert back.image.mm_per_px == 0.2 and back.sample_id == "s1"


def test_round_trip_phantom(tmp_path):
    s = generate_phantom(random_spec(4))
    save_sample(s, tmp_path / s.sample_id)
    back = load_sample(tmp_path / s.sample_id)
    assert np.array_equal(back.annotation.masks, s.annotation.masks)
    np.testing.assert_allclose(back.image.pixels, s.image.pixels, atol=1 / 65535)


def test_missing_file_named(tmp_path):
    s = make_sample()
    root = save_sample(s, tmp_path / "s1")
    (root / "mask_tibia.png").unlink()
    with pytest.raises(DatasetLoadError, match="mask_tibia.png"):
        load_sample(root)
    (root / "image.png").unlink()
    with pytest.raises(DatasetLoadError, match="image.png"):
        load_sample(root)


def test_missing_annotation_keys(tmp_path):
    root = save_sample(make_sample(), tmp_path / "s1")
    raw = json.loads((root / "annotation.json").read_text())
    del raw["p_tmc"]
    (root / "annotation.json").write_text(json.dumps(raw))
    with pytest.raises(ValidationError, match="p_tmc"):
        load_sample(root)


def test_split_counts_and_determinism():
    ids = list(range(185))
    tr, va = split_dataset(ids, n_train=149, seed=5)
    assert len(tr) == 149 and len(va) == 36
    assert sorted(tr + va) == ids
    assert split_dataset(ids, n_train=149, seed=5) == (tr, va)
    assert split_dataset(ids, n_train=149, seed=6) != (tr, va)
    tr, va = split_dataset(list(range(10)), ratio=0.8)
    assert len(tr) == 8 and len(va) == 2
    with pytest.raises(ValueError):
        split_dataset([])


def test_split_file_and_load_dataset(tmp_path):
    for i in range(3):
        s = generate_phantom(random_spec(i))
        save_sample(s, tmp_path / s.sample_id)
    write_split(tmp_path, {"train": ["phantom_00000", "phantom_00001"], "test": ["phantom_00002"]})
    assert read_split(tmp_path)["val"] == []
    data = load_dataset(tmp_path)
    assert [s.sample_id for s in data["train"]] == ["phantom_00000", "phantom_00001"]
    assert data["test"][0].split_tag == "test"
    assert len(BONES) == 4


def test_missing_split_file(tmp_path):
    with pytest.raises(DatasetLoadError, match="split.json"):
        read_split(tmp_path)
