import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from matevit.data import (IGNORE_INDEX, SyntheticSpec, TaskSample, augment, generate_synthetic, hflip,
                          load_all, load_dataset, resize, save_dataset)
from matevit.errors import DatasetError
from matevit.numerics import make_rng

TASKS = [(0, "object", 5), (1, "material", 4)]


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(SyntheticSpec(n_images=4, image_size=32))


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(object_classes=1)
    with pytest.raises(DatasetError):
        generate_synthetic(SyntheticSpec(n_images=0))


def test_generation_is_deterministic(synth):
    again = generate_synthetic(SyntheticSpec(n_images=4, image_size=32))
    for a, b in zip(synth, again):
        assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()


def test_both_tasks_per_image_and_label_ranges(synth):
    assert [s.task_id for s in synth] == [0, 1] * 4
    for s in synth:
        k = 5 if s.task_id == 0 else 4
        assert s.mask.max() < k
        assert s.image.dtype == np.float32 and 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_every_class_appears_over_64_images():
    samples = generate_synthetic(SyntheticSpec(n_images=64, image_size=32, seed=3))
    for task, k in ((0, 5), (1, 4)):
        seen = set(np.concatenate([np.unique(s.mask) for s in samples if s.task_id == task]).tolist())
        assert seen == set(range(k))


def test_flip_involution(synth):
    s = synth[0]
    twice = hflip(hflip(s))
    np.testing.assert_array_equal(twice.image, s.image)
    np.testing.assert_array_equal(twice.mask, s.mask)


def test_unit_scale_is_identity(synth):
    s = synth[1]
    out = augment(s, make_rng(0), crop=32, scale=1.0, flip=False)
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.mask, s.mask)
    assert resize(s, (32, 32)) is s


def test_downscale_pads_with_ignore(synth):
    out = augment(synth[0], make_rng(0), crop=32, scale=0.5, flip=False)
    assert (out.mask == IGNORE_INDEX).mean() == pytest.approx(0.75)
    assert np.all(out.image[out.mask == IGNORE_INDEX] == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 7))
def test_augment_contract(seed, which):
    samples = generate_synthetic(SyntheticSpec(n_images=4, image_size=32))
    s = samples[which]
    out = augment(s, make_rng(seed), crop=32)
    assert out.image.shape == (32, 32, 3) and out.mask.shape == (32, 32)
    allowed = set(np.unique(s.mask).tolist()) | {IGNORE_INDEX}
    assert set(np.unique(out.mask).tolist()) <= allowed
    again = augment(s, make_rng(seed), crop=32)
    np.testing.assert_array_equal(out.image, again.image)


def test_sample_shape_check():
    with pytest.raises(DatasetError):
        TaskSample(np.zeros((4, 4, 3)), np.zeros((4, 5), np.uint8), 0)


def test_disk_round_trip(tmp_path, synth):
    save_dataset(synth, tmp_path, TASKS)
    samples, tasks = load_all(tmp_path)
    assert tasks == TASKS and len(samples) == len(synth)
    for a in synth:
        b = next(s for s in samples if s.name == a.name and s.task_id == a.task_id)
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_allclose(a.image, b.image, atol=0.5 / 255 + 1e-6)


def test_load_two_pairs(tmp_path, synth):
    save_dataset(synth[:4], tmp_path, TASKS)
    assert len(load_dataset(tmp_path, 0, 5)) == 2


def test_load_errors_name_the_file(tmp_path, synth):
    with pytest.raises(DatasetError, match="no images"):
        load_dataset(tmp_path, 0, 5)
    save_dataset(synth[:2], tmp_path, TASKS)
    bad = tmp_path / "masks_object" / "synth_0000.png"
    mask = np.asarray(Image.open(bad)).copy()
    mask[0, 0] = 5
    Image.fromarray(mask).save(bad)
    with pytest.raises(DatasetError, match="synth_0000.png"):
        load_dataset(tmp_path, 0, 5)
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(bad)
    with pytest.raises(DatasetError, match="synth_0000.png"):
        load_dataset(tmp_path, 0, 5)
    bad.unlink()
    with pytest.raises(DatasetError, match="missing mask"):
        load_dataset(tmp_path, 0, 5)
