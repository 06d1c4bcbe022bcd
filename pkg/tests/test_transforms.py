import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from idealdml.transforms import (
    DataAugConfig,
    DomainSet,
    apply_data_aug,
    augment_batch,
    flip_horizontal,
    rotate90,
    rotate_each,
    transform_batch,
)

from oracles import rotate_ccw_loops

images = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)),
                elements=st.floats(-1e3, 1e3, allow_nan=False))


def test_rotate_2x2_example():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    out = rotate90(np.array([[[a, b], [c, d]]]), 1)
    assert np.array_equal(out[0], [[b, d], [a, c]])


def test_rotate_matches_loop_oracle():
    img = np.random.default_rng(0).normal(size=(2, 5, 3))
    assert np.array_equal(rotate90(img, 1), rotate_ccw_loops(img))
    assert np.array_equal(rotate90(img, 2), rotate_ccw_loops(rotate_ccw_loops(img)))


@settings(max_examples=200, deadline=None)
@given(images, st.integers(0, 3), st.integers(0, 3))
def test_rotation_composition_is_z4(img, i, j):
    assert np.array_equal(rotate90(rotate90(img, i), j), rotate90(img, (i + j) % 4))


@settings(max_examples=100, deadline=None)
@given(images)
def test_identity_and_four_turns(img):
    assert rotate90(img, 0).tobytes() == img.tobytes()
    assert np.array_equal(rotate90(rotate90(rotate90(rotate90(img, 1), 1), 1), 1), img)


@settings(max_examples=100, deadline=None)
@given(images, st.integers(0, 3))
def test_rotation_is_a_permutation(img, i):
    out = rotate90(img, i)
    assert np.array_equal(np.sort(out, axis=None), np.sort(img, axis=None))


def test_rotate_returns_a_copy():
    img = np.zeros((1, 3, 3))
    out = rotate90(img, 0)
    out[0, 0, 0] = 1.0
    assert img[0, 0, 0] == 0.0


def test_transform_batch_rotates_every_item():
    batch = np.random.default_rng(1).normal(size=(4, 1, 5, 5))
    out = transform_batch(batch, 3)
    for n in range(4):
        assert np.array_equal(out[n], rotate90(batch[n], 3))


def test_rotate_each():
    batch = np.random.default_rng(2).normal(size=(4, 1, 4, 4))
    rots = np.array([0, 1, 2, 3])
    out = rotate_each(batch, rots)
    for n, r in enumerate(rots):
        assert np.array_equal(out[n], rotate90(batch[n], r))


def test_domain_set_validation():
    assert DomainSet().degrees == [0, 90, 180, 270]
    assert len(DomainSet((0, 2))) == 2
    for bad in [(1, 2), (0, 0), (0, 4), ()]:
        with pytest.raises(ValueError):
            DomainSet(bad)


def test_data_aug_is_label_preserving_identity_when_disabled():
    img = np.random.default_rng(3).normal(size=(1, 8, 8))
    out = apply_data_aug(img, DataAugConfig(), np.random.default_rng(0))
    assert np.array_equal(out, img)


def test_data_aug_crop_and_flip_keep_shape_and_are_deterministic():
    batch = np.random.default_rng(4).normal(size=(5, 1, 8, 8))
    cfg = DataAugConfig(pad=2, crop_size=8, flip_prob=0.5)
    a = augment_batch(batch, cfg, np.random.default_rng(9))
    b = augment_batch(batch, cfg, np.random.default_rng(9))
    assert a.shape == batch.shape and np.array_equal(a, b)


def test_flip_always():
    img = np.arange(6.0).reshape(1, 2, 3)
    out = apply_data_aug(img, DataAugConfig(flip_prob=1.0), np.random.default_rng(0))
    assert np.array_equal(out, flip_horizontal(img))
    assert np.array_equal(out[0], [[2, 1, 0], [5, 4, 3]])


def test_data_aug_config_validation():
    with pytest.raises(ValueError):
        DataAugConfig(pad=-1)
    with pytest.raises(ValueError):
        DataAugConfig(flip_prob=1.5)
