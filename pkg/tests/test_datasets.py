import json

import numpy as np
import pytest
from PIL import Image

from idealdml.datasets import (
    Dataset,
    GlyphConfig,
    base_glyphs,
    export_image_folder,
    generate_synthetic,
    load_image_folder,
    render_glyph,
    split_train_test,
    take_per_class,
)
from idealdml.errors import ConfigError
from idealdml.transforms import rotate90

SMALL = dict(num_base_shapes=3, samples_per_class=4, image_size=32)
NO_JITTER = dict(translate=0, vertex_jitter=0.0, noise_sigma=0.0, stripe_sigma=0.0)


def test_same_seed_bit_identical():
    a = generate_synthetic(GlyphConfig(**SMALL, stripe_sigma=0.2))
    b = generate_synthetic(GlyphConfig(**SMALL, stripe_sigma=0.2))
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_different_seed_differs():
    a = generate_synthetic(GlyphConfig(**SMALL, seed=0))
    b = generate_synthetic(GlyphConfig(**SMALL, seed=1))
    assert not np.array_equal(a.images, b.images)


def test_class_count_and_values():
    ds = generate_synthetic(GlyphConfig(**SMALL))
    assert ds.classes.size == 12 == GlyphConfig(**SMALL).num_classes
    assert len(ds) == 48
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.geometry == (1, 32, 32)
    assert ds.class_names[5] == "glyph01_rot090"


def test_without_orientation_classes():
    ds = generate_synthetic(GlyphConfig(**SMALL, orientation_classes=False))
    assert ds.classes.size == 3


@pytest.mark.parametrize("o", range(4))
def test_zero_jitter_rotation_is_successor_class(o):
    ds = generate_synthetic(GlyphConfig(**SMALL, **NO_JITTER))
    for s in range(3):
        src = ds.images[ds.labels == 4 * s + o][0]
        dst = ds.images[ds.labels == 4 * s + (o + 1) % 4][0]
        assert np.array_equal(rotate90(src, 1), dst)


def test_rotation_changes_class_for_canonical_glyphs():
    cfg = GlyphConfig(**SMALL)
    for poly in base_glyphs(cfg):
        canon = [render_glyph(poly, o, cfg, None) for o in range(4)]
        for a in range(4):
            for b in range(a + 1, 4):
                assert not np.array_equal(canon[a], canon[b])


def test_small_image_is_config_error():
    with pytest.raises(ConfigError):
        GlyphConfig(image_size=15)


def test_blob_variant():
    ds = generate_synthetic(GlyphConfig(kind="blob", num_base_shapes=4, samples_per_class=3, image_size=16))
    assert ds.classes.size == 4 and len(ds) == 12


def test_split_four_classes():
    ds = Dataset(np.zeros((8, 1, 2, 2)), np.repeat(np.arange(4), 2), [f"c{i}" for i in range(4)])
    train, test = split_train_test(ds)
    assert set(train.classes.tolist()) == {0, 1}
    assert set(test.classes.tolist()) == {2, 3}
    assert len(train) + len(test) == len(ds)
    assert train.split == "train" and test.split == "test"


def test_split_odd_class_count_rounds_up():
    ds = Dataset(np.zeros((10, 1, 2, 2)), np.repeat(np.arange(5), 2), list("abcde"))
    train, test = split_train_test(ds)
    assert train.classes.tolist() == [0, 1, 2] and test.classes.tolist() == [3, 4]


def test_train_split_needs_two_items_per_class():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1, 2, 2)), [0, 0, 1], list("ab"), split="train")


def test_take_per_class():
    ds = Dataset(np.arange(12.0).reshape(6, 1, 1, 2), [0, 1, 0, 1, 0, 1], ["a", "b"])
    sub = take_per_class(ds, 2)
    assert sub.labels.tolist() == [0, 1, 0, 1]
    assert sub.images[:, 0, 0, 0].tolist() == [0.0, 2.0, 4.0, 6.0]


def _write_folder(root, classes, n, value=0):
    for name in classes:
        d = root / name
        d.mkdir(parents=True)
        for k in range(n):
            Image.fromarray(np.full((20, 24), value, dtype=np.uint8)).save(d / f"{k}.pgm")


def test_load_two_classes_three_files(tmp_path):
    _write_folder(tmp_path, ["zeta", "alpha"], 3)
    ds = load_image_folder(tmp_path, image_size=16)
    assert len(ds) == 6
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert ds.class_names == ["alpha", "zeta"]
    assert ds.geometry == (1, 16, 16)
    again = load_image_folder(tmp_path, image_size=16)
    assert np.array_equal(again.images, ds.images)


def test_black_image_decodes_to_zeros(tmp_path):
    _write_folder(tmp_path, ["a"], 1, value=0)
    assert np.all(load_image_folder(tmp_path, image_size=16).images == 0.0)


def test_png_and_rgb(tmp_path):
    d = tmp_path / "a"
    d.mkdir()
    Image.fromarray(np.full((16, 16, 3), 255, dtype=np.uint8)).save(d / "x.png")
    ds = load_image_folder(tmp_path, image_size=16, channels=3)
    assert ds.geometry == (3, 16, 16) and np.all(ds.images == 1.0)


def test_unreadable_file_is_skipped_with_warning(tmp_path):
    _write_folder(tmp_path, ["a"], 2)
    (tmp_path / "a" / "broken.pgm").write_bytes(b"not an image")
    with pytest.warns(UserWarning, match="broken"):
        ds = load_image_folder(tmp_path, image_size=16)
    assert len(ds) == 2


def test_empty_class_is_error(tmp_path):
    _write_folder(tmp_path, ["a"], 2)
    (tmp_path / "b").mkdir()
    with pytest.raises(ValueError, match="no readable images"):
        load_image_folder(tmp_path, image_size=16)


def test_export_roundtrip(tmp_path):
    ds = generate_synthetic(GlyphConfig(**SMALL))
    export_image_folder(ds, tmp_path / "out", {"seed": 0})
    meta = json.loads((tmp_path / "out" / "metadata.json").read_text())
    dirs = [p for p in (tmp_path / "out").iterdir() if p.is_dir()]
    assert meta["num_classes"] == len(dirs) == 12
    back = load_image_folder(tmp_path / "out", image_size=32)
    assert np.array_equal(back.labels, ds.labels)
    assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255 + 1e-12
