import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relictnet.clustering import KMeansModel
from relictnet.datasets import (
    TEST,
    TRAIN,
    DatasetError,
    TileSet,
    apply_variant,
    augment_positives,
    balance_classes,
    build_cluster_dataset,
    build_labeled_dataset,
    hflip,
    load_tileset,
    save_tileset,
    train_subset,
    vflip,
)
from relictnet.raster import AreaSplit, MaskRaster, MultibandRaster, make_tile_grid

from conftest import make_tileset


def _scene(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return MultibandRaster(rng.integers(100, 3000, (4, h, w)).astype(np.uint16))


def _split(h, w, cut=None):
    return AreaSplit("x", w if cut is None else cut, "low", w, h, 1, 1)


def _labels_brute(mask, s):
    rows, cols = -(-mask.shape[0] // s), -(-mask.shape[1] // s)
    return np.array([[int(mask[r * s:(r + 1) * s, c * s:(c + 1) * s].any()) for c in range(cols)]
                     for r in range(rows)]).ravel()


# ---------------------------------------------------------------- labeled


def test_all_zero_mask_gives_no_positives():
    r = _scene(64, 64)
    tiles, man = build_labeled_dataset(make_tile_grid(r), MaskRaster(np.zeros((64, 64))), _split(64, 64))
    assert tiles.label.sum() == 0
    assert man.class_counts["train"] == {"0": 4, "1": 0}


def test_single_mask_pixel_gives_one_positive_tile():
    m = np.zeros((64, 64), np.uint8)
    m[40, 5] = 1
    tiles, _ = build_labeled_dataset(make_tile_grid(_scene(64, 64)), MaskRaster(m), _split(64, 64))
    assert tiles.label.tolist() == [0, 0, 1, 0]
    assert tiles.mask[2].sum() == 1


@pytest.mark.parametrize("seed", range(4))
def test_random_mask_positive_tiles_match_scan(seed):
    rng = np.random.default_rng(seed)
    m = (rng.random((128, 128)) < 0.0015).astype(np.uint8)
    tiles, man = build_labeled_dataset(make_tile_grid(_scene(128, 128)), MaskRaster(m), _split(128, 128))
    np.testing.assert_array_equal(tiles.label, _labels_brute(m, 32))
    assert man.count_sum() == man.total == 16


def test_area_assignment_and_straddling_tiles_go_to_test():
    r = _scene(64, 96)
    split = AreaSplit("x", 40, "low", 96, 64, 1, 1)
    tiles, man = build_labeled_dataset(make_tile_grid(r), MaskRaster(np.zeros((64, 96))), split)
    # only column 0 (x 0..32) lies wholly left of x=40
    assert tiles.area.reshape(2, 3).tolist() == [[TRAIN, TEST, TEST]] * 2
    assert sum(man.class_counts["train"].values()) == 2


def test_all_nodata_tiles_are_dropped():
    r = _scene(64, 64)
    r.nodata_mask[:32, :32] = True
    tiles, man = build_labeled_dataset(make_tile_grid(r), MaskRaster(np.zeros((64, 64))), _split(64, 64))
    assert len(tiles) == 3 and man.dropped_nodata_tiles == 1


def test_mask_shape_mismatch():
    with pytest.raises(DatasetError):
        build_labeled_dataset(make_tile_grid(_scene(64, 64)), MaskRaster(np.zeros((32, 64))), _split(64, 64))


# ---------------------------------------------------------------- cluster


def test_uniform_scene_single_label():
    r = MultibandRaster(np.full((4, 64, 64), 500, np.uint16))
    model = KMeansModel(3, np.array([[0.0] * 4, [500.0] * 4, [900.0] * 4]), 0.0, 0, 0, ())
    tiles, man = build_cluster_dataset([make_tile_grid(r)], model)
    assert set(tiles.label.tolist()) == {1}
    assert man.class_counts == {"0": 0, "1": 4, "2": 0}


def test_balanced_halves_give_equal_counts():
    px = np.zeros((4, 64, 128), np.uint16)
    px[:, :, 64:] = 1000
    model = KMeansModel(2, np.array([[0.0] * 4, [1000.0] * 4]), 0.0, 0, 0, ())
    tiles, man = build_cluster_dataset([make_tile_grid(MultibandRaster(px))], model)
    assert man.class_counts == {"0": 4, "1": 4}


def test_cluster_dataset_requires_model():
    with pytest.raises(DatasetError):
        build_cluster_dataset([make_tile_grid(_scene(32, 32))], None)


# ---------------------------------------------------------------- balance


def _labeled(counts):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    n = len(labels)
    return make_tileset(np.arange(n, dtype=float)[:, None, None, None] * np.ones((1, 1, 2, 2)), labels=labels)


def test_balance_undersamples_to_minimum():
    out = balance_classes(_labeled([10, 4]), seed=0)
    assert out.class_counts() == {0: 4, 1: 4}
    assert np.all(np.diff(out.col) > 0)  # original order kept


def test_balance_noop_and_determinism():
    t = _labeled([5, 5, 5])
    out = balance_classes(t, seed=3)
    np.testing.assert_array_equal(out.col, t.col)
    t2 = _labeled([30, 7, 12])
    a, b = balance_classes(t2, seed=1), balance_classes(t2, seed=1)
    np.testing.assert_array_equal(a.col, b.col)
    assert not np.array_equal(a.col, balance_classes(t2, seed=2).col)


def test_balance_empty_classes():
    t = _labeled([6, 0, 3])
    assert balance_classes(t).class_counts() == {0: 3, 1: 0, 2: 3}
    with pytest.raises(DatasetError, match="class 1"):
        balance_classes(t, num_classes=3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=2, max_size=6), st.integers(0, 100))
def test_balance_property_equal_counts(counts, seed):
    out = balance_classes(_labeled(counts), seed=seed)
    c = [v for v in out.class_counts().values() if v]
    assert max(c) - min(c) == 0 and c[0] == min(counts)


# ---------------------------------------------------------------- augmentation


def test_flips_are_involutions_and_compose():
    a = np.random.default_rng(0).random((4, 32, 32))
    np.testing.assert_array_equal(hflip(hflip(a)), a)
    np.testing.assert_array_equal(vflip(vflip(a)), a)
    np.testing.assert_array_equal(apply_variant(a, 3), hflip(vflip(a)))
    np.testing.assert_array_equal(apply_variant(a, 3), vflip(hflip(a)))
    assert hflip(a)[0, 0, 0] == a[0, 0, -1]


def _positives(n_pos, n_neg=5, n_test=3):
    rng = np.random.default_rng(1)
    n = n_pos + n_neg + n_test
    masks = np.zeros((n, 8, 8), np.uint8)
    masks[:n_pos, 2:5, 1:3] = 1
    masks[n_pos + n_neg:, 0, 0] = 1
    area = np.array([TRAIN] * (n_pos + n_neg) + [TEST] * n_test, np.uint8)
    return make_tileset(rng.random((n, 4, 8, 8)), masks, area=area)


@pytest.mark.parametrize("factor, expected", [(30, 12_660), (50, 21_100)])
def test_augmentation_arithmetic_at_inventory_scale(factor, expected):
    tiles = _positives(422, n_neg=0, n_test=0)
    out = augment_positives(tiles, factor, seed=0)
    assert out.class_counts()[1] == factor * 422 == expected


def test_augmentation_variants_and_passthrough():
    tiles = _positives(3)
    out = augment_positives(tiles, 6, seed=4)
    pos = (out.label == 1) & (out.area == TRAIN)
    assert pos.sum() == 18
    assert train_subset(out).class_counts() == {0: 5, 1: 18}
    assert (out.area == TEST).sum() == 3  # test tiles pass through unflipped
    for src in range(3):
        rows = np.nonzero(pos & (out.col == src))[0]
        assert out.variant[rows[0]] == 0  # original always first
        assert sorted(set(out.variant[rows].tolist())) == [0, 1, 2, 3]
        for r in rows:
            v = int(out.variant[r])
            np.testing.assert_array_equal(out.pixels[r], apply_variant(tiles.pixels[src], v))
            np.testing.assert_array_equal(out.mask[r], apply_variant(tiles.mask[src], v))
    with pytest.raises(DatasetError):
        augment_positives(tiles, 0)


def test_augmentation_is_seeded():
    tiles = _positives(4)
    a, b = augment_positives(tiles, 7, seed=2), augment_positives(tiles, 7, seed=2)
    np.testing.assert_array_equal(a.variant, b.variant)
    np.testing.assert_array_equal(a.pixels, b.pixels)


# ---------------------------------------------------------------- shards


def test_shard_round_trip_and_bytes(tmp_path):
    tiles = augment_positives(_positives(5), 4)
    r = _scene(64, 64)
    _, man = build_labeled_dataset(make_tile_grid(r), MaskRaster(np.zeros((64, 64))), _split(64, 64))
    man.total = len(tiles)
    from relictnet.datasets import _labeled_counts

    man.class_counts = _labeled_counts(tiles.label, tiles.area)
    save_tileset(tiles, tmp_path / "a", man, shard_size=7)
    save_tileset(tiles, tmp_path / "b", man, shard_size=7)
    back, man2 = load_tileset(tmp_path / "a")
    for name in ("pixels", "valid", "label", "mask", "area", "variant"):
        np.testing.assert_array_equal(getattr(back, name), getattr(tiles, name))
    assert man2.total == len(tiles)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_manifest_total_mismatch_rejected(tmp_path):
    tiles = _positives(2)
    from relictnet.datasets import DatasetManifest

    man = DatasetManifest("labeled", {"train": {"0": 1, "1": 1}, "test": {"0": 0, "1": 0}}, 99)
    with pytest.raises(DatasetError):
        save_tileset(tiles, tmp_path / "x", man)
