import numpy as np
import pytest
from scipy import ndimage

from relictnet.raster import COMPONENT_STRUCTURE, rasterize_mask
from relictnet.synthetic import SceneError, SceneSpec, elongation, generate_scene


def test_no_scars_gives_empty_mask():
    scene = generate_scene(SceneSpec(width=128, height=128, scar_count=0, confounder_count=2))
    assert scene.mask.values.sum() == 0
    assert scene.confounder_mask.values.sum() > 0


def test_component_count_matches_scar_count():
    raster, mask, conf = generate_scene(SceneSpec(width=256, height=256, scar_count=5, seed=3))
    _, n = ndimage.label(mask.values, structure=COMPONENT_STRUCTURE)
    assert n == 5
    assert not (mask.values & conf.values).any()
    assert raster.pixels.dtype == np.uint16 and raster.band_count == 4


def test_scene_is_deterministic():
    a = generate_scene(SceneSpec(width=128, height=128, scar_count=3, seed=11))
    b = generate_scene(SceneSpec(width=128, height=128, scar_count=3, seed=11))
    np.testing.assert_array_equal(a.raster.pixels, b.raster.pixels)
    np.testing.assert_array_equal(a.mask.values, b.mask.values)
    c = generate_scene(SceneSpec(width=128, height=128, scar_count=3, seed=12))
    assert not np.array_equal(a.raster.pixels, c.raster.pixels)


def test_scars_are_elongated_and_polygons_match_mask():
    spec = SceneSpec(seed=1)
    scene = generate_scene(spec)
    labels, n = ndimage.label(scene.mask.values, structure=COMPONENT_STRUCTURE)
    assert n == spec.scar_count
    for c in range(1, n + 1):
        assert elongation(labels == c) >= spec.min_elongation
    np.testing.assert_array_equal(rasterize_mask(scene.scar_polygons, scene.raster).values, scene.mask.values)


def test_signatures_separate_scars_from_forest():
    scene = generate_scene(SceneSpec(width=256, height=256, scar_count=6, seed=2))
    nir = scene.raster.pixels[3].astype(float)
    m = scene.mask.values == 1
    assert nir[m].mean() - nir[~m].mean() > 400


def test_elongation_of_known_shapes():
    bar = np.zeros((20, 40), bool)
    bar[9:11, 5:35] = True
    assert elongation(bar) > 10
    disk = np.hypot(*np.mgrid[-10:11, -10:11]) <= 8
    assert elongation(disk) == pytest.approx(1.0, abs=0.05)


def test_overcrowded_scene_errors():
    with pytest.raises(SceneError):
        generate_scene(SceneSpec(width=64, height=64, scar_count=40, max_attempts=200))


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        SceneSpec(scar_elongation=(1.2, 3.0))
    spec = SceneSpec(width=100, seed=4)
    assert SceneSpec.from_dict(spec.to_dict()) == spec
