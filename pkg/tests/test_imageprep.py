import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vampire.errors import ConfigError
from vampire.imageprep import (AugmentDraw, PrepConfig, apply_geometry, augment, clahe, crop_window, draw_augment,
                               hflip, median_filter, preprocess_layers, resize)
from vampire.synthdata import GenConfig, generate_sample

unit_grids = arrays(np.float64, st.tuples(st.integers(8, 20), st.integers(8, 20)),
                    elements=st.floats(0, 1, allow_nan=False))


def brute_median(g, k):
    r = k // 2
    p = np.pad(g, r, mode="edge")
    return np.array([[np.sort(p[i:i + k, j:j + k].ravel())[k * k // 2] for j in range(g.shape[1])]
                     for i in range(g.shape[0])])


def test_median_constant_and_impulse():
    np.testing.assert_array_equal(median_filter(np.full((5, 5), 0.3)), 0.3)
    g = np.zeros((5, 5))
    g[2, 2] = 1.0
    assert median_filter(g, 3).sum() == 0


def test_median_matches_neighbourhood_sort():
    g = np.random.default_rng(0).uniform(size=(5, 5))
    np.testing.assert_array_equal(median_filter(g, 3), brute_median(g, 3))
    with pytest.raises(ValueError):
        median_filter(g, 2)


def global_equalisation(g, bins=256):
    idx = np.minimum((g * bins).astype(int), bins - 1)
    cdf = np.cumsum(np.bincount(idx.ravel(), minlength=bins)) / g.size
    return cdf[idx]


@given(unit_grids)
def test_clahe_single_tile_unclipped_is_global_equalisation(g):
    np.testing.assert_allclose(clahe(g, tiles=1, clip=np.inf), global_equalisation(g), atol=1e-12)


@given(unit_grids, st.integers(1, 4), st.floats(1, 5))
def test_clahe_output_in_unit_range(g, tiles, clip):
    out = clahe(g, tiles, clip)
    assert out.shape == g.shape and out.min() >= 0 and out.max() <= 1


def test_clahe_constant_stays_constant():
    out = clahe(np.full((16, 16), 0.4), 4, 2.0)
    assert np.ptp(out) == 0


def test_clahe_rejects_oversized_tiling():
    with pytest.raises(ValueError):
        clahe(np.zeros((4, 4)), tiles=5)


def test_resize_examples():
    g = np.random.default_rng(0).uniform(size=(6, 6))
    np.testing.assert_array_equal(resize(g, 6), g)
    np.testing.assert_allclose(resize(np.array([[0.0, 1.0], [0.0, 1.0]]), (2, 4)),
                               [[0, 1 / 3, 2 / 3, 1]] * 2, atol=1e-15)
    np.testing.assert_allclose(resize(np.full((5, 7), 0.25), (11, 3)), 0.25)


def test_prep_config_validation():
    PrepConfig().validate(8)
    for bad in (dict(median_kernel=4), dict(clahe_tiles=0), dict(clahe_clip=0.5), dict(crop_scale=(0.9, 0.8))):
        with pytest.raises(ConfigError):
            PrepConfig(**bad).validate()
    with pytest.raises(ConfigError):
        PrepConfig(target_size=60).validate(8)


def test_preprocess_shapes():
    s = generate_sample(GenConfig(n_patients=1), 0)
    out = preprocess_layers(s.layers, PrepConfig(target_size=32))
    assert out.shape == (3, 32, 32) and 0 <= out.min() and out.max() <= 1


def test_identity_augmentation():
    s = generate_sample(GenConfig(n_patients=1), 0)
    cfg = PrepConfig(crop_scale=(1.0, 1.0), rotation_max=0.0)
    seed = next(k for k in range(100) if not draw_augment(cfg, np.random.default_rng(k)).flip)
    out = augment(s, np.random.default_rng(seed), cfg)
    np.testing.assert_array_equal(out.layers, s.layers)
    np.testing.assert_array_equal(out.vessel_mask, s.vessel_mask)


def test_flip_is_involution():
    g = np.random.default_rng(1).uniform(size=(4, 6))
    np.testing.assert_array_equal(hflip(hflip(g)), g)


def test_crop_never_adds_mask_pixels():
    cfg = PrepConfig()
    rng = np.random.default_rng(3)
    for i in range(50):
        s = generate_sample(GenConfig(n_patients=25, seed=8), i)
        draw = draw_augment(cfg, rng)
        rs, cs = crop_window(s.vessel_mask.shape, draw)
        assert s.vessel_mask[rs, cs].sum() <= s.vessel_mask.sum()


def test_layers_and_mask_share_geometry():
    # a coordinate grid pushed through the same draw as the mask lands where the mask does
    size = 32
    rr, cc = np.mgrid[0:size, 0:size]
    draw = AugmentDraw(crop_scale=0.9, crop_top=0.3, crop_left=0.7, flip=True, angle=0.0)
    mask = np.zeros((size, size))
    mask[5, 20] = 1.0
    moved = apply_geometry(mask, draw, order=0)
    rows = apply_geometry(rr / size, draw, order=0) * size
    cols = apply_geometry(cc / size, draw, order=0) * size
    r, c = np.argwhere(moved > 0.5)[0]
    assert (round(rows[r, c]), round(cols[r, c])) == (5, 20)


def test_augment_is_pure_given_rng_state():
    s = generate_sample(GenConfig(n_patients=1), 1)
    a = augment(s, np.random.default_rng(5))
    b = augment(s, np.random.default_rng(5))
    np.testing.assert_array_equal(a.layers, b.layers)
    np.testing.assert_array_equal(a.vessel_mask, b.vessel_mask)
    assert set(np.unique(a.vessel_mask)) <= {0, 1}
