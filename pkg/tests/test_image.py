import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image
from skimage.color import rgb2lab

from virtihc.errors import DegenerateHistogramError, DimensionError, InputValidationError
from virtihc.image import (
    downsample_mean,
    lab_to_rgb,
    od_to_rgb,
    read_png,
    rgb_to_lab,
    rgb_to_od,
    tissue_mask,
    upsample_mask,
    write_png,
)

from conftest import disc_image

EPS = 1.0 / 255.0


def px(*v):
    return np.array(v, dtype=float).reshape(1, 1, 3)


def test_white_has_zero_od():
    assert np.allclose(rgb_to_od(px(1, 1, 1), eps=1e-12), 0.0)


def test_one_decade_attenuation():
    assert np.allclose(rgb_to_od(px(0.1, 0.1, 0.1), eps=0.0), 1.0)


def test_od_matches_scalar_formula():
    got = rgb_to_od(px(0.25, 0.5, 0.75), eps=EPS)[0, 0]
    expected = [-math.log10(v + EPS) for v in (0.25, 0.5, 0.75)]
    assert got == pytest.approx(expected, abs=1e-12)


def test_od_rejects_non_finite():
    with pytest.raises(InputValidationError):
        rgb_to_od(px(0.5, np.nan, 0.5))


def test_od_to_rgb_examples():
    assert np.allclose(od_to_rgb(np.zeros((1, 1, 3))), 1.0)
    assert np.allclose(od_to_rgb(np.ones((1, 1, 3))), 0.1)


def test_od_to_rgb_needs_three_channels():
    with pytest.raises(DimensionError):
        od_to_rgb(np.zeros((2, 2, 2)))


def test_round_trip_within_eps():
    img = px(0.25, 0.5, 0.75)
    assert np.max(np.abs(od_to_rgb(rgb_to_od(img, eps=EPS)) - img)) <= 1.5 * EPS


def test_round_trip_dense_grid():
    v = np.linspace(0.0, 1.0, 256)
    img = np.stack([v, v[::-1], np.roll(v, 100)], axis=-1).reshape(16, 16, 3)
    assert np.max(np.abs(od_to_rgb(rgb_to_od(img)) - img)) <= 1.5 * EPS


def test_od_monotone_decreasing():
    v = np.linspace(0.0, 1.0, 300)
    img = np.repeat(v[:, None, None], 3, axis=2).reshape(1, -1, 3)
    od = rgb_to_od(img)[0, :, 0]
    assert np.all(np.diff(od) <= 0)
    # strictly decreasing until the clamp at zero
    assert np.all(np.diff(od[od > 0]) < 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 4, 3), elements=st.floats(0.0, 1.0)))
def test_od_nonnegative(img):
    assert np.all(rgb_to_od(img) >= 0)


def test_lab_black_and_white():
    assert rgb_to_lab(px(0, 0, 0))[0, 0, 0] == pytest.approx(0.0, abs=1e-9)
    white = rgb_to_lab(px(1, 1, 1))[0, 0]
    assert white[0] == pytest.approx(100.0, abs=1e-9)
    assert abs(white[1]) < 0.01 and abs(white[2]) < 0.01


def _grey_lightness(v):
    # scalar sRGB -> Y -> L*, written out independently
    lin = v / 12.92 if v <= 0.04045 else ((v + 0.055) / 1.055) ** 2.4
    y = lin  # grey: Y equals the linear value with a normalised white
    f = y ** (1 / 3) if y > (6 / 29) ** 3 else y / (3 * (6 / 29) ** 2) + 4 / 29
    return 116 * f - 16


def test_lab_mid_grey():
    assert rgb_to_lab(px(0.5, 0.5, 0.5))[0, 0, 0] == pytest.approx(_grey_lightness(0.5), abs=1e-6)


def test_lab_agrees_with_skimage():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(8, 8, 3))
    assert np.allclose(rgb_to_lab(img), rgb2lab(img), atol=0.05)


def test_lab_inverse():
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(8, 8, 3))
    assert np.allclose(lab_to_rgb(rgb_to_lab(img)), img, atol=1e-9)


def test_downsample_mean_edges():
    a = np.arange(25, dtype=float).reshape(5, 5)
    d = downsample_mean(a, 2)
    assert d.shape == (3, 3)
    assert d[0, 0] == pytest.approx(np.mean([0, 1, 5, 6]))
    assert d[2, 2] == pytest.approx(24.0)
    assert d[0, 2] == pytest.approx(np.mean([4, 9]))


def test_tissue_mask_disc():
    img, disc = disc_image()
    mask = tissue_mask(img)
    boundary = disc ^ np.roll(disc, 1, 0) | disc ^ np.roll(disc, 1, 1)
    assert np.all((mask == disc) | boundary)
    assert np.array_equal(mask, disc)


def test_tissue_mask_downsampled_shape():
    img, _ = disc_image(size=65)
    assert tissue_mask(img, downsample=4).shape == (17, 17)


def test_tissue_mask_all_white_is_degenerate():
    with pytest.raises(DegenerateHistogramError):
        tissue_mask(np.ones((16, 16, 3)))


def _grey_for_lightness(target):
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if rgb_to_lab(px(mid, mid, mid))[0, 0, 0] < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_tissue_mask_checkerboard():
    dark, light = _grey_for_lightness(20), _grey_for_lightness(95)
    yy, xx = np.mgrid[0:32, 0:32]
    dark_sq = ((yy // 8) + (xx // 8)) % 2 == 0
    img = np.where(dark_sq[..., None], dark, light) * np.ones(3)
    assert np.array_equal(tissue_mask(img), dark_sq)


@pytest.mark.parametrize("extra", [1, 7, 40])
def test_tissue_mask_invariant_to_white_padding(extra):
    img, _ = disc_image()
    padded = np.concatenate([img, np.ones((extra, img.shape[1], 3))])
    assert np.array_equal(tissue_mask(padded)[: img.shape[0]], tissue_mask(img))


def test_upsample_mask():
    m = np.array([[True, False], [False, True]])
    up = upsample_mask(m, (3, 4))
    assert up.shape == (3, 4)
    assert up[0, 0] and not up[0, 2] and up[2, 3]
    with pytest.raises(DimensionError):
        upsample_mask(m, (10, 3))


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = np.round(rng.uniform(size=(7, 5, 3)) * 255) / 255
    write_png(tmp_path / "a.png", img)
    assert np.array_equal(read_png(tmp_path / "a.png"), img)


def test_png_rejects_non_rgb(tmp_path):
    Image.fromarray(np.zeros((4, 4, 4), dtype=np.uint8), "RGBA").save(tmp_path / "a.png")
    with pytest.raises(InputValidationError, match="RGB"):
        read_png(tmp_path / "a.png")
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8), "L").save(tmp_path / "g.png")
    with pytest.raises(InputValidationError):
        read_png(tmp_path / "g.png")
