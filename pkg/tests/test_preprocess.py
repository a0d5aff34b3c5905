# -*- coding: utf-8 -*-
"""염색 표준화 / Otsu / 조직 마스크 테스트"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from core.errors import NoTissueError, OtsuError, StainProfileError
from services.preprocess import (StainProfile, binary_dilation, compute_stain_profile, extract_tissue_mask,
                                 optical_density, otsu_threshold, remove_small_components, resolve_template,
                                 standardize_pyramid, standardize_stain, tissue_mask_from_image, upsample_mask)
from services.raster import BinaryMask, ImagePyramid, RasterImage


def exhaustive_otsu(histogram):
    """모든 t에 대해 클래스 간 분산을 부동소수점 없이 직접 비교하는 기준 구현."""
    counts = np.asarray(histogram, dtype=object)
    levels = np.arange(256, dtype=object)
    best_t, best = 0, None
    for t in range(255):
        w0, w1 = counts[:t + 1].sum(), counts[t + 1:].sum()
        if w0 == 0 or w1 == 0:
            score = 0
        else:
            mu0 = (levels[:t + 1] * counts[:t + 1]).sum()
            mu1 = (levels[t + 1:] * counts[t + 1:]).sum()
            # w0·w1·(mu0/w0 − mu1/w1)² 에 (w0·w1)²를 곱해 정수로 비교
            score_num = (mu0 * w1 - mu1 * w0) ** 2
            score = (score_num, w0 * w1)
        if best is None or _greater(score, best):
            best_t, best = t, score
    return best_t


def _greater(a, b):
    a_num, a_den = (a, 1) if not isinstance(a, tuple) else a
    b_num, b_den = (b, 1) if not isinstance(b, tuple) else b
    return a_num * b_den > b_num * a_den


@settings(max_examples=200, deadline=None)
@given(arrays(np.int64, 256, elements=st.integers(0, 50)))
def test_otsu_matches_exhaustive_scan(histogram):
    if np.count_nonzero(histogram) < 2:
        with pytest.raises(OtsuError):
            otsu_threshold(histogram)
        return
    assert otsu_threshold(histogram) == exhaustive_otsu(histogram)


def test_otsu_two_spikes_splits_between_them():
    histogram = np.zeros(256, dtype=np.int64)
    histogram[10] = 100
    histogram[200] = 100

    assert otsu_threshold(histogram) == 10


def test_otsu_rejects_single_bin():
    histogram = np.zeros(256, dtype=np.int64)
    histogram[42] = 7

    with pytest.raises(OtsuError):
        otsu_threshold(histogram)


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (9, 11)), st.integers(0, 3))
def test_dilation_matches_window_maximum(bits, iterations):
    expected = bits.copy()
    for _ in range(iterations):
        expected = ndimage.maximum_filter(expected.astype(np.uint8), size=3, mode='constant', cval=0) > 0

    assert np.array_equal(binary_dilation(bits, iterations), expected)


def test_dilation_keeps_mask_factor():
    mask = BinaryMask(np.eye(4, dtype=bool), downsample_factor=4)

    dilated = binary_dilation(mask, 1)

    assert isinstance(dilated, BinaryMask) and dilated.downsample_factor == 4
    assert binary_dilation(mask, 0).bits.tolist() == mask.bits.tolist()


def test_remove_small_components_respects_connectivity():
    bits = np.zeros((5, 5), dtype=bool)
    bits[0, 0] = bits[1, 1] = True
    bits[3:5, 3:5] = True

    assert remove_small_components(bits, 2, connectivity=4).sum() == 4
    assert remove_small_components(bits, 2, connectivity=8).sum() == 6


def test_stain_profile_rejects_degenerate_anchors():
    with pytest.raises(StainProfileError):
        StainProfile(low=(0.2, 0.2, 0.2), high=(0.2, 0.5, 0.5))


def test_compute_stain_profile_requires_tissue(tissue_disk):
    with pytest.raises(StainProfileError):
        compute_stain_profile(tissue_disk, np.zeros((64, 64), dtype=bool))


def test_standardize_to_own_profile_is_near_identity(tissue_disk, rng):
    noisy = np.clip(tissue_disk.data.astype(np.int64) + rng.integers(-20, 21, size=tissue_disk.data.shape), 0, 255)
    image = RasterImage(noisy.astype(np.uint8))
    mask = np.ones((64, 64), dtype=bool)
    profile = compute_stain_profile(image, mask)

    out = standardize_stain(image, profile, profile)

    assert np.max(np.abs(out.data.astype(np.int64) - image.data.astype(np.int64))) <= 1


def test_standardize_maps_source_anchors_onto_template(tissue_disk, rng):
    noisy = np.clip(tissue_disk.data.astype(np.int64) + rng.integers(-30, 31, size=tissue_disk.data.shape), 0, 255)
    image = RasterImage(noisy.astype(np.uint8))
    mask = np.ones((64, 64), dtype=bool)
    source = compute_stain_profile(image, mask)
    template = StainProfile(low=tuple(np.array(source.low) + 0.05), high=tuple(np.array(source.high) + 0.1))

    mapped = compute_stain_profile(standardize_stain(image, source, template), mask)

    assert np.allclose(mapped.low, template.low, atol=0.02)
    assert np.allclose(mapped.high, template.high, atol=0.02)


def test_optical_density_of_white_is_zero():
    assert optical_density(np.array([255.0]))[0] == pytest.approx(0.0)


def test_resolve_template_prefers_config_anchors():
    reference = StainProfile(low=(0.0, 0.0, 0.0), high=(1.0, 1.0, 1.0))
    anchors = {'low': [0.1, 0.1, 0.1], 'high': [0.9, 0.9, 0.9]}

    assert resolve_template(anchors, reference).low == (0.1, 0.1, 0.1)
    assert resolve_template(None, reference) is reference
    with pytest.raises(StainProfileError):
        resolve_template(None, None)


def test_tissue_mask_finds_disk(tissue_disk):
    mask = tissue_mask_from_image(tissue_disk, downsample_factor=4, min_area=16, dilation_iterations=0)

    yy, xx = np.mgrid[:64, :64]
    disk = (yy - 32) ** 2 + (xx - 32) ** 2 < 20 ** 2
    assert mask.downsample_factor == 4
    assert np.array_equal(mask.bits, disk)


def test_tissue_mask_on_blank_slide_raises():
    blank = RasterImage(np.full((32, 32, 3), 240, dtype=np.uint8))

    with pytest.raises(NoTissueError):
        tissue_mask_from_image(blank)


def test_extract_tissue_mask_uses_named_level(tissue_disk):
    base = RasterImage(np.repeat(np.repeat(tissue_disk.data, 4, axis=0), 4, axis=1))
    pyramid = ImagePyramid.from_images({'40x': (base, 1), '10x': (tissue_disk, 4)})

    mask = extract_tissue_mask(pyramid, '10x', min_area=16, dilation_iterations=1)

    assert mask.downsample_factor == 4
    assert (mask.height, mask.width) == (64, 64)
    assert upsample_mask(mask, 1).shape == (256, 256)


def test_standardize_pyramid_covers_every_level(tissue_disk):
    base = RasterImage(np.repeat(np.repeat(tissue_disk.data, 4, axis=0), 4, axis=1))
    pyramid = ImagePyramid.from_images({'40x': (base, 1), '10x': (tissue_disk, 4)})
    mask = extract_tissue_mask(pyramid, '10x', min_area=16)
    template = StainProfile(low=(0.05, 0.1, 0.05), high=(0.4, 0.6, 0.3))

    images, source = standardize_pyramid(pyramid, template, mask)

    assert sorted(images) == ['10x', '40x']
    assert images['40x'][1] == 1 and images['10x'][1] == 4
    assert images['40x'][0].data.shape == base.data.shape
    assert all(a < b for a, b in zip(source.low, source.high))
