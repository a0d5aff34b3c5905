# -*- coding: utf-8 -*-
"""래스터 / 피라미드 입출력 테스트"""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from core.errors import PyramidError, RasterFormatError, ShapeError
from services.raster import (BinaryMask, ImagePyramid, RasterImage, hsv_to_rgb, load_pyramid, read_mask,
                             read_ppm, resize_bilinear, rgb_to_hsv, to_grayscale, write_mask, write_ppm,
                             write_pyramid)

_shapes = st.tuples(st.integers(1, 12), st.integers(1, 12), st.sampled_from([1, 3]))


@settings(max_examples=40, deadline=None)
@given(data=st.data())
def test_ppm_round_trip_is_identity(tmp_path_factory, data):
    height, width, channels = data.draw(_shapes)
    pixels = data.draw(arrays(np.uint8, (height, width, channels)))
    path = tmp_path_factory.mktemp('ppm') / ('image.ppm' if channels == 3 else 'image.pgm')

    write_ppm(RasterImage(pixels), path)
    loaded = read_ppm(path)

    assert loaded.data.shape == (height, width, channels)
    assert np.array_equal(loaded.data, pixels)


def test_read_ppm_accepts_header_comments(tmp_path):
    path = tmp_path / 'comment.pgm'
    path.write_bytes(b'P5\n# made by hand\n2 1\n255\n' + bytes([7, 9]))

    assert read_ppm(path).plane(0).tolist() == [[7, 9]]


@pytest.mark.parametrize('payload', [
    b'P3\n1 1\n255\n' + bytes(3),
    b'P6\n1 1\n65535\n' + bytes(6),
    b'P6\n2 2\n255\n' + bytes(5),
    b'P6\n1 1\n255\n' + bytes(4),
    b'P6\n1',
])
def test_read_ppm_rejects_malformed_files(tmp_path, payload):
    path = tmp_path / 'bad.ppm'
    path.write_bytes(payload)

    with pytest.raises(RasterFormatError):
        read_ppm(path)


def test_crop_fills_outside_area():
    image = RasterImage(np.arange(16, dtype=np.uint8).reshape(4, 4))

    cropped = image.crop(-1, -1, 3, 3, fill=0)

    assert cropped.plane(0).tolist() == [[0, 0, 0], [0, 0, 1], [0, 4, 5]]
    assert image.crop(10, 10, 2, 2).plane(0).tolist() == [[255, 255], [255, 255]]


def test_raster_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        RasterImage(np.zeros((4, 4, 2), dtype=np.uint8))
    with pytest.raises(ShapeError):
        RasterImage(np.zeros((0, 4), dtype=np.uint8))


def test_pyramid_round_trip(tmp_path, rng):
    base = RasterImage(rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8))
    small = RasterImage(rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8))

    manifest = write_pyramid({'40x': (base, 1), '10x': (small, 4)}, tmp_path / 'slide', 'slide')
    pyramid = load_pyramid(manifest)

    assert manifest.name == 'slide.pyramid.json'
    assert pyramid.level_factor('10x') == 4
    assert np.array_equal(pyramid.read_level('40x').data, base.data)
    assert np.array_equal(pyramid.read_level('10x').data, small.data)
    with pytest.raises(PyramidError):
        pyramid.read_level('20x')


def test_pyramid_rejects_size_mismatch(tmp_path, rng):
    base = RasterImage(rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8))
    wrong = RasterImage(rng.integers(0, 256, size=(9, 8, 3), dtype=np.uint8))
    manifest = write_pyramid({'40x': (base, 1), '10x': (wrong, 4)}, tmp_path, 'slide')

    with pytest.raises(PyramidError):
        load_pyramid(manifest)


def test_pyramid_rejects_duplicate_magnification_keys(tmp_path, rng):
    base = RasterImage(rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8))
    write_ppm(base, tmp_path / 'a.ppm')
    (tmp_path / 'm.json').write_text(
        '{"levels": [{"file": "a.ppm", "factor": 1}], "magnifications": {"40x": 0, "40x": 0}}')

    with pytest.raises(PyramidError):
        load_pyramid(tmp_path / 'm.json')


def test_pyramid_rejects_non_increasing_factors(rng):
    image = RasterImage(rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8))

    with pytest.raises(PyramidError):
        ImagePyramid.from_images({'a': (image, 2), 'b': (image, 4)})


def test_mask_round_trip_keeps_factor(tmp_path):
    bits = np.zeros((6, 5), dtype=bool)
    bits[1:4, 2:4] = True

    sidecar = write_mask(BinaryMask(bits, downsample_factor=4), tmp_path / 'm.pgm', {'level': '10x'})
    loaded = read_mask(tmp_path / 'm.pgm')

    assert json.loads(sidecar.read_text())['level'] == '10x'
    assert loaded.downsample_factor == 4
    assert np.array_equal(loaded.bits, bits)
    assert loaded.area == 6


def test_hsv_conventions():
    image = RasterImage(np.array([[[0, 0, 0], [128, 128, 128], [255, 0, 0], [0, 0, 255]]], dtype=np.uint8))

    hue, saturation, value = rgb_to_hsv(image)

    assert saturation[0, 0] == 0.0 and hue[0, 0] == 0.0
    assert saturation[0, 1] == 0.0 and hue[0, 1] == 0.0
    assert hue[0, 2] == pytest.approx(0.0) and saturation[0, 2] == pytest.approx(1.0)
    assert hue[0, 3] == pytest.approx(240.0)
    assert value[0, 3] == pytest.approx(1.0)


def test_grayscale_weights():
    image = RasterImage(np.array([[[100, 50, 200]]], dtype=np.uint8))

    assert to_grayscale(image)[0, 0] == pytest.approx(0.299 * 100 + 0.587 * 50 + 0.114 * 200)


def test_resize_bilinear_is_corner_aligned():
    plane = np.array([[0.0, 10.0], [20.0, 30.0]])

    resized = resize_bilinear(plane, 3, 3)

    assert resized[0, 0] == 0.0 and resized[-1, -1] == 30.0
    assert resized[1, 1] == pytest.approx(15.0)


@settings(max_examples=60, deadline=None)
@given(pixels=arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_hsv_round_trip_within_one_level(pixels):
    image = RasterImage(pixels)

    restored = hsv_to_rgb(*rgb_to_hsv(image))

    assert np.max(np.abs(restored.data.astype(int) - pixels.astype(int))) <= 1
