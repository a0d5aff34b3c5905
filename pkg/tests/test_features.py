# -*- coding: utf-8 -*-
"""생물학적 / 구조적 / 단어 주머니 특징 및 스키마 테스트"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.errors import DataError, NoTissueError, ShapeError
from services import features as feat
from services import nn
from services.raster import BinaryMask, RasterImage, to_grayscale
from services.trainloop import propose_nuclei


def _blob_patch(shift=(0, 0), rotate=0):
    """비대칭 L자 어두운 성분 하나가 있는 48×48 패치."""
    data = np.full((48, 48, 3), 235, dtype=np.uint8)
    r, c = 14 + shift[0], 10 + shift[1]
    data[r:r + 10, c:c + 4] = 50
    data[r + 6:r + 10, c + 4:c + 12] = 50
    return RasterImage(np.ascontiguousarray(np.rot90(data, rotate)))


def _single_instance(patch):
    nuclei = propose_nuclei(patch)
    assert len(nuclei) == 1
    return feat.collect_mitosis_instances('s', 0, patch, [nuclei[0].centroid], 5.0, nuclei=nuclei)[0]


def test_schema_lengths():
    assert len(feat.BIOLOGICAL_NAMES) == 50
    assert len(feat.ARCHITECTURAL_NAMES) == 60
    assert len(feat.feature_names(200, 64)) == 50 + 60 + 200 + 2 * 67
    assert len(set(feat.feature_names(200, 64))) == len(feat.feature_names(200, 64))


# ==================== 생물학적 특징 ====================
@pytest.mark.parametrize('shift, rotate', [((5, 7), 0), ((0, 0), 1), ((3, 2), 2), ((0, 0), 3)])
def test_hu_moments_invariant_to_translation_and_rotation(shift, rotate):
    reference = _blob_patch()
    moved = _blob_patch(shift, rotate)
    gray_ref = to_grayscale(reference)
    gray_moved = to_grayscale(moved)

    base = feat.mitosis_primitives(_single_instance(reference), gray_ref, float(gray_ref.mean()))
    other = feat.mitosis_primitives(_single_instance(moved), gray_moved, float(gray_moved.mean()))

    assert other[0] == base[0] == 72
    assert np.allclose(other[8:15], base[8:15], rtol=1e-6, atol=1e-12)


def test_collect_instances_drops_unmatched_points():
    patch = _blob_patch()
    nuclei = propose_nuclei(patch)

    instances = feat.collect_mitosis_instances('s', 3, patch, [nuclei[0].centroid, (45.0, 45.0)], 5.0,
                                               nuclei=nuclei)

    assert len(instances) == 1
    assert instances[0].patch_id == 3


def test_mitosis_instance_requires_mask():
    with pytest.raises(DataError):
        feat.MitosisInstance('s', 0, (1.0, 1.0), np.zeros((3, 3), dtype=bool), (0, 0, 3, 3))


def test_biological_features_with_and_without_mitoses():
    patch = _blob_patch()
    instance = _single_instance(patch)

    empty = feat.biological_features(patch, [])
    single = feat.biological_features(patch, [instance])
    named = dict(zip(feat.BIOLOGICAL_NAMES, single))

    assert empty.shape == single.shape == (50,)
    assert dict(zip(feat.BIOLOGICAL_NAMES, empty))['bio_valid'] == 0.0
    assert named['bio_valid'] == 1.0
    assert named['bio_mitosis_count'] == 1.0
    assert named['bio_area_mean'] == 72.0 and named['bio_area_std'] == 0.0
    assert named['bio_nuclei_count'] == 1.0


def test_aggregate_biological_means_patches():
    assert np.array_equal(feat.aggregate_biological([]), np.zeros(50))
    assert np.allclose(feat.aggregate_biological([np.zeros(50), np.full(50, 2.0)]), 1.0)


def test_mitosis_deep_vectors_shape(rng):
    detector = nn.init_weights(nn.mitosnet_mini(), seed=0)
    trunk = detector.slice(nn.trunk_spec(detector.spec))
    image = RasterImage(rng.integers(0, 256, size=(80, 80, 3), dtype=np.uint8))

    vectors = feat.mitosis_deep_vectors(image, np.array([[10.0, 10.0], [70.0, 40.0]]), trunk, crop=63, length=40)

    assert vectors.shape == (2, 40)
    assert feat.mitosis_deep_vectors(image, np.zeros((0, 2)), trunk, length=40).shape == (0, 40)


# ==================== 구조적 특징 ====================
def _full_tissue():
    return BinaryMask(np.ones((64, 64), dtype=bool), 16)


def test_architectural_features_without_points():
    values = dict(zip(feat.ARCHITECTURAL_NAMES, feat.architectural_features(np.zeros((0, 2)), _full_tissue())))

    assert values['arch_total_count'] == 0.0
    assert values['arch_valid_count'] == 0.0 and values['arch_valid_nn'] == 0.0
    assert values['arch_tissue_area'] == pytest.approx(1024 * 1024 / 1e6)
    assert all(np.isfinite(list(values.values())))


def test_clark_evans_separates_regular_and_clustered_patterns(rng):
    grid = np.array([[50.0 + 100 * i, 50.0 + 100 * j] for i in range(10) for j in range(10)])
    clustered = rng.uniform(500.0, 520.0, size=(100, 2))

    regular = dict(zip(feat.ARCHITECTURAL_NAMES, feat.architectural_features(grid, _full_tissue())))
    packed = dict(zip(feat.ARCHITECTURAL_NAMES, feat.architectural_features(clustered, _full_tissue())))

    assert regular['arch_total_count'] == 100.0
    assert regular['arch_clark_evans'] > 1.5
    assert packed['arch_clark_evans'] < 0.5
    assert packed['arch_hotspot_share'] > regular['arch_hotspot_share']


def test_architectural_features_need_tissue():
    with pytest.raises(NoTissueError):
        feat.architectural_features(np.ones((3, 2)), BinaryMask(np.zeros((8, 8), dtype=bool), 16))


# ==================== k-means / 단어 주머니 ====================
def test_kmeans_inertia_never_increases(rng):
    vectors = rng.normal(size=(120, 4))

    result = feat.kmeans(vectors, k=6, seed=2)

    assert all(b <= a + 1e-9 for a, b in zip(result.inertia_history, result.inertia_history[1:]))
    assert result.inertia == pytest.approx(result.inertia_history[-1])
    assert len(np.unique(result.labels)) == 6


def test_kmeans_recovers_separated_clusters(rng):
    centers = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]])
    vectors = np.concatenate([c + rng.normal(0, 0.5, size=(20, 2)) for c in centers])

    result = feat.kmeans(vectors, k=3, seed=0)

    assert sorted(np.bincount(result.labels).tolist()) == [20, 20, 20]
    assert result.inertia < 60 * 2 * 1.0


def test_kmeans_caps_k_and_rejects_empty(rng):
    assert feat.kmeans(rng.normal(size=(4, 2)), k=10).centroids.shape == (4, 2)
    with pytest.raises(DataError):
        feat.kmeans(np.zeros((0, 3)), k=2)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_bag_of_features_ignores_vector_order(seed):
    rng = np.random.default_rng(seed)
    model = feat.fit_bag_of_features({'a': rng.normal(size=(30, 5)), 'b': rng.normal(size=(12, 5))},
                                     bins=8, seed=1)
    vectors = rng.normal(size=(15, 5))

    histogram = model.histogram(vectors)

    assert np.allclose(histogram, model.histogram(vectors[rng.permutation(15)]))
    assert histogram.sum() == pytest.approx(1.0)
    assert histogram.shape == (8,)


def test_bag_of_features_empty_slide_is_zero(rng):
    model = feat.fit_bag_of_features({'a': rng.normal(size=(10, 3))}, bins=4, seed=0)

    hist = feat.bag_of_features(model, {'x': np.zeros((0, 3)), 'y': rng.normal(size=(2, 3))})

    assert np.array_equal(hist['x'], np.zeros(4))
    assert hist['y'].sum() == pytest.approx(1.0)


def test_fit_bag_of_features_needs_vectors():
    with pytest.raises(DataError):
        feat.fit_bag_of_features({'a': np.zeros((0, 3))}, bins=4)


# ==================== 조립 / 표준화 ====================
def test_assemble_features_replaces_non_finite_values():
    bio = np.zeros(50)
    bio[3] = np.nan

    vector = feat.assemble_features('s1', bio, np.ones(60), np.zeros(4), np.zeros(2 * 5), bins=4, cascade_width=2)

    assert vector.values.shape == (50 + 60 + 4 + 10,)
    assert vector.values[3] == 0.0
    assert vector.as_dict()['arch_total_count'] == 1.0


def test_assemble_features_checks_block_lengths():
    with pytest.raises(ShapeError):
        feat.assemble_features('s1', np.zeros(49), np.zeros(60), np.zeros(4), np.zeros(10), bins=4, cascade_width=2)


def test_standardizer_centers_constant_columns():
    matrix = np.array([[1.0, 5.0], [3.0, 5.0]])

    scaled = feat.Standardizer.fit(matrix).transform(matrix)

    assert np.allclose(scaled[:, 0], [-1.0, 1.0])
    assert np.array_equal(scaled[:, 1], [0.0, 0.0])


def test_feature_matrix_requires_common_schema():
    a = feat.assemble_features('a', np.zeros(50), np.zeros(60), np.zeros(4), np.zeros(10), bins=4, cascade_width=2)
    b = feat.assemble_features('b', np.zeros(50), np.zeros(60), np.zeros(3), np.zeros(10), bins=3, cascade_width=2)

    ids, names, matrix = feat.feature_matrix([a, a])
    assert ids == ['a', 'a'] and matrix.shape == (2, len(names))
    with pytest.raises(ShapeError):
        feat.feature_matrix([a, b])
