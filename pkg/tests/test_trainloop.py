# -*- coding: utf-8 -*-
"""2단계 능동 학습 / 데이터셋 불변식 / 핵 후보 / 캐스케이드 헤드 테스트"""

import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from core.config import load_config
from core.errors import DataError
from services import nn, trainloop
from services.preprocess import extract_tissue_mask
from services.raster import BinaryMask, ImagePyramid, RasterImage
from services.records import SlideRecord
from services.trainloop import ANNOTATED, MINED_POSITIVE, PATHOLOGIST_CORRECTED, PatchDataset, PatchSample


def _sample(x, y, label=1, provenance=ANNOTATED, slide='s1', level='40x'):
    return PatchSample(slide, x, y, level, label, provenance)


def _memory_context(record: SlideRecord, size: int = 256) -> trainloop.SlideContext:
    rng = np.random.default_rng(0)
    base = RasterImage(rng.integers(150, 230, size=(size, size, 3), dtype=np.uint8))
    small = RasterImage(base.data[::4, ::4])
    pyramid = ImagePyramid.from_images({'40x': (base, 1), '10x': (small, 4)})
    mask = BinaryMask(np.ones((size // 4, size // 4), dtype=bool), 4)
    return trainloop.SlideContext(record, mask, _pyramid=pyramid)


# ==================== 데이터셋 ====================
def test_dataset_rejects_duplicate_keys():
    with pytest.raises(DataError):
        PatchDataset((_sample(1, 2), _sample(1, 2, label=0, provenance=MINED_POSITIVE)))


@pytest.mark.parametrize('label, provenance', [(2, ANNOTATED), (1, 'guessed')])
def test_dataset_rejects_bad_entries(label, provenance):
    with pytest.raises(DataError):
        PatchDataset((_sample(1, 2, label, provenance),))


def test_dataset_extend_keeps_existing_entries():
    dataset = PatchDataset((_sample(1, 1), _sample(5, 5, label=0, provenance='random_negative')))

    extended = dataset.extend([_sample(5, 5, provenance=MINED_POSITIVE), _sample(9, 9, provenance=MINED_POSITIVE)])

    assert len(extended) == 3
    assert set(dataset.samples) <= set(extended.samples)
    assert extended.summary()['mined_positive'] == 1
    assert extended.positive_keys() >= dataset.positive_keys()


def test_corrections_never_relabel_annotated_entries():
    dataset = PatchDataset((_sample(1, 1), _sample(2, 2, provenance=MINED_POSITIVE)))
    corrections = [
        {'slide': 's1', 'x': 1, 'y': 1, 'level': '40x', 'new_label': 0},
        {'slide': 's1', 'x': 2, 'y': 2, 'level': '40x', 'new_label': 0},
        {'slide': 's1', 'x': 7, 'y': 3, 'level': '40x', 'new_label': 1},
    ]

    corrected = {s.key: s for s in trainloop.apply_corrections(dataset, corrections).samples}

    assert corrected[('s1', '40x', 1, 1)] == _sample(1, 1)
    assert corrected[('s1', '40x', 2, 2)].label == 0
    assert corrected[('s1', '40x', 2, 2)].provenance == PATHOLOGIST_CORRECTED
    assert corrected[('s1', '40x', 3, 7)].label == 1


def test_read_corrections_requires_list(tmp_path):
    path = tmp_path / 'corrections.json'
    path.write_text(json.dumps({'slide': 's1'}), encoding='utf-8')

    with pytest.raises(DataError):
        trainloop.read_corrections(path)


def test_split_validation_is_deterministic():
    dataset = PatchDataset(tuple(_sample(i, 0, label=i % 2) for i in range(20)))

    first = trainloop.split_validation(dataset, 0.25, seed=3)

    assert len(first) == 5
    assert first == trainloop.split_validation(dataset, 0.25, seed=3)
    assert trainloop.split_validation(dataset, 0.0, seed=3) == set()


# ==================== 핵 후보 ====================
def test_propose_nuclei_filters_by_area():
    data = np.full((48, 48, 3), 240, dtype=np.uint8)
    yy, xx = np.mgrid[:48, :48]
    data[(yy - 12) ** 2 + (xx - 12) ** 2 <= 16] = 60
    data[(yy - 30) ** 2 + (xx - 34) ** 2 <= 16] = 60
    data[40:42, 4:6] = 60

    nuclei = trainloop.propose_nuclei(RasterImage(data), area_range=(20, 2000))

    assert len(nuclei) == 2
    centroids = sorted(n.centroid for n in nuclei)
    assert centroids[0] == pytest.approx((12.0, 12.0))
    assert centroids[1] == pytest.approx((34.0, 30.0))
    assert all(n.area == 49 for n in nuclei)


def test_propose_nuclei_on_flat_patch_is_empty():
    assert trainloop.propose_nuclei(RasterImage(np.full((16, 16, 3), 200, dtype=np.uint8))) == []


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(2, 14), st.integers(2, 14))))
def test_propose_nuclei_matches_flood_fill(flood_fill, bits):
    assume(bits.any() and not bits.all())
    data = np.where(bits[..., None], 40, 245).astype(np.uint8).repeat(3, axis=2)

    nuclei = trainloop.propose_nuclei(RasterImage(data), area_range=(1, 10_000))
    expected = flood_fill(bits)

    assert sorted(n.area for n in nuclei) == sorted(len(c) for c in expected)
    found = sorted(n.centroid for n in nuclei)
    oracle = sorted((float(np.mean([c for _, c in cells])), float(np.mean([r for r, _ in cells])))
                    for cells in expected)
    assert np.allclose(found, oracle, atol=1e-9)


# ==================== 텐서 변환 ====================
def test_crop_tensor_pads_outside_with_zero():
    image = RasterImage(np.full((8, 8, 3), 255, dtype=np.uint8))

    tensor = trainloop.crop_tensor(image, 0, 0, 6, 3)

    assert tensor.shape == (3, 6, 6)
    assert np.all(tensor[:, :3, :] == 0) and np.all(tensor[:, 3:, 3:] == 1.0)


def test_dataset_tensors_label_only_center_cell():
    record = SlideRecord('s1')
    contexts = {'s1': _memory_context(record)}
    spec = nn.mitosnet_mini()
    dataset = PatchDataset((_sample(40, 40), _sample(100, 120, label=0, provenance='random_negative')))

    inputs, labels = trainloop.dataset_tensors(dataset, contexts, spec, context_cells=1)

    assert trainloop.training_input_size(spec, 1) == 48
    assert inputs.shape == (2, 3, 48, 48)
    assert labels.shape == (2, 3, 3)
    assert labels[0, 1, 1] == 1 and labels[1, 1, 1] == 0
    assert np.sum(labels != nn.IGNORE_LABEL) == 2


def test_tumor_stage1_negatives_stay_outside_tumor():
    square = np.array([[64.0, 64.0], [192.0, 64.0], [192.0, 192.0], [64.0, 192.0]])
    ctx = _memory_context(SlideRecord('s1', tumors=[square]))
    config = load_config(None, {'seed': 7, 'train': {'neg_ratio': 1.0, 'max_positives_per_slide': 0}})

    dataset = trainloop.build_stage1_dataset([ctx], 'tumor', 1.0, config)

    assert dataset.positives == 4
    assert dataset.negatives <= 4
    for sample in dataset.samples:
        inside = 64 <= sample.x * 4 <= 192 and 64 <= sample.y * 4 <= 192
        assert inside == (sample.label == 1)
        assert sample.level == '10x'


def _flat_context(record: SlideRecord, size: int = 256) -> trainloop.SlideContext:
    base = RasterImage(np.full((size, size, 3), 200, dtype=np.uint8))
    pyramid = ImagePyramid.from_images({'40x': (base, 1), '10x': (RasterImage(base.data[::4, ::4]), 4)})
    return trainloop.SlideContext(record, BinaryMask(np.ones((size // 4, size // 4), dtype=bool), 4),
                                  _pyramid=pyramid)


MITOSES = np.array([[40.0, 40.0], [128.0, 200.0], [210.0, 90.0]])


@pytest.mark.parametrize('copies', [0, 4])
def test_mitosis_positives_keep_annotation_in_center_cell(copies):
    ctx = _flat_context(SlideRecord('s1', mitoses=MITOSES))
    config = load_config(None, {'seed': 7, 'train': {'mitosis_jitter_copies': copies, 'neg_ratio': 0.0}})
    stride = nn.mitosnet_mini().total_stride

    dataset = trainloop.build_stage1_dataset([ctx], 'mitosis', 0.0, config)

    positives = np.array([(s.x, s.y) for s in dataset.samples if s.label == 1], dtype=np.float64)
    nearest = np.abs(positives[:, None, :] - MITOSES[None, :, :]).max(axis=2).min(axis=1)
    assert np.all(nearest <= stride // 2 - 1)
    if copies:
        assert len(MITOSES) < dataset.positives <= (1 + copies) * len(MITOSES)
    else:
        assert sorted(map(tuple, positives)) == sorted(map(tuple, MITOSES))


def test_mitosis_negatives_hold_no_annotation_in_center_cell():
    ctx = _flat_context(SlideRecord('s1', mitoses=MITOSES))
    config = load_config(None, {'seed': 7, 'train': {'background_negatives': 3.0}})
    stride = nn.mitosnet_mini().total_stride

    dataset = trainloop.build_stage1_dataset([ctx], 'mitosis', 0.0, config)

    negatives = np.array([(s.x, s.y) for s in dataset.samples if s.label == 0], dtype=np.float64)
    assert 0 < len(negatives) <= 3 * dataset.positives
    nearest = np.abs(negatives[:, None, :] - MITOSES[None, :, :]).max(axis=2).min(axis=1)
    assert np.all(nearest > stride / 2)
    assert {s.provenance for s in dataset.samples if s.label == 0} == {trainloop.RANDOM_NEGATIVE}


def test_stage1_without_positives_raises():
    ctx = _memory_context(SlideRecord('s1'))

    with pytest.raises(DataError):
        trainloop.build_stage1_dataset([ctx], 'tumor', 3.0, load_config(None, {'seed': 7}))


def test_simulated_review_rejects_only_far_mined_positives():
    record = SlideRecord('s1', mitoses=np.array([[50.0, 50.0]]))
    contexts = {'s1': _memory_context(record)}
    dataset = PatchDataset((_sample(52, 50, provenance=MINED_POSITIVE), _sample(150, 150, provenance=MINED_POSITIVE),
                            _sample(200, 10)))

    corrections = trainloop.simulate_review(dataset, contexts, radius=8.0)

    assert corrections == [{'slide': 's1', 'x': 150, 'y': 150, 'level': '40x', 'new_label': 0}]


# ==================== 소형 코퍼스 종단 학습 ====================
def _tiny_contexts(records):
    return [trainloop.SlideContext(record, extract_tissue_mask(record.pyramid(), '10x', min_area=16))
            for record in records]


def _tiny_train_config():
    return load_config(None, {
        'seed': 7,
        'train': {'epochs': 2, 'batch_size': 16, 'cascade_epochs': 1, 'cascade_patches_per_slide': 2,
                  'validation_fraction': 0.2},
        'heatmap': {'tile_size': 64, 'patch_size': 128},
    })


@pytest.mark.slow
def test_two_stage_mitosis_training_on_tiny_corpus(tiny_corpus):
    _, records = tiny_corpus
    contexts = _tiny_contexts(records)
    config = _tiny_train_config()

    store, report, applied = trainloop.train_two_stage(contexts, 'mitosis', config)

    assert store.spec.name == 'mitosnet_mini'
    assert report['parameter_count'] == 9074
    assert report['stage2']['dataset']['size'] >= report['stage1']['dataset']['size']
    assert report['stage2']['dataset']['annotated'] == report['stage1']['dataset']['annotated']
    assert report['corrections'] == len(applied)
    assert all(item['new_label'] == 0 for item in applied)
    assert len(report['stage2']['losses']) == config.train.epochs

    again, _, _ = trainloop.train_two_stage(contexts, 'mitosis', config)
    assert all(np.array_equal(a, b) for a, b in zip(store.arrays(), again.arrays()))


@pytest.mark.slow
def test_cascade_heads_on_frozen_trunk(tiny_corpus):
    _, records = tiny_corpus
    contexts = _tiny_contexts(records)
    config = _tiny_train_config()
    detector = nn.init_weights(nn.mitosnet_mini(), seed=7)

    heads, report = trainloop.train_cascade_heads(contexts, {'mitosis': detector}, config)

    head = heads['cascade_mitosis']
    assert head.spec.output_channels == 3
    assert report['cascade_mitosis']['patches'] == 2 * len(contexts)
    assert all(np.array_equal(a, b) for a, b in zip(detector.arrays(), nn.init_weights(nn.mitosnet_mini(), 7).arrays()))
