# -*- coding: utf-8 -*-
"""
test_pipeline.py
- 소형 합성 코퍼스로 전체 단계를 돌리는 종단 간 테스트 (느림)
"""

import json

import numpy as np
import pandas as pd
import pytest

from core.config import EXIT_CODES, load_config
from core.pipeline_manager import CODEBOOK_SCOPE, PipelineManager
from main import main
from services import heatmap as hm
from services.features import SCHEMA_VERSION

TINY_PIPELINE = {
    'seed': 11,
    'synth': {
        'slide_count': 8,
        'aux_slide_count': 4,
        'level0_size': 256,
        'tumor_count': [1, 2],
        'tumor_radius_fraction': [0.14, 0.2],
        'mitosis_rate': 20.0,
        'mitosis_min_separation': 12.0,
    },
    'preprocess': {'min_area': 16},
    'train': {'epochs': 2, 'batch_size': 16, 'cascade_epochs': 1, 'cascade_patches_per_slide': 2,
              'max_positives_per_slide': 40},
    'heatmap': {'tumor_level': '40x', 'tile_size': 64, 'patch_size': 128, 'fringe_patch_count': 3},
    'features': {'bof_clusters': 4, 'grid_size': 4},
    'predict': {'folds': 2},
}


def _run_stages(config, out_dir) -> dict:
    manager = PipelineManager(config, out_dir, 'pipeline', 'WARNING', quiet=True)
    records = manager.run_synth()
    manager.run_normalize()
    manager.run_mask()
    manager.run_train('tumor')
    manager.run_train('mitosis')
    manager.run_train('cascade')
    manager.run_heatmap()
    manager.run_features()
    grades = np.array([r.grade for r in records if r.split == 'eval'])
    if np.bincount(grades, minlength=3)[np.unique(grades)].min() >= config.predict.folds:
        manager.run_predict('grade')
    manager.run_predict('score')
    manager.run_evaluate()
    report = manager.generate_report()
    manager.save_report(report)
    return report


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(TINY_PIPELINE), encoding='utf-8')
    return path


@pytest.mark.slow
def test_pipeline_end_to_end_is_deterministic(tmp_path, tiny_config_file):
    config = load_config(tiny_config_file)

    first = _run_stages(config, tmp_path / 'run1')
    second = _run_stages(config, tmp_path / 'run2')

    assert first == second
    out = tmp_path / 'run1'
    for relative in ('models/tumor.weights', 'models/mitosis.weights', 'models/cascade_tumor.weights',
                     'models/cascade_mitosis.weights', 'features/features.csv', 'features/deep_vectors.bin',
                     'predictions/score_predictions.csv', 'reports/metrics.json', 'reports/biomarkers.csv',
                     'reports/detection_metrics.json', 'reports/run_report.json'):
        assert (out / relative).exists(), relative
        if relative.endswith(('.csv', '.json', '.bin', '.weights')) and 'run_report' not in relative:
            provenance = json.loads((out / (relative + '.provenance.json')).read_text(encoding='utf-8'))
            assert provenance['seed'] == 11

    table = pd.read_csv(out / 'features/features.csv')
    assert len(table) == 8
    assert table.drop(columns='slide').notna().all().all()
    features_meta = json.loads((out / 'features/features.json').read_text(encoding='utf-8'))
    assert features_meta['schema_version'] == SCHEMA_VERSION
    assert features_meta['codebook']['fit_scope'] == CODEBOOK_SCOPE
    assert features_meta['codebook']['fit_slides'] == 8
    assert features_meta['codebook']['refit_per_fold'] is True

    predictions = pd.read_csv(out / 'predictions/score_predictions.csv')
    assert set(predictions['fold']) == {0, 1}
    metrics = json.loads((out / 'reports/metrics.json').read_text(encoding='utf-8'))
    assert set(metrics['regression']) >= {'mse', 'pearson_r', 'spearman_rho'}
    assert metrics['biomarker_codebook_scope'] == CODEBOOK_SCOPE
    detection = json.loads((out / 'reports/detection_metrics.json').read_text(encoding='utf-8'))
    assert 0.0 <= detection['mitosis']['gate_recall'] <= 1.0
    assert detection['mitosis']['truth_in_gate'] <= detection['mitosis']['truth']
    assert (out / 'reports/run_report.json').read_bytes() == (tmp_path / 'run2/reports/run_report.json').read_bytes()


@pytest.mark.slow
def test_cli_stages_resume_from_out_dir(tmp_path, tiny_config_file):
    out = str(tmp_path / 'out')
    common = ['--config', str(tiny_config_file), '--out-dir', out, '--quiet', '--log-level', 'WARNING']

    assert main(['synth'] + common) == EXIT_CODES['ok']
    assert main(['features'] + common) == EXIT_CODES['dependency']
    for command in (['normalize'], ['mask'], ['train', '--kind', 'tumor'], ['train', '--kind', 'mitosis'],
                    ['train', '--kind', 'cascade'], ['heatmap', '--mode', 'sliding']):
        assert main(command + common) == EXIT_CODES['ok'], command

    assert (tmp_path / 'out' / 'heatmaps').is_dir()
    assert any((tmp_path / 'out' / 'heatmaps').glob('*_detections.json'))


# ==================== 유사분열 종양 게이트 ====================
def _gate_manager(tmp_path, dilation):
    config = load_config(None, {'heatmap': {'gate_dilation_cells': dilation}})
    return PipelineManager(config, tmp_path / 'out', 'pipeline', 'WARNING', quiet=True)


def _tumor_heatmap():
    probs = np.zeros((8, 8))
    probs[2, 2] = 0.9
    return hm.Heatmap(probs, 16, '10x', 1)


@pytest.mark.parametrize('dilation, expected', [(0, [True, False, False]), (1, [True, True, False]),
                                                (2, [True, True, False])])
def test_gate_follows_dilation_setting(tmp_path, dilation, expected):
    manager = _gate_manager(tmp_path, dilation)
    points = np.array([[40.0, 40.0], [56.0, 40.0], [100.0, 100.0]])

    assert manager.gate_mask(points, _tumor_heatmap()).tolist() == expected


def test_gate_passes_points_inside_fringe_patches(tmp_path):
    manager = _gate_manager(tmp_path, 0)
    patch = hm.PatchCoord(x=48, y=48, size=32, center=(64, 64), region_id=1, cell=(2, 2))
    points = np.array([[100.0, 100.0], [159.0, 96.0], [160.0, 96.0], [200.0, 10.0]])

    kept = manager.restrict_to_tumor(points, _tumor_heatmap(), [patch], factor=2)

    assert kept.tolist() == [[100.0, 100.0], [159.0, 96.0]]
    assert manager.restrict_to_tumor(np.zeros((0, 2)), _tumor_heatmap()).shape == (0, 2)


def test_detection_metrics_report_gate_recall():
    totals = {'true_positives': 3, 'predicted': 4, 'truth': 5, 'truth_in_gate': 4}

    metrics = PipelineManager._detection_metrics([], [], totals)

    assert metrics['tumor_heatmap_auc'] is None
    assert metrics['mitosis']['gate_recall'] == pytest.approx(0.8)
    assert metrics['mitosis']['recall'] == pytest.approx(0.6)
    assert metrics['mitosis']['f1'] == pytest.approx(2 * 0.75 * 0.6 / 1.35)


# ==================== 검출 품질 ====================
DETECTION_PIPELINE = {
    'seed': 5,
    'synth': {
        'slide_count': 6,
        'aux_slide_count': 6,
        'level0_size': 512,
        'tumor_count': [1, 2],
        'tumor_radius_fraction': [0.1, 0.14],
        'mitosis_rate': 10.0,
        'mitosis_min_separation': 40.0,
        'aux_annotation_fraction': 1.0,
    },
    'preprocess': {'min_area': 16},
    'train': {'epochs': 12, 'batch_size': 32, 'cascade_epochs': 1, 'cascade_patches_per_slide': 2,
              'max_positives_per_slide': 0},
    'heatmap': {'tumor_level': '40x', 'tile_size': 128, 'patch_size': 128, 'fringe_patch_count': 8},
}


@pytest.mark.slow
def test_planted_corpus_detection_quality(tmp_path):
    config = load_config(None, DETECTION_PIPELINE)
    manager = PipelineManager(config, tmp_path / 'out', 'pipeline', 'WARNING', quiet=True)
    manager.run_synth()
    manager.run_normalize()
    manager.run_mask()
    manager.run_train('tumor')
    manager.run_train('mitosis')

    metrics = manager.run_heatmap()

    assert metrics['tumor_heatmap_auc'] >= 0.95
    assert metrics['mitosis']['truth'] > 0
    assert metrics['mitosis']['gate_recall'] >= 0.9
    assert metrics['mitosis']['f1'] >= 0.8
