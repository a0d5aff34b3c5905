# -*- coding: utf-8 -*-
"""합성 코퍼스 결정성 / 정답 일관성 테스트"""

import numpy as np
import pytest

from core.config import load_config
from core.errors import ConfigError, SynthError
from core.schemas import SynthConfig
from services import synth
from services.raster import RasterImage, load_pyramid
from services.records import SPLIT_AUX, SPLIT_EVAL, load_corpus, points_in_polygons, polygons_mask
from utils.file_utils import FileUtils


@pytest.mark.parametrize('density, expected', [(0.0, 0), (1.0, 0), (4 / 3, 1), (2.0, 1), (8 / 3, 2), (9.0, 2)])
def test_grade_from_density_boundaries_go_up(density, expected):
    assert synth.grade_from_density(density, (4 / 3, 8 / 3)) == expected


def test_generate_slide_is_deterministic(tiny_synth_config):
    first = synth.generate_slide('slide_000', SPLIT_EVAL, 0, tiny_synth_config)
    second = synth.generate_slide('slide_000', SPLIT_EVAL, 0, tiny_synth_config)
    other = synth.generate_slide('slide_001', SPLIT_EVAL, 1, tiny_synth_config)

    assert np.array_equal(first.image.data, second.image.data)
    assert np.array_equal(first.mitoses, second.mitoses)
    assert not np.array_equal(first.image.data, other.image.data)


def test_planted_mitoses_lie_in_tumors_and_set_grade(tiny_synth_config):
    slide = synth.generate_slide('slide_002', SPLIT_EVAL, 2, tiny_synth_config)

    assert points_in_polygons(slide.mitoses, slide.tumors).all()
    assert slide.grade == synth.grade_from_density(slide.density, tiny_synth_config.grade_thresholds)
    assert slide.image.width == slide.image.height == tiny_synth_config.level0_size


@pytest.mark.parametrize('synth_section', [
    {'tumor_radius_fraction': (0.3, 0.5), 'tissue_radius_fraction': (0.2, 0.3)},
    {'tumor_radius_fraction': (0.2, 0.1)},
    {'tissue_radius_fraction': (0.0, 0.3)},
])
def test_tumor_geometry_that_cannot_fit_is_a_config_error(synth_section):
    with pytest.raises(ConfigError):
        load_config(None, {'synth': synth_section})


@pytest.mark.parametrize('seed', range(11, 21))
def test_large_tumors_are_planted_inside_tissue(seed):
    config = SynthConfig(seed=seed, level0_size=256, tumor_count=(1, 2), tumor_radius_fraction=(0.14, 0.2))

    for index in range(6):
        slide = synth.generate_slide(f'slide_{index:03d}', SPLIT_EVAL, index, config)

        tissue = polygons_mask([slide.tissue], (256, 256))
        tumor_masks = [polygons_mask([polygon], (256, 256)) for polygon in slide.tumors]
        assert 1 <= len(slide.tumors) <= 2
        for mask in tumor_masks:
            assert mask.any() and not np.any(mask & ~tissue)
        if len(tumor_masks) == 2:
            assert not np.any(tumor_masks[0] & tumor_masks[1])


def test_no_room_for_first_tumor_raises_synth_error(tiny_synth_config):
    tissue = np.zeros((256, 256), dtype=bool)
    tissue[100:110, 100:110] = True

    with pytest.raises(SynthError):
        synth._plant_tumors(256, tissue, tiny_synth_config, np.random.default_rng(0))


def test_build_levels_block_average():
    image = RasterImage(np.arange(16, dtype=np.uint8).reshape(4, 4).repeat(3).reshape(4, 4, 3))

    levels = synth.build_levels(image, {'40x': 1, '10x': 2})

    assert levels['40x'][0] is image
    assert levels['10x'][1] == 2
    assert levels['10x'][0].plane(0).tolist() == [[2, 4], [10, 12]]


def test_corpus_layout_and_reload(tiny_corpus, tiny_synth_config):
    corpus_dir, records = tiny_corpus

    reloaded = load_corpus(corpus_dir / 'corpus.json')

    assert [r.slide_id for r in records] == [r.slide_id for r in reloaded]
    assert sum(r.split == SPLIT_AUX for r in reloaded) == tiny_synth_config.aux_slide_count
    assert sum(r.split == SPLIT_EVAL for r in reloaded) == tiny_synth_config.slide_count
    record = reloaded[0]
    pyramid = load_pyramid(record.pyramid_path)
    assert pyramid.level_factor('10x') == 4
    assert pyramid.read_level('10x').width == tiny_synth_config.level0_size // 4
    assert np.allclose(record.truth()['mitoses'], record.mitoses, atol=1e-3)
    assert record.grade in (0, 1, 2) and record.molecular_score is not None


def test_corpus_bytes_are_reproducible(tmp_path, tiny_synth_config):
    synth.generate_corpus(tiny_synth_config, tmp_path / 'a', jobs=1)
    synth.generate_corpus(tiny_synth_config, tmp_path / 'b', jobs=3)

    files_a = sorted(p.relative_to(tmp_path / 'a') for p in (tmp_path / 'a').rglob('*') if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / 'b') for p in (tmp_path / 'b').rglob('*') if p.is_file())
    assert files_a == files_b
    for relative in files_a:
        assert FileUtils.sha256_file(tmp_path / 'a' / relative) == FileUtils.sha256_file(tmp_path / 'b' / relative)
