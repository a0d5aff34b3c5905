# -*- coding: utf-8 -*-
"""
conftest.py
- 테스트 공통 픽스처: 저장소 루트 경로 등록, 고정 시드 난수, 소형 합성 코퍼스
"""

import sys
from collections import deque
from pathlib import Path

import numpy as np
import pytest

# main.py와 같은 방식으로 프로젝트 루트를 Python 경로에 추가
project_root = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(project_root))

from core.config import load_config  # noqa: E402
from core.schemas import SynthConfig  # noqa: E402
from services.raster import RasterImage  # noqa: E402
from services.synth import generate_corpus  # noqa: E402

TINY_SYNTH = {
    'slide_count': 6,
    'aux_slide_count': 2,
    'level0_size': 256,
    'tumor_count': [1, 1],
    'tumor_radius_fraction': [0.12, 0.16],
    'mitosis_rate': 20.0,
    'mitosis_min_separation': 12.0,
}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_synth_config() -> SynthConfig:
    return SynthConfig(**TINY_SYNTH)


@pytest.fixture
def tiny_pipeline_config():
    return load_config(None, {'seed': 7})


@pytest.fixture
def tiny_corpus(tmp_path, tiny_synth_config):
    """슬라이드 8장짜리 합성 코퍼스 (corpus 디렉토리, SlideRecord 목록)."""
    corpus_dir = tmp_path / 'corpus'
    records = generate_corpus(tiny_synth_config, corpus_dir)
    return corpus_dir, records


@pytest.fixture
def tissue_disk() -> RasterImage:
    """조직(분홍) 원판이 흰 배경 위에 있는 64×64 RGB."""
    data = np.full((64, 64, 3), 245, dtype=np.uint8)
    yy, xx = np.mgrid[:64, :64]
    disk = (yy - 32) ** 2 + (xx - 32) ** 2 < 20 ** 2
    data[disk] = (200, 120, 170)
    return RasterImage(data)


def _flood_fill_components(bits: np.ndarray):
    """4-연결 성분을 너비 우선 탐색으로 직접 찾는 기준 구현."""
    height, width = bits.shape
    seen = np.zeros_like(bits, dtype=bool)
    components = []
    for row in range(height):
        for col in range(width):
            if not bits[row, col] or seen[row, col]:
                continue
            queue, cells = deque([(row, col)]), []
            seen[row, col] = True
            while queue:
                r, c = queue.popleft()
                cells.append((r, c))
                for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= nr < height and 0 <= nc < width and bits[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            components.append(frozenset(cells))
    return components


@pytest.fixture(scope='session')
def flood_fill():
    """bool 격자 → 성분별 (row, col) frozenset 목록."""
    return _flood_fill_components
