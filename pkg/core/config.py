# -*- coding: utf-8 -*-
"""
config.py
- 프로젝트 전체 설정 중앙화
- 산출물 경로 규칙, 종료 코드, 로깅 설정, 설정 파일 로딩 관리
"""

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError

from core.errors import ConfigError
from core.schemas import PipelineConfig

# ==================== 프로젝트 정보 ====================
PROJECT_NAME = "Prolif Histo"
VERSION = "1.0.0"
DESCRIPTION = "유방암 조직 영상 종양 증식도 평가 파이프라인"

# ==================== 기본 경로 설정 ====================
PROJECT_ROOT = Path(__file__).resolve().parent.parent
TESTS_DIR = PROJECT_ROOT / "tests"
DEFAULT_CONFIG_FILE = PROJECT_ROOT / "configs" / "desk.json"

# ==================== 산출물 배치 ====================
# --out-dir 기준 상대 경로. 모든 단계가 이 규칙을 공유한다.
ARTIFACT_LAYOUT = {
    'corpus': 'corpus',
    'corpus_index': 'corpus/corpus.json',
    'normalized': 'normalized',
    'masks': 'masks',
    'models': 'models',
    'heatmaps': 'heatmaps',
    'features': 'features',
    'predictions': 'predictions',
    'reports': 'reports',
    'logs': 'logs',
}

MODEL_FILES = {
    'tumor': 'models/tumor.weights',
    'mitosis': 'models/mitosis.weights',
    'cascade_tumor': 'models/cascade_tumor.weights',
    'cascade_mitosis': 'models/cascade_mitosis.weights',
}

RESULT_FILES = {
    'features_csv': 'features/features.csv',
    'features_json': 'features/features.json',
    'deep_vectors': 'features/deep_vectors.bin',
    'grade_predictions': 'predictions/grade_predictions.csv',
    'score_predictions': 'predictions/score_predictions.csv',
    'metrics': 'reports/metrics.json',
    'biomarkers': 'reports/biomarkers.csv',
    'detection_metrics': 'reports/detection_metrics.json',
    'run_report': 'reports/run_report.json',
}

# 단계 이름 (로그 출력용)
PIPELINE_NAMES = {
    'synth': '0단계: 합성 코퍼스 생성',
    'normalize': '1단계: 염색 표준화',
    'mask': '2단계: 조직 마스크 추출',
    'train': '3단계: 검출기 학습',
    'heatmap': '4단계: 히트맵 생성',
    'features': '5단계: 특징 추출',
    'predict': '6단계: 교차 검증 예측',
    'evaluate': '7단계: 평가 지표 산출',
}

# ==================== 종료 코드 ====================
EXIT_CODES = {
    'ok': 0,
    'failure': 1,
    'config': 2,
    'dependency': 3,
    'numeric': 4,
    'interrupted': 130,
}

# ==================== 로깅 설정 ====================
LOGGING_CONFIG = {
    'level': 'INFO',
    'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    'file_encoding': 'utf-8',
    'console_output': True,
    'file_output': True,
    'max_file_size': 10 * 1024 * 1024,  # 10MB
    'backup_count': 5,
}

# 산출물 직렬화 포맷 버전
FORMAT_VERSION = 1


# ==================== 설정 로딩 ====================
def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """중첩 딕셔너리를 재귀적으로 병합합니다."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(config_path: Optional[Union[str, Path]] = None,
                overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    설정 파일을 읽어 검증된 파이프라인 설정을 반환합니다.

    기본값 → JSON 파일 → 명령줄 플래그 순서로 덮어쓰며,
    최상위 seed는 seed를 가진 하위 섹션(synth, train)으로 전파됩니다.

    Args:
        config_path: JSON 설정 파일 경로 (None이면 기본값만 사용)
        overrides: 최상위 키 덮어쓰기 (예: {'seed': 7, 'jobs': 4})

    Returns:
        검증된 PipelineConfig

    Raises:
        ConfigError: 파일을 읽을 수 없거나 검증에 실패한 경우
    """
    raw: Dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"설정 파일을 찾을 수 없습니다: {path}")
        except (OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConfigError(f"설정 파일을 읽을 수 없습니다 {path}: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"설정 파일 최상위는 객체여야 합니다: {path}")

    defaults = PipelineConfig().model_dump(mode='json')
    merged = _deep_merge(defaults, raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    # 하위 섹션 시드는 최상위 시드를 따른다
    merged['synth']['seed'] = merged['seed']
    merged['train']['seed'] = merged['seed']

    try:
        return PipelineConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"설정 검증 실패: {e}")


def config_hash(config: PipelineConfig) -> str:
    """정렬된 JSON 직렬화 기준의 설정 해시를 반환합니다."""
    canonical = json.dumps(config.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def artifact_path(out_dir: Union[str, Path], key: str) -> Path:
    """
    산출물 키를 --out-dir 기준 절대 경로로 변환합니다.

    Args:
        out_dir: 출력 루트
        key: ARTIFACT_LAYOUT / MODEL_FILES / RESULT_FILES 키

    Returns:
        산출물 경로
    """
    for table in (ARTIFACT_LAYOUT, MODEL_FILES, RESULT_FILES):
        if key in table:
            return Path(out_dir) / table[key]
    raise KeyError(f"알 수 없는 산출물 키: {key}")


def ensure_directories(out_dir: Union[str, Path]) -> None:
    """출력 루트 아래 필요한 디렉토리들을 생성합니다."""
    for relative in ARTIFACT_LAYOUT.values():
        target = Path(out_dir) / relative
        if target.suffix:
            target = target.parent
        target.mkdir(parents=True, exist_ok=True)
