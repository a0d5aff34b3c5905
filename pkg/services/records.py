"""
슬라이드 기록 서비스
슬라이드 주석(종양 다각형, 유사분열 점, 등급, 분자 점수)과 코퍼스 인덱스 입출력
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from skimage import draw, measure

from core.errors import DataError, DependencyError
from services.raster import ImagePyramid, load_pyramid
from utils.json_utils import JSONUtils

logger = logging.getLogger(__name__)

SPLIT_EVAL = 'eval'
SPLIT_AUX = 'aux'


@dataclass
class SlideRecord:
    """슬라이드 하나의 주석. 좌표는 모두 레벨 0(40x) 픽셀 (x, y)."""

    slide_id: str
    pyramid_path: Optional[Path] = None
    tumors: List[np.ndarray] = field(default_factory=list)
    mitoses: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    grade: Optional[int] = None
    molecular_score: Optional[float] = None
    split: str = SPLIT_EVAL
    truth_path: Optional[Path] = None

    def __post_init__(self):
        self.tumors = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in self.tumors]
        self.mitoses = np.asarray(self.mitoses, dtype=np.float64).reshape(-1, 2)
        if self.grade is not None and self.grade not in (0, 1, 2):
            raise DataError(f"등급은 0, 1, 2 중 하나여야 합니다: {self.grade} ({self.slide_id})")

    def pyramid(self) -> ImagePyramid:
        if self.pyramid_path is None:
            raise DependencyError(f"{self.slide_id} 피라미드 경로")
        return load_pyramid(self.pyramid_path)

    def truth(self) -> Dict[str, Any]:
        """합성 정답 사이드카(전체 종양/조직 다각형)를 읽습니다. 없으면 주석을 그대로 씁니다."""
        if self.truth_path is not None and Path(self.truth_path).exists():
            data = JSONUtils.require_json(self.truth_path)
            return {
                'tissue': np.asarray(data.get('tissue', []), dtype=np.float64).reshape(-1, 2),
                'tumors': [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in data.get('tumors', [])],
                'mitoses': np.asarray(data.get('mitoses', []), dtype=np.float64).reshape(-1, 2),
                'density': data.get('density'),
            }
        return {'tissue': np.zeros((0, 2)), 'tumors': list(self.tumors),
                'mitoses': self.mitoses.copy(), 'density': None}

    def annotation_dict(self) -> Dict[str, Any]:
        return {
            'tumors': [np.round(p, 3).tolist() for p in self.tumors],
            'mitoses': np.round(self.mitoses, 3).tolist(),
            'grade': self.grade,
            'molecular_score': self.molecular_score,
        }


# ==================== 기하 도우미 ====================
def polygons_mask(polygons: List[np.ndarray], shape: Tuple[int, int], factor: int = 1) -> np.ndarray:
    """
    레벨 0 다각형들을 주어진 배율 격자에 래스터화합니다.

    Args:
        polygons: (x, y) 꼭짓점 배열 목록
        shape: (높이, 너비)
        factor: 레벨 0 대비 다운샘플 배수

    Returns:
        불리언 마스크
    """
    mask = np.zeros(shape, dtype=bool)
    for polygon in polygons:
        if len(polygon) < 3:
            continue
        scaled = polygon / float(factor)
        rr, cc = draw.polygon(scaled[:, 1], scaled[:, 0], shape=shape)
        mask[rr, cc] = True
    return mask


def points_in_polygons(points: np.ndarray, polygons: List[np.ndarray]) -> np.ndarray:
    """각 점이 어떤 다각형 안에라도 있는지 반환합니다."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    inside = np.zeros(len(points), dtype=bool)
    for polygon in polygons:
        if len(polygon) >= 3 and len(points):
            inside |= measure.points_in_poly(points, polygon)
    return inside


# ==================== 입출력 ====================
def write_annotations(record: SlideRecord, path: Union[str, Path]) -> None:
    """슬라이드 주석 JSON을 저장합니다."""
    JSONUtils.save_json(record.annotation_dict(), path)


def read_annotations(path: Union[str, Path], slide_id: str) -> SlideRecord:
    """슬라이드 주석 JSON을 읽습니다."""
    data = JSONUtils.require_json(path)
    return SlideRecord(
        slide_id=slide_id,
        tumors=data.get('tumors', []),
        mitoses=data.get('mitoses', []),
        grade=data.get('grade'),
        molecular_score=data.get('molecular_score'),
    )


def load_corpus(corpus_index: Union[str, Path], stage: Optional[str] = None,
                split: Optional[str] = None) -> List[SlideRecord]:
    """
    코퍼스 인덱스(corpus.json)에서 슬라이드 기록을 읽습니다.

    Args:
        corpus_index: 인덱스 파일 경로
        stage: 오류 메시지용 단계 이름
        split: 'eval' 또는 'aux'로 거르기 (None이면 전체)

    Returns:
        slide_id 순으로 정렬된 SlideRecord 목록

    Raises:
        DependencyError: 인덱스가 없는 경우
        DataError: 항목에 필수 필드가 없는 경우
    """
    corpus_index = Path(corpus_index)
    index = JSONUtils.require_json(corpus_index, stage)
    root = corpus_index.parent

    records = []
    for entry in index.get('slides', []):
        valid, missing = JSONUtils.validate_json_structure(entry, ['id', 'manifest', 'annotations'])
        if not valid:
            raise DataError(f"코퍼스 인덱스 항목에 필드가 없습니다 {missing}: {corpus_index}", stage)
        if split is not None and entry.get('split') != split:
            continue
        record = read_annotations(root / entry['annotations'], entry['id'])
        record.pyramid_path = root / entry['manifest']
        record.split = entry.get('split', SPLIT_EVAL)
        if entry.get('truth'):
            record.truth_path = root / entry['truth']
        records.append(record)
    return sorted(records, key=lambda r: r.slide_id)
