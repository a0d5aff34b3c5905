# -*- coding: utf-8 -*-
"""
errors.py
- 프로젝트 공통 예외 계층
- 각 예외는 CLI 종료 코드를 함께 가진다
"""

from typing import Any, Dict, Optional


class ProlifError(Exception):
    """모든 도메인 예외의 기본 클래스"""

    exit_code: int = 1

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def to_dict(self) -> Dict[str, Any]:
        """
        기계가 읽을 수 있는 오류 정보를 반환합니다.

        Returns:
            {"error": {...}} 형태의 딕셔너리
        """
        return {
            'error': {
                'type': type(self).__name__,
                'code': self.exit_code,
                'message': self.message,
                'stage': self.stage,
            }
        }


class ConfigError(ProlifError):
    """설정 파일/플래그 오류"""
    exit_code = 2


class DependencyError(ProlifError):
    """선행 단계 산출물 누락"""
    exit_code = 3

    def __init__(self, missing: str, stage: Optional[str] = None, hint: str = ""):
        message = f"선행 산출물이 없습니다: {missing}"
        if hint:
            message += f" ({hint})"
        super().__init__(message, stage)
        self.missing = missing


class NumericError(ProlifError):
    """수치 계산 실패 (비유한 값 등)"""
    exit_code = 4


class DataError(ProlifError):
    """입력 데이터 오류"""
    exit_code = 1


# ==================== 도메인별 세부 예외 ====================
class RasterFormatError(DataError):
    """PPM/PGM 형식 오류"""


class PyramidError(DataError):
    """피라미드 매니페스트 오류"""


class StainProfileError(DataError):
    """염색 프로파일 퇴화/불일치"""


class OtsuError(DataError):
    """Otsu 임계값 계산 불가 (히스토그램 퇴화)"""


class NoTissueError(DataError):
    """조직 영역을 찾지 못함"""


class ShapeError(DataError):
    """텐서/네트워크 형상 불일치"""


class TrainingError(NumericError):
    """학습 중 수치 오류"""


class MetricError(DataError):
    """평가 지표 계산 불가"""


class SynthError(DataError):
    """합성 데이터 생성 불가 (기하 조건 불충족)"""
