# -*- coding: utf-8 -*-
"""
json_utils.py
- JSON 처리 관련 공통 유틸리티
- JSON 헤더 + 리틀엔디언 float64 블롭 직렬화
- 산출물 출처(provenance) 기록
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import DataError, DependencyError
from utils.file_utils import FileUtils

logger = logging.getLogger(__name__)

_BLOB_MAGIC = b"PHBLOB1\n"


def _to_builtin(value: Any) -> Any:
    """numpy 스칼라/배열을 JSON 직렬화 가능한 기본 타입으로 바꿉니다."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"JSON 직렬화 불가 타입: {type(value).__name__}")


def _atomic_write(file_path: Path, payload: bytes) -> None:
    """같은 디렉토리의 임시 파일에 쓴 뒤 대상 경로로 교체합니다."""
    temp_path = file_path.with_name(f".{file_path.name}.tmp")
    try:
        file_path.parent.mkdir(parents=True, exist_ok=True)
        temp_path.write_bytes(payload)
        temp_path.replace(file_path)
    except OSError as e:
        temp_path.unlink(missing_ok=True)
        logger.error(f"❌ 파일 저장 실패 {file_path}: {e}")
        raise DataError(f"파일 저장 실패 {file_path}: {e}")


class JSONUtils:
    """JSON 처리 관련 유틸리티 클래스"""

    @staticmethod
    def require_json(file_path: Union[str, Path], stage: Optional[str] = None) -> Any:
        """
        반드시 존재해야 하는 JSON 산출물을 로드합니다.

        Args:
            file_path: JSON 파일 경로
            stage: 요청한 단계 이름 (오류 메시지용)

        Returns:
            JSON 데이터

        Raises:
            DependencyError: 파일이 없는 경우
            DataError: 파싱 실패
        """
        file_path = Path(file_path)
        if not file_path.exists():
            raise DependencyError(str(file_path), stage)
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise DataError(f"JSON 파싱 실패 {file_path}: {e}", stage)

    @staticmethod
    def save_json(data: Any, file_path: Union[str, Path], encoding: str = 'utf-8',
                  indent: int = 2, ensure_ascii: bool = False, sort_keys: bool = False) -> Path:
        """
        데이터를 JSON 파일로 저장합니다.

        먼저 전체를 문자열로 직렬화한 뒤 임시 파일에 쓰고 제자리로 교체하므로
        실패해도 대상 경로에 잘린 파일이 남지 않습니다.

        Args:
            data: 저장할 데이터
            file_path: 저장할 파일 경로
            encoding: 파일 인코딩
            indent: 들여쓰기 크기
            ensure_ascii: ASCII 문자만 사용할지 여부
            sort_keys: 키 정렬 여부

        Returns:
            저장한 파일 경로

        Raises:
            DataError: 직렬화 또는 쓰기 실패
        """
        file_path = Path(file_path)
        try:
            text = json.dumps(data, ensure_ascii=ensure_ascii, indent=indent, sort_keys=sort_keys,
                              default=_to_builtin)
        except (TypeError, ValueError) as e:
            logger.error(f"❌ JSON 직렬화 실패 {file_path}: {e}")
            raise DataError(f"JSON 직렬화 실패 {file_path.name}: {e}")
        _atomic_write(file_path, (text + '\n').encode(encoding))
        return file_path

    @staticmethod
    def validate_json_structure(data: Dict[str, Any],
                                required_fields: List[str]) -> Tuple[bool, List[str]]:
        """
        JSON 데이터 구조를 검증합니다.

        Args:
            data: 검증할 JSON 데이터
            required_fields: 필수 필드 리스트

        Returns:
            (검증 성공 여부, 누락된 필드 리스트)
        """
        if not isinstance(data, dict):
            return False, ['데이터가 딕셔너리 형태가 아닙니다']

        missing_fields = [field for field in required_fields if field not in data]
        return len(missing_fields) == 0, missing_fields

    @staticmethod
    def save_blob(header: Dict[str, Any], arrays: Sequence[np.ndarray],
                  file_path: Union[str, Path]) -> None:
        """
        JSON 헤더와 float64 배열들을 하나의 파일로 저장합니다.

        헤더에는 각 배열의 shape가 'shapes'로 기록되며,
        데이터는 선언 순서대로 리틀엔디언 float64로 이어 붙입니다.

        Args:
            header: 헤더 메타데이터
            arrays: 저장할 배열 목록
            file_path: 출력 경로
        """
        file_path = Path(file_path)
        full_header = dict(header)
        full_header['shapes'] = [list(np.shape(a)) for a in arrays]
        header_bytes = json.dumps(full_header, sort_keys=True, separators=(',', ':')).encode('utf-8')
        body = b"".join(np.ascontiguousarray(array, dtype='<f8').tobytes() for array in arrays)
        _atomic_write(file_path, _BLOB_MAGIC + header_bytes + b"\n" + body)

    @staticmethod
    def load_blob(file_path: Union[str, Path]) -> Tuple[Dict[str, Any], List[np.ndarray]]:
        """
        save_blob으로 저장한 파일을 읽습니다.

        Args:
            file_path: 입력 경로

        Returns:
            (헤더, 배열 목록)

        Raises:
            DataError: 형식 오류 또는 데이터 길이 불일치
        """
        file_path = Path(file_path)
        with open(file_path, 'rb') as f:
            magic = f.read(len(_BLOB_MAGIC))
            if magic != _BLOB_MAGIC:
                raise DataError(f"블롭 매직이 올바르지 않습니다: {file_path}")
            header = json.loads(f.readline().decode('utf-8'))
            payload = f.read()

        arrays: List[np.ndarray] = []
        offset = 0
        for shape in header.get('shapes', []):
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 8
            if offset + nbytes > len(payload):
                raise DataError(f"블롭 데이터가 잘렸습니다: {file_path}")
            array = np.frombuffer(payload, dtype='<f8', count=count, offset=offset)
            arrays.append(array.astype(np.float64).reshape(shape))
            offset += nbytes
        if offset != len(payload):
            raise DataError(f"블롭 데이터 길이가 헤더와 다릅니다: {file_path}")
        return header, arrays

    @staticmethod
    def write_provenance(artifact: Union[str, Path], stage: str,
                         inputs: Sequence[Union[str, Path]],
                         config_digest: str, seed: int, tool_version: str,
                         root: Optional[Union[str, Path]] = None) -> Path:
        """
        산출물 옆에 출처 JSON(<파일>.provenance.json)을 기록합니다.

        타임스탬프는 넣지 않아 같은 입력이면 같은 바이트가 나옵니다.

        Args:
            artifact: 산출물 경로
            stage: 생성 단계
            inputs: 입력 파일 목록
            config_digest: 설정 해시
            seed: 시드
            tool_version: 도구 버전
            root: 경로를 상대화할 기준 디렉토리

        Returns:
            출처 파일 경로
        """
        artifact = Path(artifact)
        hashes = {}
        for item in sorted({Path(p) for p in inputs}, key=str):
            key = FileUtils.relative_to(item, root) if root else str(item)
            hashes[key] = FileUtils.sha256_file(item) if item.is_file() else None

        record = {
            'artifact': FileUtils.relative_to(artifact, root) if root else artifact.name,
            'stage': stage,
            'inputs': hashes,
            'config_hash': config_digest,
            'seed': seed,
            'tool_version': tool_version,
        }
        target = artifact.with_name(artifact.name + '.provenance.json')
        JSONUtils.save_json(record, target, sort_keys=True)
        return target
