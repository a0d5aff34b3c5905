# -*- coding: utf-8 -*-
"""
file_utils.py
- 파일 처리 관련 공통 유틸리티
"""

import hashlib
from pathlib import Path
from typing import Union


class FileUtils:
    """파일 처리 관련 유틸리티 클래스"""

    @staticmethod
    def sha256_file(file_path: Union[str, Path], chunk_size: int = 1 << 20) -> str:
        """
        파일 내용의 sha256 해시를 반환합니다.

        Args:
            file_path: 파일 경로
            chunk_size: 읽기 단위 (바이트)

        Returns:
            16진수 해시 문자열
        """
        digest = hashlib.sha256()
        with open(file_path, 'rb') as f:
            for block in iter(lambda: f.read(chunk_size), b''):
                digest.update(block)
        return digest.hexdigest()

    @staticmethod
    def relative_to(file_path: Union[str, Path], root: Union[str, Path]) -> str:
        """
        root 기준 상대 경로를 '/' 구분자로 반환합니다. root 밖이면 파일명만 씁니다.

        Args:
            file_path: 대상 경로
            root: 기준 디렉토리

        Returns:
            상대 경로 문자열
        """
        file_path = Path(file_path).resolve()
        root = Path(root).resolve()
        try:
            return file_path.relative_to(root).as_posix()
        except ValueError:
            return file_path.name

