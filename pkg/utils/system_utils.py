# -*- coding: utf-8 -*-
"""
system_utils.py
- 시스템 관련 공통 유틸리티
- 작업 병렬화 (입력 순서 보존)
"""

import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterable, List, TypeVar

T = TypeVar('T')
R = TypeVar('R')


class SystemUtils:
    """시스템 관련 유틸리티 클래스"""

    @staticmethod
    def get_system_info() -> Dict[str, str]:
        """
        시스템 정보를 반환합니다.

        Returns:
            시스템 정보 딕셔너리
        """
        return {
            'system': platform.system(),
            'release': platform.release(),
            'machine': platform.machine(),
            'python_version': sys.version.split()[0],
            'working_directory': os.getcwd(),
            'cpu_count': str(SystemUtils.get_cpu_count()),
        }

    @staticmethod
    def get_cpu_count() -> int:
        """
        CPU 코어 수를 반환합니다.

        Returns:
            CPU 코어 수
        """
        return os.cpu_count() or 1

    @staticmethod
    def parallel_map(func: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
        """
        func를 items에 적용합니다. jobs > 1이면 스레드 풀을 사용합니다.

        결과는 항상 입력 순서대로 반환되므로 jobs 값과 무관하게 같은 결과가 나옵니다.
        numpy/scipy 연산은 GIL을 놓기 때문에 스레드로도 병렬 이득이 있습니다.

        Args:
            func: 적용할 함수
            items: 입력 목록
            jobs: 최대 작업자 수

        Returns:
            결과 리스트 (입력 순서)
        """
        items = list(items)
        if jobs <= 1 or len(items) <= 1:
            return [func(item) for item in items]

        with ThreadPoolExecutor(max_workers=min(jobs, len(items))) as executor:
            return list(executor.map(func, items))
