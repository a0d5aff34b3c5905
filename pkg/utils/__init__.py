# -*- coding: utf-8 -*-
"""
utils 패키지
- 공통 유틸리티 모듈들
"""

from .file_utils import FileUtils
from .json_utils import JSONUtils
from .logger_utils import LoggerUtils, log_execution_time
from .system_utils import SystemUtils

__all__ = [
    'FileUtils',
    'JSONUtils',
    'LoggerUtils',
    'SystemUtils',
    'log_execution_time',
]
