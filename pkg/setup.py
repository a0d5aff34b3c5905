#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
setup.py
Prolif Histo v1.0 설정 및 초기화 스크립트
"""

import os
import subprocess
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from core.config import PROJECT_NAME, VERSION, ensure_directories


def create_directories(out_dir: str = 'out'):
    """기본 산출물 디렉토리들을 생성합니다."""
    ensure_directories(out_dir)
    print(f"✅ 산출물 디렉토리 생성: {out_dir}/")


def check_python_version():
    """Python 버전을 확인합니다."""
    if sys.version_info < (3, 9):
        print("❌ Python 3.9 이상이 필요합니다.")
        print(f"현재 버전: {sys.version}")
        sys.exit(1)
    else:
        print(f"✅ Python 버전 확인: {sys.version}")


def install_requirements():
    """의존성 패키지를 설치합니다."""
    try:
        print("📦 의존성 패키지 설치 중...")
        subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])
        print("✅ 의존성 패키지 설치 완료")
    except subprocess.CalledProcessError:
        print("❌ 의존성 패키지 설치 실패")
        sys.exit(1)


def main():
    """메인 설정 함수"""
    print(f"🔧 {PROJECT_NAME} v{VERSION} 설정을 시작합니다...")
    print("=" * 60)

    check_python_version()
    create_directories()
    install_requirements()

    print("\n🎉 설정이 완료되었습니다!")
    print("=" * 60)
    print("사용법:")
    print("  python main.py pipeline --config configs/desk.json   # 전체 파이프라인")
    print("  python main.py verify                                 # 검증 테스트")
    print("  python main.py --help                                 # 도움말")
    print("")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        # 빌드 백엔드(pip)가 setuptools 명령과 함께 호출한 경우: 메타데이터는 pyproject.toml
        from setuptools import setup
        setup()
    else:
        main()
