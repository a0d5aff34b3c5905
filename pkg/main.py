#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
main.py
Prolif Histo v1.0 - 유방암 조직 영상 종양 증식도 평가 파이프라인
메인 실행 파일

사용법:
    python main.py pipeline --config configs/desk.json --seed 7   # 전체 파이프라인
    python main.py train --kind mitosis --out-dir out              # 단계별 실행
    python main.py verify                                          # 검증 테스트 실행
    python main.py --help                                          # 도움말 보기
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

# 프로젝트 루트를 Python 경로에 추가
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from core.config import EXIT_CODES, PROJECT_NAME, TESTS_DIR, VERSION, load_config
from core.errors import ConfigError, ProlifError
from core.pipeline_manager import PipelineManager


class JSONArgumentParser(argparse.ArgumentParser):
    """알 수 없는 플래그도 ConfigError(종료 코드 2)로 보내는 파서"""

    def error(self, message: str):
        raise ConfigError(f"명령줄 인수 오류: {message}", 'cli')


def build_parser() -> argparse.ArgumentParser:
    """명령줄 파서를 만듭니다."""
    common = JSONArgumentParser(add_help=False)
    common.add_argument('--config', '-c', type=Path, default=None, help='JSON 설정 파일 (기본값: 내장 기본값)')
    common.add_argument('--seed', type=int, default=None, help='난수 시드 (설정 파일보다 우선)')
    common.add_argument('--out-dir', '-o', type=Path, default=Path('out'), help='산출물 루트 (기본값: out)')
    common.add_argument('--jobs', '-j', type=int, default=None, help='최대 병렬 작업자 수')
    common.add_argument('--quiet', '-q', action='store_true', help='진행 표시 끄기')
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='로그 레벨 (기본값: INFO)')

    parser = JSONArgumentParser(
        description=f'{PROJECT_NAME} v{VERSION} - 유방암 조직 영상 종양 증식도 평가 파이프라인',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
사용 예시:
  python main.py pipeline --config configs/desk.json --seed 7
  python main.py train --kind tumor --out-dir out
  python main.py heatmap --mode sliding --out-dir out
  python main.py predict --task score --out-dir out

지원되는 단계:
  synth → normalize → mask → train(tumor, mitosis, cascade) → heatmap → features → predict → evaluate
        """
    )
    parser.add_argument('--version', '-v', action='version', version=f'{PROJECT_NAME} v{VERSION}')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    commands.add_parser('synth', parents=[common], help='합성 코퍼스 생성')
    commands.add_parser('normalize', parents=[common], help='염색 표준화')
    commands.add_parser('mask', parents=[common], help='조직 마스크 추출')
    train = commands.add_parser('train', parents=[common], help='검출기 / 캐스케이드 헤드 학습')
    train.add_argument('--kind', required=True, choices=['tumor', 'mitosis', 'cascade'])
    train.add_argument('--corrections', type=Path, default=None, help='병리 검토 보정 JSON (mitosis)')
    heatmap = commands.add_parser('heatmap', parents=[common], help='히트맵 생성')
    heatmap.add_argument('--mode', choices=['sliding', 'fcn'], default=None)
    commands.add_parser('features', parents=[common], help='특징 추출')
    predict = commands.add_parser('predict', parents=[common], help='교차 검증 예측')
    predict.add_argument('--task', required=True, choices=['grade', 'score'])
    commands.add_parser('evaluate', parents=[common], help='평가 지표 산출')
    pipeline = commands.add_parser('pipeline', parents=[common], help='전체 단계 실행')
    pipeline.add_argument('--corrections', type=Path, default=None, help='병리 검토 보정 JSON (mitosis)')
    verify = commands.add_parser('verify', parents=[common], help='검증 테스트 실행')
    verify.add_argument('--full', action='store_true', help='느린 종단 간 테스트 포함')
    return parser


def run_verify(full: bool) -> int:
    """tests/ 스위트를 실행하고 pytest 종료 코드를 돌려줍니다."""
    import pytest

    options = [str(TESTS_DIR), '-q']
    if not full:
        options += ['-m', 'not slow']
    return int(pytest.main(options))


def run_command(args: argparse.Namespace) -> int:
    """
    하위 명령을 실행합니다.

    Returns:
        종료 코드
    """
    if args.command == 'verify':
        return EXIT_CODES['ok'] if run_verify(args.full) == 0 else EXIT_CODES['failure']

    config = load_config(args.config, {'seed': args.seed, 'jobs': args.jobs})
    manager = PipelineManager(config, args.out_dir, args.command, args.log_level, args.quiet)

    if args.command == 'synth':
        manager.run_synth()
    elif args.command == 'normalize':
        manager.run_normalize()
    elif args.command == 'mask':
        manager.run_mask()
    elif args.command == 'train':
        manager.run_train(args.kind, args.corrections)
    elif args.command == 'heatmap':
        manager.run_heatmap(args.mode)
    elif args.command == 'features':
        manager.run_features()
    elif args.command == 'predict':
        manager.run_predict(args.task)
    elif args.command == 'evaluate':
        manager.run_evaluate()
    elif args.command == 'pipeline':
        manager.run_pipeline(args.corrections)
    return EXIT_CODES['ok']


def emit_error(payload: dict) -> None:
    sys.stderr.write(json.dumps(payload, ensure_ascii=False) + "\n")


def main(argv: Optional[List[str]] = None) -> int:
    """메인 실행 함수"""
    try:
        args = build_parser().parse_args(argv)
        return run_command(args)
    except ProlifError as e:
        emit_error(e.to_dict())
        return e.exit_code
    except KeyboardInterrupt:
        sys.stderr.write("\n⚠️ 사용자에 의해 프로그램이 중단되었습니다.\n")
        return EXIT_CODES['interrupted']
    except Exception as e:
        emit_error({'error': {'type': type(e).__name__, 'code': EXIT_CODES['failure'],
                              'message': str(e), 'stage': None}})
        return EXIT_CODES['failure']


if __name__ == "__main__":
    sys.exit(main())
