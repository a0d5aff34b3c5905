# -*- coding: utf-8 -*-
"""
pipeline_manager.py
- 통합 파이프라인 관리 시스템
- 합성 → 표준화 → 마스크 → 학습 → 히트맵 → 특징 → 예측 → 평가 단계를 관리하고 출처 기록을 남긴다
"""

import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from tqdm import tqdm

from core.config import (MODEL_FILES, PIPELINE_NAMES, PROJECT_NAME, RESULT_FILES, VERSION,
                         artifact_path, config_hash, ensure_directories)
from core.errors import DataError, DependencyError
from core.schemas import PipelineConfig
from services import features as feat
from services import heatmap as hm
from services import nn
from services import predict as pred
from services import preprocess, trainloop
from services.raster import read_mask, write_mask, write_ppm, write_pyramid
from services.records import SPLIT_AUX, SPLIT_EVAL, SlideRecord, load_corpus
from services.synth import generate_corpus
from utils import FileUtils, JSONUtils, LoggerUtils, SystemUtils, log_execution_time

logger = logging.getLogger(__name__)

# features.csv 단어 주머니 블록의 코드북 적합 범위
CODEBOOK_SCOPE = "all_eval_slides"


class PipelineManager:
    """통합 파이프라인 관리 클래스"""

    def __init__(self, config: PipelineConfig, out_dir: Path, stage: str = 'pipeline',
                 log_level: str = 'INFO', quiet: bool = False):
        """
        파이프라인 매니저 초기화

        Args:
            config: 검증된 파이프라인 설정
            out_dir: 산출물 루트 (--out-dir)
            stage: 로그 이름에 쓸 단계 이름
            log_level: 로그 레벨
            quiet: 진행 표시 끄기
        """
        self.config = config
        self.out_dir = Path(out_dir)
        self.jobs = config.jobs
        self.digest = config_hash(config)
        ensure_directories(self.out_dir)
        self.logger = LoggerUtils.setup_pipeline_logger(stage, artifact_path(self.out_dir, 'logs'), log_level)
        self.show_progress = not quiet and sys.stderr.isatty()
        self.start_time = time.time()
        self.completed: List[str] = []

        LoggerUtils.log_configuration(self.logger, {
            'project_name': PROJECT_NAME,
            'version': VERSION,
            'out_dir': str(self.out_dir),
            'seed': config.seed,
            'jobs': config.jobs,
            'config_hash': self.digest[:12],
        })

    # ==================== 공통 도우미 ====================
    def path(self, key: str) -> Path:
        return artifact_path(self.out_dir, key)

    def require(self, path: Path, stage: str, hint: str = '') -> Path:
        """선행 산출물이 없으면 DependencyError를 냅니다."""
        if not Path(path).exists():
            raise DependencyError(FileUtils.relative_to(path, self.out_dir), stage, hint)
        return Path(path)

    def provenance(self, artifact: Path, stage: str, inputs: Sequence[Path]) -> None:
        JSONUtils.write_provenance(artifact, stage, inputs, self.digest, self.config.seed, VERSION,
                                   root=self.out_dir)

    def banner(self, stage: str) -> None:
        self.logger.info("=" * 60)
        self.logger.info(f"🚀 {PIPELINE_NAMES.get(stage, stage)} 시작")
        self.logger.info("=" * 60)

    def corpus(self, stage: str, split: Optional[str] = None, normalized: bool = True) -> List[SlideRecord]:
        key = self.path('normalized') / 'corpus.json' if normalized else self.path('corpus_index')
        hint = "normalize 단계를 먼저 실행하세요" if normalized else "synth 단계를 먼저 실행하세요"
        self.require(key, stage, hint)
        return load_corpus(key, stage, split)

    def mask_path(self, slide_id: str) -> Path:
        return self.path('masks') / f"{slide_id}.pgm"

    def contexts(self, stage: str, split: str) -> List[trainloop.SlideContext]:
        contexts = []
        for record in self.corpus(stage, split):
            mask = read_mask(self.require(self.mask_path(record.slide_id), stage, "mask 단계를 먼저 실행하세요"))
            contexts.append(trainloop.SlideContext(record, mask))
        return contexts

    def load_model(self, key: str, stage: str) -> nn.WeightStore:
        path = self.require(self.path(key), stage, f"train 단계에서 {key} 모델을 먼저 학습하세요")
        return nn.WeightStore.load(path)

    # ==================== 0단계: 합성 ====================
    @log_execution_time(logger)
    def run_synth(self) -> List[SlideRecord]:
        """합성 코퍼스를 생성합니다."""
        self.banner('synth')
        records = generate_corpus(self.config.synth, self.path('corpus'), self.jobs, self.show_progress)
        index = self.path('corpus_index')
        inputs = [index.parent / r.slide_id / f"{r.slide_id}.annotations.json" for r in records]
        self.provenance(index, 'synth', inputs)
        self.completed.append('synth')
        return records

    # ==================== 1단계: 염색 표준화 ====================
    def _raw_mask(self, record: SlideRecord):
        cfg = self.config.preprocess
        return preprocess.extract_tissue_mask(record.pyramid(), cfg.mask_level, cfg.min_area,
                                              cfg.dilation_iterations, cfg.connectivity, cfg.plane)

    @log_execution_time(logger)
    def run_normalize(self) -> preprocess.StainProfile:
        """
        기준 슬라이드(또는 설정 앵커) 템플릿으로 모든 슬라이드를 표준화합니다.

        Returns:
            사용한 템플릿 프로파일
        """
        self.banner('normalize')
        cfg = self.config.preprocess
        records = self.corpus('normalize', normalized=False)
        if not records:
            raise DataError("코퍼스에 슬라이드가 없습니다", 'normalize')

        reference = None
        if cfg.template is None:
            aux = [r for r in records if r.split == SPLIT_AUX] or records
            ref = aux[0]
            ref_mask = self._raw_mask(ref)
            reference = preprocess.compute_stain_profile(ref.pyramid().read_level(cfg.mask_level),
                                                         ref_mask, cfg.percentiles)
            self.logger.info(f"🎨 기준 슬라이드 템플릿: {ref.slide_id}")
        template = preprocess.resolve_template(cfg.template, reference)

        out_root = self.path('normalized')
        corpus_root = self.path('corpus')

        def normalize(record: SlideRecord) -> Dict[str, Any]:
            images, source = preprocess.standardize_pyramid(record.pyramid(), template,
                                                            self._raw_mask(record), cfg.percentiles)
            manifest = write_pyramid(images, out_root / record.slide_id, record.slide_id)
            return {
                'id': record.slide_id,
                'split': record.split,
                'manifest': f"{record.slide_id}/{manifest.name}",
                'annotations': f"../corpus/{record.slide_id}/{record.slide_id}.annotations.json",
                'truth': f"../corpus/{record.slide_id}/{record.slide_id}.truth.json",
                'source_profile': source.to_dict(),
            }

        entries = SystemUtils.parallel_map(normalize, records, self.jobs)
        index_path = out_root / 'corpus.json'
        JSONUtils.save_json({'template': template.to_dict(), 'slides': entries}, index_path)
        self.provenance(index_path, 'normalize', [corpus_root / 'corpus.json'] +
                        [corpus_root / e['manifest'] for e in entries])
        self.logger.info(f"✅ 염색 표준화 완료: {len(entries)}장")
        self.completed.append('normalize')
        return template

    # ==================== 2단계: 조직 마스크 ====================
    @log_execution_time(logger)
    def run_mask(self) -> Dict[str, int]:
        """
        표준화된 슬라이드에서 조직 마스크를 추출합니다.

        Returns:
            slide_id → 마스크 면적
        """
        self.banner('mask')
        cfg = self.config.preprocess
        records = self.corpus('mask')

        def extract(record: SlideRecord) -> Tuple[str, int]:
            mask = preprocess.extract_tissue_mask(record.pyramid(), cfg.mask_level, cfg.min_area,
                                                  cfg.dilation_iterations, cfg.connectivity, cfg.plane)
            target = self.mask_path(record.slide_id)
            write_mask(mask, target, {'level': cfg.mask_level})
            self.provenance(target, 'mask', [record.pyramid_path])
            return record.slide_id, mask.area

        areas = dict(SystemUtils.parallel_map(extract, records, self.jobs))
        self.logger.info(f"✅ 조직 마스크 추출 완료: {len(areas)}장")
        self.completed.append('mask')
        return areas

    # ==================== 3단계: 학습 ====================
    @log_execution_time(logger)
    def run_train(self, kind: str, corrections_path: Optional[Path] = None) -> Dict[str, Any]:
        """
        보조 코퍼스로 검출기(tumor/mitosis) 또는 캐스케이드 헤드를 학습합니다.

        Args:
            kind: 'tumor', 'mitosis', 'cascade'
            corrections_path: 병리 검토 보정 JSON (mitosis 전용)

        Returns:
            학습 보고서
        """
        self.banner('train')
        contexts = self.contexts('train', SPLIT_AUX)
        if not contexts:
            raise DataError("보조(aux) 슬라이드가 없어 검출기를 학습할 수 없습니다", 'train')
        inputs = [self.path('normalized') / 'corpus.json'] + [self.mask_path(c.record.slide_id) for c in contexts]

        if kind == 'cascade':
            detectors = {name: self.load_model(name, 'train') for name in ('tumor', 'mitosis')}
            heads, report = trainloop.train_cascade_heads(contexts, detectors, self.config, self.jobs,
                                                          self.show_progress)
            for name, store in heads.items():
                store.save(self.path(name))
                self.provenance(self.path(name), 'train', inputs + [self.path('tumor'), self.path('mitosis')])
        else:
            corrections = None
            if corrections_path is not None:
                corrections = trainloop.read_corrections(self.require(Path(corrections_path), 'train'))
                inputs.append(Path(corrections_path))
            store, report, applied = trainloop.train_two_stage(contexts, kind, self.config, corrections,
                                                               self.jobs, self.show_progress)
            store.save(self.path(kind))
            self.provenance(self.path(kind), 'train', inputs)
            if kind == 'mitosis' and applied:
                target = self.path('reports') / 'corrections_mitosis.json'
                JSONUtils.save_json(applied, target)
                self.provenance(target, 'train', inputs)

        report_path = self.path('reports') / f"train_{kind}.json"
        JSONUtils.save_json(report, report_path)
        self.provenance(report_path, 'train', inputs)
        self.completed.append(f"train:{kind}")
        return report

    # ==================== 4단계: 히트맵 ====================
    def heatmap_path(self, slide_id: str, kind: str) -> Path:
        return self.path('heatmaps') / f"{slide_id}_{kind}.pgm"

    def detections_path(self, slide_id: str) -> Path:
        return self.path('heatmaps') / f"{slide_id}_detections.json"

    @staticmethod
    def tumor_gate(tumor: hm.Heatmap, threshold: float, dilation: int = 1) -> np.ndarray:
        """종양 셀 (dilation 칸 팽창, 0이면 그대로)."""
        cells = tumor.probs > threshold
        if dilation > 0:
            cells = ndimage.binary_dilation(cells, iterations=dilation)
        return cells

    def gate_mask(self, points: np.ndarray, tumor: hm.Heatmap,
                  patches: Sequence[hm.PatchCoord] = (), factor: int = 1) -> np.ndarray:
        """
        레벨 0 점마다 종양 게이트 통과 여부를 반환합니다.

        팽창한 종양 셀 또는 선택된 경계 패치(대상 레벨 좌표 × factor) 안에 있으면 통과합니다.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if not len(points):
            return np.zeros(0, dtype=bool)
        gate = self.tumor_gate(tumor, self.config.heatmap.tumor_threshold, self.config.heatmap.gate_dilation_cells)
        size = tumor.cell_size
        rows = np.clip((points[:, 1] // size).astype(np.int64), 0, tumor.height - 1)
        cols = np.clip((points[:, 0] // size).astype(np.int64), 0, tumor.width - 1)
        passed = gate[rows, cols]
        for patch in patches:
            x0, y0, extent = patch.x * factor, patch.y * factor, patch.size * factor
            passed |= ((points[:, 0] >= x0) & (points[:, 0] < x0 + extent)
                       & (points[:, 1] >= y0) & (points[:, 1] < y0 + extent))
        return passed

    def restrict_to_tumor(self, points: np.ndarray, tumor: hm.Heatmap,
                          patches: Sequence[hm.PatchCoord] = (), factor: int = 1) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return points[self.gate_mask(points, tumor, patches, factor)]

    @log_execution_time(logger)
    def run_heatmap(self, mode: Optional[str] = None) -> Dict[str, Any]:
        """
        평가 슬라이드마다 종양/유사분열 히트맵, 경계 패치, 유사분열 검출점을 만들고 검출 지표를 계산합니다.

        Args:
            mode: 'fcn' 또는 'sliding' (None이면 설정값)

        Returns:
            검출 지표
        """
        self.banner('heatmap')
        cfg = self.config.heatmap
        mode = mode or cfg.mode
        tumor_store = self.load_model('tumor', 'heatmap')
        mitosis_store = self.load_model('mitosis', 'heatmap')
        records = self.corpus('heatmap', SPLIT_EVAL)
        model_inputs = [self.path('tumor'), self.path('mitosis')]

        tumor_probs, tumor_truth = [], []
        detection_totals = {'true_positives': 0, 'predicted': 0, 'truth': 0, 'truth_in_gate': 0}
        for done, record in enumerate(tqdm(records, desc="히트맵", disable=not self.show_progress, leave=False), 1):
            pyramid = record.pyramid()
            mask = read_mask(self.require(self.mask_path(record.slide_id), 'heatmap', "mask 단계를 먼저 실행하세요"))
            inputs = [record.pyramid_path, self.mask_path(record.slide_id)] + model_inputs

            tumor = hm.generate_heatmap(pyramid, cfg.tumor_level, tumor_store, mask, mode, cfg.tile_size,
                                        cfg.coverage_threshold, self.jobs)
            mitosis = hm.generate_heatmap(pyramid, cfg.mitosis_level, mitosis_store, mask, mode, cfg.tile_size,
                                          cfg.coverage_threshold, self.jobs)
            for kind, heat, threshold in (('tumor', tumor, cfg.tumor_threshold),
                                          ('mitosis', mitosis, cfg.mitosis_threshold)):
                for written in hm.write_heatmap(heat, self.heatmap_path(record.slide_id, kind), threshold):
                    self.provenance(written, 'heatmap', inputs)
            level10 = pyramid.read_level(cfg.tumor_level)
            overlay = self.path('heatmaps') / f"{record.slide_id}_tumor_overlay.pgm"
            write_ppm(hm.heatmap_overlay(tumor, level10.width, level10.height), overlay)
            self.provenance(overlay, 'heatmap', inputs)

            regions = hm.extract_regions(tumor, cfg.tumor_threshold)
            mitosis_factor = pyramid.level_factor(cfg.mitosis_level)
            patches = hm.select_fringe_patches(regions, tumor, cfg.fringe_patch_count,
                                               cfg.patch_size // mitosis_factor, self.config.seed,
                                               mitosis_factor)
            points = hm.points_to_level0(hm.mitosis_points(mitosis, cfg.mitosis_threshold), mitosis)
            points = self.restrict_to_tumor(points, tumor, patches, mitosis_factor)

            detections = {
                'slide': record.slide_id,
                'mode': mode,
                'regions': [{'region_id': r.region_id, 'area': r.area, 'bbox': list(r.bbox)} for r in regions],
                'patches': [p.to_dict() for p in patches],
                'mitoses': np.round(points, 3).tolist(),
            }
            target = self.detections_path(record.slide_id)
            JSONUtils.save_json(detections, target)
            self.provenance(target, 'heatmap', inputs)

            truth = record.truth()
            cells = hm.cell_truth_mask(truth['tumors'], tumor)
            tumor_probs.append(tumor.probs.ravel())
            tumor_truth.append(cells.ravel())
            scores = hm.detection_scores(points, truth['mitoses'], cfg.match_radius_cells * mitosis.cell_size)
            for key in ('true_positives', 'predicted', 'truth'):
                detection_totals[key] += scores[key]
            detection_totals['truth_in_gate'] += int(self.gate_mask(truth['mitoses'], tumor, patches,
                                                                    mitosis_factor).sum())
            LoggerUtils.log_progress(self.logger, done, len(records), "히트맵")

        metrics = self._detection_metrics(tumor_probs, tumor_truth, detection_totals)
        target = self.path('detection_metrics')
        JSONUtils.save_json(metrics, target, sort_keys=True)
        self.provenance(target, 'heatmap', [self.detections_path(r.slide_id) for r in records])
        self.logger.info(f"📊 종양 히트맵 AUC {metrics['tumor_heatmap_auc']}, 유사분열 F1 {metrics['mitosis']['f1']:.3f}")
        self.completed.append('heatmap')
        return metrics

    @staticmethod
    def _detection_metrics(tumor_probs: List[np.ndarray], tumor_truth: List[np.ndarray],
                           totals: Dict[str, int]) -> Dict[str, Any]:
        auc_value = None
        if tumor_probs:
            probs, truth = np.concatenate(tumor_probs), np.concatenate(tumor_truth)
            if 0 < truth.sum() < truth.size:
                auc_value = pred.roc_auc(probs, truth)[1]
        tp, n_pred, n_truth = totals['true_positives'], totals['predicted'], totals['truth']
        if n_pred == 0 and n_truth == 0:
            precision = recall = 1.0
        else:
            precision = tp / n_pred if n_pred else 0.0
            recall = tp / n_truth if n_truth else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        # 게이트가 허용하는 재현율 상한
        gate_recall = totals.get('truth_in_gate', n_truth) / n_truth if n_truth else 1.0
        return {'tumor_heatmap_auc': auc_value,
                'mitosis': {'precision': precision, 'recall': recall, 'f1': f1,
                            'gate_recall': gate_recall, **totals}}

    # ==================== 5단계: 특징 ====================
    def _slide_features(self, record: SlideRecord, mitosis_trunk: nn.WeightStore,
                        heads: Dict[str, Tuple[nn.WeightStore, nn.WeightStore]]
                        ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(생물학적, 구조적, 캐스케이드, 심층 벡터) 블록."""
        cfg, fcfg, ncfg = self.config.heatmap, self.config.features, self.config.network
        pyramid = record.pyramid()
        mask = read_mask(self.mask_path(record.slide_id))
        detections = JSONUtils.require_json(self.require(self.detections_path(record.slide_id), 'features',
                                                          "heatmap 단계를 먼저 실행하세요"), 'features')
        points = np.asarray(detections['mitoses'], dtype=np.float64).reshape(-1, 2)
        mitosis_factor = pyramid.level_factor(cfg.mitosis_level)
        tumor_factor = pyramid.level_factor(cfg.tumor_level)
        image40 = pyramid.read_level(cfg.mitosis_level)
        image10 = pyramid.read_level(cfg.tumor_level)
        size = cfg.patch_size // mitosis_factor

        centers = [tuple(p['center']) for p in detections['patches']]
        if not centers:
            # 종양 영역이 없으면 종양 확률 최대 셀 하나를 대표 패치로 쓴다
            tumor = hm.read_heatmap(self.heatmap_path(record.slide_id, 'tumor'))
            row, col = np.unravel_index(int(np.argmax(tumor.probs)), tumor.probs.shape)
            x0, y0 = tumor.cell_center(int(row), int(col))
            centers = [(int(x0 // mitosis_factor), int(y0 // mitosis_factor))]

        level_points = points / mitosis_factor
        per_patch = []
        for patch_id, (cx, cy) in enumerate(centers):
            x, y = cx - size // 2, cy - size // 2
            patch = image40.crop(x, y, size, size)
            inside = (level_points[:, 0] >= x) & (level_points[:, 0] < x + size) & \
                     (level_points[:, 1] >= y) & (level_points[:, 1] < y + size)
            nuclei = trainloop.propose_nuclei(patch, self.config.train.nuclei_area)
            instances = feat.collect_mitosis_instances(record.slide_id, patch_id, patch,
                                                       level_points[inside] - (x, y), fcfg.mitosis_match_radius,
                                                       self.config.train.nuclei_area, nuclei)
            per_patch.append(feat.biological_features(patch, instances, nuclei))
        biological = feat.aggregate_biological(per_patch)
        architectural = feat.architectural_features(points, mask, fcfg.grid_size, fcfg.ripley_radii)

        cascade = []
        for kind, image, factor in (('tumor', image10, tumor_factor), ('mitosis', image40, mitosis_factor)):
            trunk, head = heads[kind]
            patch = cfg.patch_size // factor
            tensors = [trainloop.trunk_input(image, (int(cx * mitosis_factor // factor), int(cy * mitosis_factor // factor)),
                                             patch, trunk.spec) for cx, cy in centers]
            vector, probs = nn.cascade_features(trunk, head, tensors)
            cascade.append(np.concatenate([vector, probs]))

        deep = feat.mitosis_deep_vectors(image40, level_points, mitosis_trunk, ncfg.deep_crop,
                                         ncfg.resolved_deep_length)
        return biological, architectural, np.concatenate(cascade), deep

    @log_execution_time(logger)
    def run_features(self) -> pd.DataFrame:
        """
        평가 슬라이드 특징 벡터와 유사분열 심층 벡터를 만듭니다.

        features.csv의 단어 주머니 블록은 평가 슬라이드 전체로 맞춘 기술용 코드북을 쓰며,
        예측 단계는 폴드마다 학습 폴드로 코드북을 다시 맞춥니다.

        Returns:
            특징 표
        """
        self.banner('features')
        ncfg, fcfg = self.config.network, self.config.features
        records = self.corpus('features', SPLIT_EVAL)
        mitosis_store = self.load_model('mitosis', 'features')
        mitosis_trunk = mitosis_store.slice(nn.trunk_spec(mitosis_store.spec))
        heads = {}
        for kind in ('tumor', 'mitosis'):
            detector = self.load_model(kind, 'features')
            heads[kind] = (detector.slice(nn.trunk_spec(detector.spec)), self.load_model(f"cascade_{kind}", 'features'))

        blocks = SystemUtils.parallel_map(lambda r: self._slide_features(r, mitosis_trunk, heads), records, self.jobs)
        deep = {r.slide_id: b[3] for r, b in zip(records, blocks)}
        model, histograms = feat.slide_histograms(deep, deep, fcfg.bof_clusters, self.config.seed,
                                                  fcfg.kmeans_max_iter, fcfg.standardize_deep)

        vectors = [feat.assemble_features(r.slide_id, b[0], b[1], histograms[r.slide_id], b[2],
                                          fcfg.bof_clusters, ncfg.resolved_cascade_width)
                   for r, b in zip(records, blocks)]
        slide_ids, names, matrix = feat.feature_matrix(vectors)
        table = pd.DataFrame(matrix, columns=list(names))
        table.insert(0, 'slide', slide_ids)

        inputs = [self.detections_path(r.slide_id) for r in records] + \
                 [self.path(k) for k in MODEL_FILES] + [self.mask_path(r.slide_id) for r in records]
        csv_path = self.path('features_csv')
        table.to_csv(csv_path, index=False, float_format='%.10g', lineterminator='\n')
        JSONUtils.save_json({
            'schema_version': feat.SCHEMA_VERSION,
            'names': list(names),
            'blocks': {'biological': len(feat.BIOLOGICAL_NAMES), 'architectural': len(feat.ARCHITECTURAL_NAMES),
                       'bag_of_features': fcfg.bof_clusters, 'cascade': 2 * (ncfg.resolved_cascade_width + 3)},
            # 라벨을 쓰지 않는 비지도 코드북이며 predict는 폴드마다 학습 폴드로 다시 맞춤
            'codebook': {'fit_scope': CODEBOOK_SCOPE, 'fit_slides': len(slide_ids),
                         'written': model is not None, 'refit_per_fold': True},
            'slides': slide_ids,
            'rows': table.set_index('slide').round(10).to_dict(orient='index'),
        }, self.path('features_json'))
        JSONUtils.save_blob({'slides': slide_ids, 'length': ncfg.resolved_deep_length,
                             'counts': [int(len(deep[s])) for s in slide_ids]},
                            [deep[s].reshape(-1, ncfg.resolved_deep_length) for s in slide_ids],
                            self.path('deep_vectors'))
        targets = [csv_path, self.path('features_json'), self.path('deep_vectors')]
        if model is not None:
            codebook = self.path('features') / 'codebook.bin'
            JSONUtils.save_blob(model.header(), model.arrays(), codebook)
            targets.append(codebook)
        for target in targets:
            self.provenance(target, 'features', inputs)
        self.logger.info(f"✅ 특징 추출 완료: {len(slide_ids)}장 × {len(names)}개")
        self.completed.append('features')
        return table

    # ==================== 6단계: 예측 ====================
    def _load_features(self, stage: str) -> Tuple[pd.DataFrame, Dict[str, np.ndarray]]:
        table = pd.read_csv(self.require(self.path('features_csv'), stage, "features 단계를 먼저 실행하세요"))
        header, arrays = JSONUtils.load_blob(self.require(self.path('deep_vectors'), stage))
        deep = {slide: array.reshape(-1, header['length']) for slide, array in zip(header['slides'], arrays)}
        return table, deep

    @log_execution_time(logger)
    def run_predict(self, task: str) -> pred.MetricsReport:
        """
        층화 5겹 교차검증으로 등급(grade) 또는 분자 점수(score)를 예측합니다.

        Args:
            task: 'grade' 또는 'score'

        Returns:
            MetricsReport
        """
        self.banner('predict')
        pcfg, fcfg = self.config.predict, self.config.features
        table, deep = self._load_features('predict')
        records = {r.slide_id: r for r in self.corpus('predict', SPLIT_EVAL)}
        slide_ids = table['slide'].astype(str).tolist()
        missing = [s for s in slide_ids if s not in records]
        if missing:
            raise DataError(f"코퍼스에 없는 슬라이드: {missing[:5]}", 'predict')

        grades = np.array([records[s].grade for s in slide_ids], dtype=np.int64)
        scores = np.array([records[s].molecular_score for s in slide_ids], dtype=np.float64)
        names = [c for c in table.columns if c != 'slide']
        bof_columns = [i for i, name in enumerate(names) if name.startswith('bof_')]
        matrix = table[names].to_numpy(dtype=np.float64)
        seed = self.config.seed

        def fold_features(train: np.ndarray, test: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            _, histograms = feat.slide_histograms({slide_ids[i]: deep[slide_ids[i]] for i in train}, deep,
                                                  fcfg.bof_clusters, seed, fcfg.kmeans_max_iter,
                                                  fcfg.standardize_deep)
            refit = matrix.copy()
            for row, slide in enumerate(slide_ids):
                refit[row, bof_columns] = histograms[slide]
            return refit[train], refit[test]

        report = pred.cross_validate(slide_ids, grades if task == 'grade' else None,
                                     scores if task == 'score' else None, fold_features, pcfg.folds, seed,
                                     pcfg.classifier_lambda, pcfg.regressor_lambda, pcfg.max_iter, pcfg.tol,
                                     self.jobs)

        inputs = [self.path('features_csv'), self.path('deep_vectors'), self.path('normalized') / 'corpus.json']
        target = self.path('grade_predictions' if task == 'grade' else 'score_predictions')
        report.predictions.to_csv(target, index=False, float_format='%.10g', lineterminator='\n')
        self.provenance(target, 'predict', inputs)
        for name, points in report.roc_points.items():
            roc_path = self.path('reports') / f"roc_{name}.csv"
            points.to_csv(roc_path, index=False, float_format='%.10g', lineterminator='\n')
            self.provenance(roc_path, 'predict', inputs)
        metrics_path = self.path('reports') / f"metrics_{task}.json"
        JSONUtils.save_json(report.to_dict(), metrics_path, sort_keys=True)
        self.provenance(metrics_path, 'predict', inputs)
        self.completed.append(f"predict:{task}")
        return report

    # ==================== 7단계: 평가 ====================
    @log_execution_time(logger)
    def run_evaluate(self) -> Dict[str, Any]:
        """
        예측 CSV에서 지표를 다시 계산하고 바이오마커 순위를 매깁니다.

        Returns:
            지표 딕셔너리 (metrics.json 내용)
        """
        self.banner('evaluate')
        pcfg = self.config.predict
        grade_path, score_path = self.path('grade_predictions'), self.path('score_predictions')
        if not grade_path.exists() and not score_path.exists():
            raise DependencyError(FileUtils.relative_to(grade_path, self.out_dir), 'evaluate',
                                  "predict 단계를 먼저 실행하세요")

        metrics: Dict[str, Any] = {'seed': self.config.seed, 'folds': pcfg.folds}
        inputs = []
        if grade_path.exists():
            inputs.append(grade_path)
            frame = pd.read_csv(grade_path)
            grades = frame['grade'].to_numpy(dtype=np.int64)
            probs = frame[[f'prob_{g}' for g in pred.CLASSES]].to_numpy(dtype=np.float64)
            metrics['classification'] = pred.classification_metrics(frame['predicted_grade'].to_numpy(), grades)
            metrics['per_class_auc'] = {}
            for grade in pred.CLASSES:
                binary = (grades == grade).astype(np.int64)
                if 0 < binary.sum() < len(binary):
                    metrics['per_class_auc'][str(grade)] = pred.roc_auc(probs[:, grade], binary)[1]
            metrics['micro_auroc'] = pred.micro_average_auroc(probs, grades)[1]
        if score_path.exists():
            inputs.append(score_path)
            frame = pd.read_csv(score_path)
            metrics['regression'] = pred.correlations(frame['predicted_score'].to_numpy(),
                                                      frame['score'].to_numpy())

        table, _ = self._load_features('evaluate')
        records = {r.slide_id: r for r in self.corpus('evaluate', SPLIT_EVAL)}
        names = [c for c in table.columns if c != 'slide']
        scores = np.array([records[str(s)].molecular_score for s in table['slide']], dtype=np.float64)
        standardized = feat.Standardizer.fit(table[names].to_numpy()).transform(table[names].to_numpy())
        ranking = pred.biomarker_ranking(standardized, scores, names, pcfg.significance)
        biomarkers = self.path('biomarkers')
        ranking.to_csv(biomarkers, index=False, float_format='%.10g', lineterminator='\n')
        self.provenance(biomarkers, 'evaluate', inputs + [self.path('features_csv')])
        metrics['significant_biomarkers'] = ranking.loc[ranking['significant'], 'feature'].tolist()
        metrics['biomarker_codebook_scope'] = CODEBOOK_SCOPE

        if self.path('detection_metrics').exists():
            metrics['detection'] = JSONUtils.require_json(self.path('detection_metrics'))
            inputs.append(self.path('detection_metrics'))

        target = self.path('metrics')
        JSONUtils.save_json(metrics, target, sort_keys=True)
        self.provenance(target, 'evaluate', inputs)
        if 'classification' in metrics:
            c = metrics['classification']
            self.logger.info(f"📊 정확도 {c['accuracy']:.3f} (95% CI {c['accuracy_ci'][0]:.3f}–{c['accuracy_ci'][1]:.3f}), "
                             f"macro-F1 {c['macro_f1']:.3f}, micro AUROC {metrics['micro_auroc']:.3f}")
        if 'regression' in metrics:
            r = metrics['regression']
            self.logger.info(f"📊 MSE {r['mse']:.4f}, r {r['pearson_r']:.3f}, ρ {r['spearman_rho']:.3f}")
        self.completed.append('evaluate')
        return metrics

    # ==================== 전체 실행 / 보고서 ====================
    def run_pipeline(self, corrections_path: Optional[Path] = None) -> Dict[str, Any]:
        """모든 단계를 순서대로 실행합니다."""
        self.logger.info(f"🚀 {PROJECT_NAME} v{VERSION} 파이프라인 시작")
        LoggerUtils.log_system_info(self.logger, SystemUtils.get_system_info())
        self.run_synth()
        self.run_normalize()
        self.run_mask()
        self.run_train('tumor')
        self.run_train('mitosis', corrections_path)
        self.run_train('cascade')
        self.run_heatmap()
        self.run_features()
        self.run_predict('grade')
        self.run_predict('score')
        self.run_evaluate()
        report = self.generate_report()
        self.save_report(report)
        self.logger.info("=" * 60)
        self.logger.info(f"🎉 파이프라인 실행 완료! ({time.time() - self.start_time:.2f}초)")
        self.logger.info("=" * 60)
        return report

    def generate_report(self) -> Dict[str, Any]:
        """
        실행 보고서를 만듭니다. 시간 정보는 넣지 않아 같은 입력이면 같은 바이트가 나옵니다.

        Returns:
            {stages, config_hash, seed, artifacts: {상대 경로: sha256}}
        """
        artifacts = {}
        for key in list(RESULT_FILES) + list(MODEL_FILES):
            path = self.path(key)
            if path.exists() and key != 'run_report':
                artifacts[FileUtils.relative_to(path, self.out_dir)] = FileUtils.sha256_file(path)
        return {
            'project': PROJECT_NAME,
            'version': VERSION,
            'config_hash': self.digest,
            'seed': self.config.seed,
            'stages': list(self.completed),
            'artifacts': dict(sorted(artifacts.items())),
        }

    def save_report(self, report: Dict[str, Any]) -> Path:
        target = self.path('run_report')
        JSONUtils.save_json(report, target, sort_keys=True)
        self.logger.info(f"📋 보고서 저장 완료: {FileUtils.relative_to(target, self.out_dir)}")
        return target
