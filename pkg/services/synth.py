"""
합성 코퍼스 생성 서비스
조직/종양/정상 핵/유사분열을 심은 결정적 합성 슬라이드와 주석, 정답 사이드카, 코퍼스 인덱스를 만듭니다
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage import draw, transform
from tqdm import tqdm

from core.errors import SynthError
from core.schemas import BLOB_ROUGHNESS, BLOB_SPREAD, SynthConfig
from services.raster import RasterImage, write_pyramid
from services.records import SPLIT_AUX, SPLIT_EVAL, SlideRecord, points_in_polygons, polygons_mask, write_annotations
from utils.json_utils import JSONUtils
from utils.system_utils import SystemUtils

logger = logging.getLogger(__name__)

# RGB 기본색
BACKGROUND_RGB = (242.0, 226.0, 236.0)
TISSUE_RGB = (228.0, 170.0, 200.0)
TUMOR_RGB = (205.0, 140.0, 185.0)
NUCLEUS_RGB = (120.0, 70.0, 150.0)
MITOSIS_RGB = (45.0, 25.0, 70.0)

# 밀도 단위: 10^4 px^2
DENSITY_UNIT = 1e4
# 종양 외곽과 조직 경계 사이 여유 (px)
EDGE_MARGIN = 2.0
_SPLIT_CODES = {SPLIT_EVAL: 0, SPLIT_AUX: 1}


@dataclass
class PlantedSlide:
    """한 장의 합성 결과 (좌표는 레벨 0)"""

    slide_id: str
    split: str
    image: RasterImage
    tissue: np.ndarray
    tumors: List[np.ndarray]
    annotated_tumors: List[np.ndarray]
    mitoses: np.ndarray
    density: float
    grade: int
    molecular_score: float

    def truth_dict(self) -> Dict[str, object]:
        return {
            'tissue': np.round(self.tissue, 3).tolist(),
            'tumors': [np.round(p, 3).tolist() for p in self.tumors],
            'mitoses': np.round(self.mitoses, 3).tolist(),
            'density': round(self.density, 9),
        }


# ==================== 기하 ====================
def blob_polygon(center: Tuple[float, float], radius: float, rng: np.random.Generator,
                 vertices: int = 64, roughness: float = BLOB_ROUGHNESS) -> np.ndarray:
    """낮은 차수 조화 성분으로 흔든 매끄러운 방사형 다각형 (x, y)."""
    theta = np.linspace(0.0, 2 * np.pi, vertices, endpoint=False)
    profile = np.ones(vertices)
    for harmonic in range(2, 5):
        profile += roughness / harmonic * rng.uniform(-1, 1) * np.cos(harmonic * theta + rng.uniform(0, 2 * np.pi))
    return np.stack([center[0] + radius * profile * np.cos(theta),
                     center[1] + radius * profile * np.sin(theta)], axis=1)


def grade_from_density(density: float, thresholds: Tuple[float, float]) -> int:
    """밀도의 3단계 구간화 (경계값은 위 등급)."""
    return int(np.searchsorted(np.asarray(thresholds), density, side='right'))


def _edge_distance(mask: np.ndarray) -> np.ndarray:
    return ndimage.distance_transform_edt(mask)


def _plant_tumors(size: int, tissue_mask: np.ndarray, config: SynthConfig,
                  rng: np.random.Generator) -> List[np.ndarray]:
    """
    조직 안에 서로 겹치지 않는 종양을 심습니다.
    중심은 남은 조직 경계까지의 거리가 종양 외곽 반경보다 큰 픽셀에서만 고릅니다.

    Raises:
        SynthError: 첫 종양조차 들어갈 자리가 없거나 재시도 한도를 넘은 경우
    """
    count = int(rng.integers(config.tumor_count[0], config.tumor_count[1] + 1))
    low, high = (fraction * size for fraction in config.tumor_radius_fraction)
    tumors: List[np.ndarray] = []
    occupied = np.zeros_like(tissue_mask)
    for _ in range(count):
        clearance = _edge_distance(tissue_mask & ~occupied)
        room = (float(clearance.max()) - EDGE_MARGIN) / (1 + BLOB_SPREAD)
        if room < low:
            if not tumors:
                raise SynthError(f"조직 안에 종양 자리가 없습니다 (여유 반경 {room:.1f}px < {low:.1f}px)", 'synth')
            logger.debug(f"종양 {len(tumors)}개에서 배치 중단 (남은 여유 반경 {room:.1f}px)")
            break
        for _attempt in range(config.max_attempts):
            radius = rng.uniform(low, min(high, room))
            rows, cols = np.nonzero(clearance >= radius * (1 + BLOB_SPREAD) + EDGE_MARGIN)
            pick = int(rng.integers(len(rows)))
            polygon = blob_polygon((float(cols[pick]), float(rows[pick])), radius, rng)
            mask = polygons_mask([polygon], tissue_mask.shape)
            if mask.any() and not np.any(mask & ~tissue_mask) and not np.any(mask & occupied):
                tumors.append(polygon)
                occupied |= ndimage.binary_dilation(mask, iterations=8)
                break
        else:
            raise SynthError(f"종양을 조직 안에 배치하지 못했습니다 (시도 {config.max_attempts}회)", 'synth')
    return tumors


def _mitosis_figure(center: Tuple[float, float], radius: float, shape: Tuple[int, int],
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """겹친 타원 2–3개로 만든 불규칙한 유사분열 모양 (행, 열) 픽셀."""
    rows, cols = [], []
    for _ in range(int(rng.integers(2, 4))):
        dx, dy = rng.normal(0.0, radius / 3.0, size=2)
        rr, cc = draw.ellipse(center[1] + dy, center[0] + dx, radius * rng.uniform(0.5, 1.0),
                              radius * rng.uniform(0.5, 1.0), shape=shape, rotation=rng.uniform(0, np.pi))
        rows.append(rr)
        cols.append(cc)
    pixels = np.unique(np.stack([np.concatenate(rows), np.concatenate(cols)], axis=1), axis=0)
    return pixels[:, 0], pixels[:, 1]


def _blend(canvas: np.ndarray, rr: np.ndarray, cc: np.ndarray, rgb: Tuple[float, float, float],
           alpha: float) -> None:
    canvas[rr, cc] = (1 - alpha) * canvas[rr, cc] + alpha * np.asarray(rgb, dtype=np.float32)


def _place_nuclei(canvas: np.ndarray, region: np.ndarray, density: float, radius_range: Tuple[float, float],
                  rng: np.random.Generator, keep_out: np.ndarray) -> None:
    area = float(region.sum())
    count = int(rng.poisson(density * area / DENSITY_UNIT))
    candidates = np.flatnonzero(region & ~keep_out)
    if count == 0 or len(candidates) == 0:
        return
    picks = rng.choice(candidates, size=min(count, len(candidates)), replace=False)
    shape = region.shape
    for flat in np.sort(picks):
        row, col = divmod(int(flat), shape[1])
        r_major = rng.uniform(*radius_range)
        rr, cc = draw.ellipse(row, col, r_major, r_major * rng.uniform(0.75, 1.0), shape=shape,
                              rotation=rng.uniform(0, np.pi))
        _blend(canvas, rr, cc, NUCLEUS_RGB, 0.85)


# ==================== 슬라이드 생성 ====================
def generate_slide(slide_id: str, split: str, index: int, config: SynthConfig) -> PlantedSlide:
    """
    (seed, split, index)에서 유도한 난수 흐름으로 슬라이드 한 장을 만듭니다.

    Args:
        slide_id: 슬라이드 ID
        split: 'eval' 또는 'aux'
        index: split 안 순번
        config: 합성 설정

    Returns:
        PlantedSlide

    Raises:
        SynthError: 종양을 조직 안에 배치할 수 없는 경우
    """
    rng = np.random.default_rng([config.seed, _SPLIT_CODES[split], index])
    size = config.level0_size
    shape = (size, size)

    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=shape).astype(np.float32), 3.0)
    canvas = np.empty(shape + (3,), dtype=np.float32)
    canvas[:] = np.asarray(BACKGROUND_RGB, dtype=np.float32)
    canvas += 4.0 * texture[..., None]

    # 조직
    tissue_radius = rng.uniform(*config.tissue_radius_fraction) * size
    center = (size / 2 + rng.uniform(-0.05, 0.05) * size, size / 2 + rng.uniform(-0.05, 0.05) * size)
    tissue = blob_polygon(center, tissue_radius, rng)
    tissue_mask = polygons_mask([tissue], shape)
    canvas[tissue_mask] = np.asarray(TISSUE_RGB, dtype=np.float32) + 8.0 * texture[tissue_mask][:, None]

    # 종양
    tumors = _plant_tumors(size, tissue_mask, config, rng)
    tumor_mask = polygons_mask(tumors, shape)
    canvas[tumor_mask] = np.asarray(TUMOR_RGB, dtype=np.float32) + 10.0 * texture[tumor_mask][:, None]
    tumor_area = float(tumor_mask.sum())

    # 유사분열 위치 (경계 가중)
    rate = rng.uniform(0.0, 2.0 * config.mitosis_rate)
    wanted = int(rng.poisson(rate * tumor_area / DENSITY_UNIT))
    edge = _edge_distance(tumor_mask)
    mean_radius = float(np.mean(config.tumor_radius_fraction)) * size
    weights = np.exp(-edge[tumor_mask] / (config.fringe_scale * mean_radius))
    weights /= weights.sum()
    tumor_flat = np.flatnonzero(tumor_mask)

    figures: List[Tuple[np.ndarray, np.ndarray]] = []
    mitoses: List[Tuple[float, float]] = []
    attempts = 0
    while len(mitoses) < wanted and attempts < config.max_attempts * max(wanted, 1):
        attempts += 1
        row, col = divmod(int(rng.choice(tumor_flat, p=weights)), size)
        if mitoses and np.min(np.hypot(*(np.asarray(mitoses) - (col, row)).T)) < config.mitosis_min_separation:
            continue
        rr, cc = _mitosis_figure((float(col), float(row)), rng.uniform(*config.mitosis_radius), shape, rng)
        if not np.all(tumor_mask[rr, cc]):
            continue
        centroid = (float(cc.mean()), float(rr.mean()))
        if not points_in_polygons(np.array([centroid]), tumors)[0]:
            continue
        figures.append((rr, cc))
        mitoses.append(centroid)

    # 정상 핵 (유사분열 주변 제외)
    keep_out = np.zeros(shape, dtype=bool)
    for rr, cc in figures:
        keep_out[rr, cc] = True
    if figures:
        margin = 2 * config.mitosis_radius[1] + 2 * config.nucleus_radius[1]
        keep_out = ndimage.distance_transform_edt(~keep_out) <= margin
    _place_nuclei(canvas, tissue_mask & ~tumor_mask, config.nuclei_density, config.nucleus_radius, rng, keep_out)
    _place_nuclei(canvas, tumor_mask, config.tumor_nuclei_density, config.nucleus_radius, rng, keep_out)
    for rr, cc in figures:
        _blend(canvas, rr, cc, MITOSIS_RGB, 0.95)

    # 염색 편차와 잡음
    cast = 1.0 + rng.uniform(-config.stain_cast, config.stain_cast, size=3).astype(np.float32)
    canvas *= cast
    canvas += rng.normal(0.0, config.noise, size=canvas.shape).astype(np.float32)
    image = RasterImage(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))

    density = len(mitoses) / (tumor_area / DENSITY_UNIT) if tumor_area else 0.0
    grade = grade_from_density(density, config.grade_thresholds)
    score = config.score_a * density + config.score_b + rng.normal(0.0, config.score_noise)

    annotated = tumors
    if split == SPLIT_AUX and len(tumors) > 1:
        keep = rng.uniform(size=len(tumors)) < config.aux_annotation_fraction
        keep[int(rng.integers(len(tumors)))] = True
        annotated = [p for p, k in zip(tumors, keep) if k]

    return PlantedSlide(slide_id, split, image, tissue, tumors, annotated,
                        np.asarray(mitoses, dtype=np.float64).reshape(-1, 2),
                        float(density), grade, float(score))


def build_levels(image: RasterImage, levels: Dict[str, int]) -> Dict[str, Tuple[RasterImage, int]]:
    """레벨 0에서 블록 평균으로 각 배율 이미지를 만듭니다."""
    out = {}
    for name, factor in levels.items():
        if factor == 1:
            out[name] = (image, 1)
            continue
        reduced = transform.downscale_local_mean(image.data.astype(np.float64), (factor, factor, 1))
        out[name] = (RasterImage(np.clip(np.rint(reduced), 0, 255).astype(np.uint8)), factor)
    return out


# ==================== 코퍼스 ====================
def slide_ids(config: SynthConfig) -> List[Tuple[str, str, int]]:
    """(slide_id, split, 순번) 목록."""
    ids = [(f"slide_{i:03d}", SPLIT_EVAL, i) for i in range(config.slide_count)]
    ids += [(f"aux_{i:03d}", SPLIT_AUX, i) for i in range(config.aux_slide_count)]
    return ids


def generate_corpus(config: SynthConfig, corpus_dir: Union[str, Path], jobs: int = 1,
                    show_progress: bool = False) -> List[SlideRecord]:
    """
    합성 코퍼스를 디스크에 씁니다. 슬라이드마다 피라미드, 주석, 정답 사이드카를 만들고 corpus.json 인덱스를 남깁니다.

    Args:
        config: 합성 설정
        corpus_dir: 출력 디렉토리
        jobs: 병렬 작업자 수
        show_progress: 진행 표시

    Returns:
        slide_id 순 SlideRecord 목록
    """
    corpus_dir = Path(corpus_dir)
    corpus_dir.mkdir(parents=True, exist_ok=True)
    ids = slide_ids(config)

    def build(item: Tuple[str, str, int]) -> Tuple[SlideRecord, Dict[str, str]]:
        slide_id, split, index = item
        planted = generate_slide(slide_id, split, index, config)
        directory = corpus_dir / slide_id
        manifest = write_pyramid(build_levels(planted.image, config.levels), directory, slide_id)
        record = SlideRecord(slide_id, manifest, planted.annotated_tumors, planted.mitoses, planted.grade,
                             round(planted.molecular_score, 9), split, directory / f"{slide_id}.truth.json")
        write_annotations(record, directory / f"{slide_id}.annotations.json")
        JSONUtils.save_json(planted.truth_dict(), record.truth_path)
        entry = {
            'id': slide_id,
            'split': split,
            'manifest': f"{slide_id}/{manifest.name}",
            'annotations': f"{slide_id}/{slide_id}.annotations.json",
            'truth': f"{slide_id}/{slide_id}.truth.json",
        }
        return record, entry

    results = []
    with tqdm(total=len(ids), desc="합성 슬라이드", disable=not show_progress, leave=False) as bar:
        for start in range(0, len(ids), max(jobs, 1)):
            results += SystemUtils.parallel_map(build, ids[start:start + max(jobs, 1)], jobs)
            bar.update(len(ids[start:start + max(jobs, 1)]))

    index = {'slides': [entry for _, entry in sorted(results, key=lambda r: r[0].slide_id)]}
    JSONUtils.save_json(index, corpus_dir / 'corpus.json')
    records = sorted((record for record, _ in results), key=lambda r: r.slide_id)
    grades = np.bincount([r.grade for r in records], minlength=3)
    logger.info(f"✅ 합성 코퍼스 생성 완료: {len(records)}장 (등급 분포 {grades.tolist()})")
    return records
