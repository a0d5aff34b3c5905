"""
히트맵 서비스
슬라이드 타일링, 검출기 추론 결과 이어붙이기, 종양 영역/경계 추출, 경계 패치 선택,
유사분열 국소 최대점 검출과 평가 도우미
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from core.errors import DataError, ShapeError
from services.nn import WeightStore, fcn_forward, image_to_tensor, sliding_forward, softmax_channels
from services.raster import BinaryMask, ImagePyramid, RasterImage, read_ppm, resize_bilinear, write_ppm
from services.records import polygons_mask
from utils.json_utils import JSONUtils
from utils.system_utils import SystemUtils

logger = logging.getLogger(__name__)

_CROSS = ndimage.generate_binary_structure(2, 1)
_SQUARE = ndimage.generate_binary_structure(2, 2)


# ==================== 도메인 타입 ====================
@dataclass(frozen=True)
class Heatmap:
    """셀 단위 확률 맵. downsample_factor는 원본 레벨 대비, level_factor는 레벨 0 대비."""

    probs: np.ndarray
    downsample_factor: int
    level: str
    level_factor: int = 1
    network: str = ''

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[0] < 1 or probs.shape[1] < 1:
            raise ShapeError(f"히트맵은 비어 있지 않은 2차원이어야 합니다: {probs.shape}")
        if np.any(~np.isfinite(probs)) or probs.min() < 0.0 or probs.max() > 1.0:
            raise DataError("히트맵 확률은 [0, 1] 범위의 유한값이어야 합니다")
        object.__setattr__(self, 'probs', probs)

    @property
    def height(self) -> int:
        return int(self.probs.shape[0])

    @property
    def width(self) -> int:
        return int(self.probs.shape[1])

    @property
    def cell_size(self) -> int:
        """셀 한 변의 레벨 0 픽셀 수."""
        return self.downsample_factor * self.level_factor

    def cell_center(self, row: int, col: int) -> Tuple[float, float]:
        """셀 중심의 레벨 0 (x, y) 좌표."""
        size = self.cell_size
        return (col + 0.5) * size, (row + 0.5) * size


@dataclass(frozen=True)
class TumorRegion:
    """4-연결 종양 성분"""

    region_id: int
    cells: np.ndarray   # (N, 2) (row, col)
    fringe: np.ndarray  # (M, 2) (row, col)
    bbox: Tuple[int, int, int, int]  # (min_row, min_col, max_row + 1, max_col + 1)

    @property
    def area(self) -> int:
        return int(len(self.cells))


@dataclass(frozen=True)
class PatchCoord:
    """선택된 패치 (대상 레벨 좌표)"""

    x: int
    y: int
    size: int
    center: Tuple[int, int]
    region_id: int
    cell: Tuple[int, int]

    def to_dict(self) -> Dict[str, object]:
        return {'x': self.x, 'y': self.y, 'size': self.size, 'center': list(self.center),
                'region_id': self.region_id, 'cell': list(self.cell)}


# ==================== 확률 맵 ====================
def _tile_starts(cells: int, step: int) -> List[int]:
    return list(range(0, cells, step))


def probability_map(image: RasterImage, store: WeightStore, mode: str = 'fcn',
                    tile_size: int = 1008, jobs: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    레벨 이미지 전체의 양성 클래스 확률 맵을 만듭니다.

    이미지를 context // 2만큼 안쪽으로 밀어 0 캔버스에 놓으므로 각 셀의 수용영역이
    셀 중심에 맞춰집니다. fcn 모드는 tile_size 타일(겹침 = RF − S)을, sliding 모드는
    셀마다 patch_size 잘라내기를 씁니다.

    Args:
        image: 3채널 래스터
        store: 2클래스 검출기 가중치
        mode: 'fcn' 또는 'sliding'
        tile_size: fcn 타일 크기 (stride의 배수)
        jobs: 타일 병렬 작업자 수

    Returns:
        (확률 맵, 셀별 기록 횟수)

    Raises:
        ShapeError: 클래스 수/타일 크기 불일치
    """
    spec = store.spec
    if spec.output_channels != 2:
        raise ShapeError(f"{spec.name}: 히트맵에는 2클래스 검출기가 필요합니다")
    stride, context = spec.total_stride, spec.context
    if tile_size % stride:
        raise ShapeError(f"타일 크기 {tile_size}가 stride {stride}의 배수가 아닙니다")

    rows = -(-image.height // stride)
    cols = -(-image.width // stride)
    offset = context // 2
    canvas = np.zeros((3, rows * stride + context, cols * stride + context))
    canvas[:, offset:offset + image.height, offset:offset + image.width] = image_to_tensor(image.data)

    logits = np.zeros((2, rows, cols))
    coverage = np.zeros((rows, cols), dtype=np.int64)

    if mode == 'sliding':
        logits[:] = sliding_forward(store, canvas, extended=True)[0]
        coverage += 1
    elif mode == 'fcn':
        tile_cells = tile_size // stride
        tiles = [(r, c) for r in _tile_starts(rows, tile_cells) for c in _tile_starts(cols, tile_cells)]

        def run_tile(origin: Tuple[int, int]) -> np.ndarray:
            r, c = origin
            extent = tile_size + context
            window = np.zeros((3, extent, extent))
            piece = canvas[:, r * stride:r * stride + extent, c * stride:c * stride + extent]
            window[:, :piece.shape[1], :piece.shape[2]] = piece
            return fcn_forward(store, window, extended=True)[0]

        for (r, c), tile_logits in zip(tiles, SystemUtils.parallel_map(run_tile, tiles, jobs)):
            r1, c1 = min(r + tile_cells, rows), min(c + tile_cells, cols)
            logits[:, r:r1, c:c1] = tile_logits[:, :r1 - r, :c1 - c]
            coverage[r:r1, c:c1] += 1
    else:
        raise ValueError(f"알 수 없는 히트맵 모드: {mode}")

    if not np.all(coverage == 1):
        raise ShapeError("이어붙이기 오류: 모든 셀이 정확히 한 번씩 기록되지 않았습니다")
    probs = softmax_channels(logits[None])[0, 1]
    return np.clip(probs, 0.0, 1.0), coverage


def coverage_fraction(mask: BinaryMask, rows: int, cols: int, cell_size: int) -> np.ndarray:
    """
    각 히트맵 셀(레벨 0 기준 한 변 cell_size)이 조직 마스크로 덮인 비율.
    """
    factor = mask.downsample_factor
    bits = mask.bits.astype(np.float64)
    if cell_size >= factor and cell_size % factor == 0:
        block = cell_size // factor
        padded = np.zeros((rows * block, cols * block))
        h, w = min(bits.shape[0], rows * block), min(bits.shape[1], cols * block)
        padded[:h, :w] = bits[:h, :w]
        return padded.reshape(rows, block, cols, block).mean(axis=(1, 3))
    if factor % cell_size == 0:
        repeat = factor // cell_size
        expanded = np.repeat(np.repeat(bits, repeat, axis=0), repeat, axis=1)
        out = np.zeros((rows, cols))
        h, w = min(expanded.shape[0], rows), min(expanded.shape[1], cols)
        out[:h, :w] = expanded[:h, :w]
        return out
    raise ShapeError(f"마스크 배수 {factor}와 셀 크기 {cell_size}가 정수배 관계가 아닙니다")


def generate_heatmap(pyramid: ImagePyramid, level_name: str, store: WeightStore,
                     tissue_mask: Optional[BinaryMask], mode: str = 'fcn', tile_size: int = 1008,
                     coverage_threshold: float = 0.5, jobs: int = 1) -> Heatmap:
    """
    슬라이드 레벨 전체 히트맵을 만들고 조직 비율이 기준 미만인 셀을 0으로 둡니다.

    Args:
        pyramid: 슬라이드 피라미드
        level_name: 처리 배율 ('10x' 또는 '40x')
        store: 검출기 가중치
        tissue_mask: 조직 마스크 (None이면 게이트 생략)
        mode: 'fcn' 또는 'sliding'
        tile_size: fcn 타일 크기
        coverage_threshold: 셀 조직 비율 기준
        jobs: 병렬 작업자 수

    Returns:
        Heatmap
    """
    image = pyramid.read_level(level_name)
    level_factor = pyramid.level_factor(level_name)
    probs, _ = probability_map(image, store, mode, tile_size, jobs)
    heatmap = Heatmap(probs, store.spec.total_stride, level_name, level_factor, store.spec.name)
    if tissue_mask is not None:
        fraction = coverage_fraction(tissue_mask, heatmap.height, heatmap.width, heatmap.cell_size)
        probs = np.where(fraction >= coverage_threshold, probs, 0.0)
        heatmap = Heatmap(probs, heatmap.downsample_factor, level_name, level_factor, store.spec.name)
    return heatmap


# ==================== 영역 / 패치 ====================
def extract_regions(heatmap: Heatmap, prob_threshold: float) -> List[TumorRegion]:
    """
    probs ≥ threshold 셀의 4-연결 성분을 면적 내림차순으로 반환합니다.

    경계(fringe)는 영역 밖(이미지 밖 포함) 4-이웃을 하나 이상 가진 셀입니다.

    Args:
        heatmap: 종양 히트맵
        prob_threshold: (0, 1) 임계값

    Returns:
        TumorRegion 목록
    """
    if not 0.0 < prob_threshold < 1.0:
        raise ValueError(f"임계값은 (0, 1) 범위여야 합니다: {prob_threshold}")
    labels, count = ndimage.label(heatmap.probs >= prob_threshold, structure=_CROSS)
    regions = []
    for region_id, bounds in enumerate(ndimage.find_objects(labels), start=1):
        if bounds is None:
            continue
        component = labels == region_id
        interior = ndimage.binary_erosion(component, structure=_CROSS, border_value=0)
        cells = np.argwhere(component)
        fringe = np.argwhere(component & ~interior)
        bbox = (bounds[0].start, bounds[1].start, bounds[0].stop, bounds[1].stop)
        regions.append(TumorRegion(region_id, cells, fringe, bbox))
    logger.debug(f"종양 영역 {count}개 추출")
    return sorted(regions, key=lambda region: -region.area)


def _farthest_point_order(points: np.ndarray, limit: int, rng: np.random.Generator) -> List[int]:
    """시드로 고른 시작점에서 최원점 샘플링한 인덱스 (동점은 작은 인덱스)."""
    if limit <= 0 or len(points) == 0:
        return []
    chosen = [int(rng.integers(len(points)))]
    nearest = np.linalg.norm(points - points[chosen[0]], axis=1)
    while len(chosen) < min(limit, len(points)):
        candidate = int(np.argmax(nearest))
        if nearest[candidate] <= 0.0:
            break
        chosen.append(candidate)
        nearest = np.minimum(nearest, np.linalg.norm(points - points[candidate], axis=1))
    return chosen


def select_fringe_patches(regions: Sequence[TumorRegion], heatmap: Heatmap, count: int = 50,
                          patch_size: int = 1008, seed: int = 0,
                          target_factor: int = 1) -> List[PatchCoord]:
    """
    큰 영역부터 경계 셀을 최원점 간격으로 골라 대상 레벨(40x) 패치 중심으로 씁니다.

    Args:
        regions: 면적 내림차순 영역 목록
        heatmap: 영역을 뽑은 히트맵
        count: 최대 패치 수
        patch_size: 대상 레벨 패치 한 변
        seed: 시작점 시드
        target_factor: 대상 레벨의 레벨 0 대비 배수

    Returns:
        중복 없는 PatchCoord 목록 (최대 count개)
    """
    rng = np.random.default_rng(seed)
    patches: List[PatchCoord] = []
    seen = set()
    for region in regions:
        remaining = count - len(patches)
        if remaining <= 0:
            break
        fringe = region.fringe[np.lexsort((region.fringe[:, 1], region.fringe[:, 0]))]
        for index in _farthest_point_order(fringe.astype(np.float64), remaining, rng):
            row, col = int(fringe[index, 0]), int(fringe[index, 1])
            x0, y0 = heatmap.cell_center(row, col)
            center = (int(np.floor(x0 / target_factor)), int(np.floor(y0 / target_factor)))
            if center in seen:
                continue
            seen.add(center)
            patches.append(PatchCoord(center[0] - patch_size // 2, center[1] - patch_size // 2,
                                      patch_size, center, region.region_id, (row, col)))
    return patches


def mitosis_points(heatmap: Heatmap, prob_threshold: float = 0.5) -> List[Tuple[int, int, float]]:
    """
    임계값을 넘는 8-이웃 국소 최대 셀. 평탄 구간은 사전순 최소 좌표 하나로 정합니다.

    같은 값의 8-연결 평탄 구간 전체가 더 높은 이웃에 닿지 않을 때만 최대로 인정합니다.

    Args:
        heatmap: 유사분열 히트맵
        prob_threshold: 확률 임계값

    Returns:
        (row, col, prob) 목록 (사전순)
    """
    probs = heatmap.probs
    neighborhood_max = ndimage.maximum_filter(probs, size=3, mode='constant', cval=-np.inf)
    local_max = probs >= neighborhood_max
    points = []
    for value in np.unique(probs[local_max & (probs > prob_threshold)]):
        equal = probs == value
        labels, _ = ndimage.label(equal, structure=_SQUARE)
        for plateau in np.unique(labels[local_max & equal]):
            cells = labels == plateau
            if np.any(cells & ~local_max):
                continue
            row, col = (int(v) for v in np.argwhere(cells)[0])
            points.append((row, col, float(value)))
    return sorted(points)


def points_to_level0(points: Sequence[Tuple[int, int, float]], heatmap: Heatmap,
                     origin: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """셀 좌표 점들을 레벨 0 (x, y)로 옮깁니다. origin은 히트맵 좌상단의 레벨 0 위치."""
    out = np.array([heatmap.cell_center(r, c) for r, c, _ in points], dtype=np.float64).reshape(-1, 2)
    return out + np.asarray(origin, dtype=np.float64)


# ==================== 평가 도우미 ====================
def cell_truth_mask(polygons: Sequence[np.ndarray], heatmap: Heatmap) -> np.ndarray:
    """셀 중심이 다각형 안에 있는 셀."""
    size = heatmap.cell_size
    shifted = [np.asarray(p, dtype=np.float64) - size / 2.0 for p in polygons]
    return polygons_mask(shifted, (heatmap.height, heatmap.width), size)


def detection_scores(predicted: np.ndarray, truth: np.ndarray, radius: float) -> Dict[str, float]:
    """
    거리순 탐욕 매칭으로 정밀도/재현율/F1을 계산합니다.

    Args:
        predicted: (N, 2) 검출점
        truth: (M, 2) 정답점
        radius: 매칭 반경

    Returns:
        {'precision', 'recall', 'f1', 'true_positives', 'predicted', 'truth'}
    """
    predicted = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    matched = 0
    if len(predicted) and len(truth):
        distances = np.linalg.norm(predicted[:, None, :] - truth[None, :, :], axis=2)
        pairs = np.argwhere(distances <= radius)
        order = np.lexsort((pairs[:, 1], pairs[:, 0], distances[pairs[:, 0], pairs[:, 1]]))
        used_p, used_t = set(), set()
        for p, t in pairs[order]:
            if p in used_p or t in used_t:
                continue
            used_p.add(p)
            used_t.add(t)
        matched = len(used_p)

    if len(predicted) == 0 and len(truth) == 0:
        precision = recall = 1.0
    else:
        precision = matched / len(predicted) if len(predicted) else 0.0
        recall = matched / len(truth) if len(truth) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {'precision': precision, 'recall': recall, 'f1': f1, 'true_positives': matched,
            'predicted': int(len(predicted)), 'truth': int(len(truth))}


# ==================== 입출력 ====================
def write_heatmap(heatmap: Heatmap, path: Union[str, Path], threshold: float) -> List[Path]:
    """
    히트맵을 PGM(prob×255 반올림)과 JSON 사이드카, float64 블롭으로 저장합니다.

    Returns:
        기록한 파일 경로 목록
    """
    path = Path(path)
    pixels = np.rint(heatmap.probs * 255.0).astype(np.uint8)
    write_ppm(RasterImage(pixels), path)
    meta = {'downsample_factor': heatmap.downsample_factor, 'level': heatmap.level,
            'level_factor': heatmap.level_factor, 'network': heatmap.network,
            'threshold': threshold}
    sidecar = path.with_suffix('.json')
    JSONUtils.save_json(meta, sidecar, sort_keys=True)
    blob = path.with_suffix('.bin')
    JSONUtils.save_blob(meta, [heatmap.probs], blob)
    return [path, sidecar, blob]


def heatmap_overlay(heatmap: Heatmap, width: int, height: int) -> RasterImage:
    """셀 확률을 레벨 이미지 크기로 이중선형 확대한 0~255 그레이 영상."""
    plane = resize_bilinear(heatmap.probs, width, height)
    return RasterImage(np.clip(np.rint(plane * 255.0), 0, 255).astype(np.uint8))


def read_heatmap(path: Union[str, Path]) -> Heatmap:
    """write_heatmap 결과를 읽습니다. 블롭이 있으면 전체 정밀도를 씁니다."""
    path = Path(path)
    blob = path.with_suffix('.bin')
    if blob.exists():
        meta, arrays = JSONUtils.load_blob(blob)
        probs = arrays[0]
    else:
        meta = JSONUtils.require_json(path.with_suffix('.json'))
        probs = read_ppm(path).plane(0).astype(np.float64) / 255.0
    return Heatmap(probs, int(meta['downsample_factor']), meta['level'],
                   int(meta.get('level_factor', 1)), meta.get('network', ''))
