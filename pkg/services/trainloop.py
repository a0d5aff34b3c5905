"""
검출기 학습 서비스
1단계 데이터셋 구성 → 학습 → 95% 신뢰 양성 채굴(+병리 검토 보정) → 재초기화 후 재학습,
형태학 기반 핵 후보 추출, 캐스케이드 헤드 학습
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

from core.errors import DataError, OtsuError, TrainingError
from core.schemas import PipelineConfig
from services import nn
from services.heatmap import coverage_fraction, generate_heatmap
from services.preprocess import otsu_threshold, upsample_mask
from services.raster import BinaryMask, ImagePyramid, RasterImage, to_grayscale
from services.records import SlideRecord, points_in_polygons, polygons_mask
from utils.json_utils import JSONUtils
from utils.system_utils import SystemUtils

logger = logging.getLogger(__name__)

ANNOTATED = 'annotated'
RANDOM_NEGATIVE = 'random_negative'
MINED_POSITIVE = 'mined_positive'
PATHOLOGIST_CORRECTED = 'pathologist_corrected'
PROVENANCES = (ANNOTATED, RANDOM_NEGATIVE, MINED_POSITIVE, PATHOLOGIST_CORRECTED)

KIND_LEVELS = {'tumor': 'tumor_level', 'mitosis': 'mitosis_level'}
HEAD_MIN_CELLS = 8


# ==================== 데이터셋 ====================
@dataclass(frozen=True)
class PatchSample:
    """학습 패치 하나. (x, y)는 해당 레벨의 패치 중심 픽셀."""

    slide_id: str
    x: int
    y: int
    level: str
    label: int
    provenance: str

    @property
    def key(self) -> Tuple[str, str, int, int]:
        return self.slide_id, self.level, self.y, self.x

    def to_dict(self) -> Dict[str, object]:
        return {'slide': self.slide_id, 'x': self.x, 'y': self.y, 'level': self.level,
                'label': self.label, 'provenance': self.provenance}


@dataclass(frozen=True)
class PatchDataset:
    """중복 (좌표, 레벨) 없는 이진 라벨 패치 목록 (키 순 정렬)"""

    samples: Tuple[PatchSample, ...]
    seed: int = 0

    def __post_init__(self):
        ordered = tuple(sorted(self.samples, key=lambda s: s.key))
        keys = [s.key for s in ordered]
        if len(set(keys)) != len(keys):
            raise DataError("데이터셋에 중복된 (좌표, 레벨) 항목이 있습니다")
        for sample in ordered:
            if sample.label not in (0, 1):
                raise DataError(f"라벨은 0 또는 1이어야 합니다: {sample}")
            if sample.provenance not in PROVENANCES:
                raise DataError(f"알 수 없는 출처: {sample.provenance}")
        object.__setattr__(self, 'samples', ordered)

    def __len__(self) -> int:
        return len(self.samples)

    def keys(self) -> set:
        return {s.key for s in self.samples}

    @property
    def positives(self) -> int:
        return sum(1 for s in self.samples if s.label == 1)

    @property
    def negatives(self) -> int:
        return sum(1 for s in self.samples if s.label == 0)

    def positive_keys(self) -> set:
        return {s.key for s in self.samples if s.label == 1}

    def extend(self, samples: Iterable[PatchSample]) -> 'PatchDataset':
        """기존 키와 겹치지 않는 표본만 덧붙입니다."""
        existing = self.keys()
        added = []
        for sample in samples:
            if sample.key not in existing:
                existing.add(sample.key)
                added.append(sample)
        return PatchDataset(self.samples + tuple(added), self.seed)

    def summary(self) -> Dict[str, int]:
        counts = {name: 0 for name in PROVENANCES}
        for sample in self.samples:
            counts[sample.provenance] += 1
        return {'size': len(self), 'positives': self.positives, 'negatives': self.negatives, **counts}


# ==================== 핵 후보 ====================
@dataclass(frozen=True)
class Nucleus:
    """형태학적으로 찾은 핵 성분. centroid는 (x, y)."""

    centroid: Tuple[float, float]
    area: int
    bbox: Tuple[int, int, int, int]  # (min_row, min_col, max_row, max_col)
    mask: np.ndarray


def propose_nuclei(patch: RasterImage, area_range: Tuple[int, int] = (20, 2000),
                   region: Optional[np.ndarray] = None) -> List[Nucleus]:
    """
    회색조(0.299R+0.587G+0.114B) 반전 → Otsu → 면적 [min, max] 밖 성분 제거 → 중심/면적.

    Args:
        patch: 40x 3채널 패치
        area_range: 허용 면적 범위 (px, 양끝 포함)
        region: 주어지면 이 마스크 안 픽셀만으로 임계값을 구하고 후보도 제한합니다

    Returns:
        Nucleus 목록 (행 우선 순서)
    """
    inverted = np.rint(255.0 - to_grayscale(patch)).astype(np.int64)
    inverted = np.clip(inverted, 0, 255)
    pixels = inverted if region is None else inverted[region]
    histogram = np.bincount(pixels.ravel(), minlength=256)
    try:
        threshold = otsu_threshold(histogram)
    except OtsuError:
        return []

    candidates = inverted > threshold
    if region is not None:
        candidates &= region
    labels, _ = ndimage.label(candidates)
    nuclei = []
    for props in measure.regionprops(labels):
        if not area_range[0] <= props.area <= area_range[1]:
            continue
        row, col = props.centroid
        nuclei.append(Nucleus((float(col), float(row)), int(props.area), tuple(props.bbox),
                              props.image.copy()))
    return nuclei


def _nearest_match(points: np.ndarray, centroids: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    """각 점에 반경 안 가장 가까운 미사용 핵을 배정합니다. (점별 핵 인덱스 또는 −1, 사용된 핵)"""
    assigned = np.full(len(points), -1, dtype=np.int64)
    used = np.zeros(len(centroids), dtype=bool)
    if len(points) == 0 or len(centroids) == 0:
        return assigned, used
    distances = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
    for index in np.argsort(distances.min(axis=1), kind='stable'):
        order = np.argsort(distances[index], kind='stable')
        for candidate in order:
            if distances[index, candidate] > radius:
                break
            if not used[candidate]:
                assigned[index] = candidate
                used[candidate] = True
                break
    return assigned, used


# ==================== 슬라이드 문맥 ====================
@dataclass
class SlideContext:
    """학습에 필요한 슬라이드별 자료 (레벨 이미지, 조직 마스크, 핵 후보 캐시)"""

    record: SlideRecord
    tissue_mask: BinaryMask
    images: Dict[str, RasterImage] = field(default_factory=dict)
    nuclei: Optional[List[Nucleus]] = None
    _pyramid: Optional[ImagePyramid] = field(default=None, repr=False)

    def pyramid(self) -> ImagePyramid:
        if self._pyramid is None:
            self._pyramid = self.record.pyramid()
        return self._pyramid

    def image(self, level: str) -> RasterImage:
        if level not in self.images:
            self.images[level] = self.pyramid().read_level(level)
        return self.images[level]

    def level_factor(self, level: str) -> int:
        return self.pyramid().level_factor(level)

    def tissue_at(self, level: str) -> np.ndarray:
        """조직 마스크를 해당 레벨 해상도로 맞춥니다."""
        factor = self.level_factor(level)
        image = self.image(level)
        if self.tissue_mask.downsample_factor == factor:
            bits = self.tissue_mask.bits
        else:
            bits = upsample_mask(self.tissue_mask, factor)
        out = np.zeros((image.height, image.width), dtype=bool)
        h, w = min(bits.shape[0], image.height), min(bits.shape[1], image.width)
        out[:h, :w] = bits[:h, :w]
        return out

    def nuclei_40x(self, level: str, area_range: Tuple[int, int]) -> List[Nucleus]:
        if self.nuclei is None:
            self.nuclei = propose_nuclei(self.image(level), area_range, self.tissue_at(level))
        return self.nuclei


def _sample_indices(rng: np.random.Generator, available: int, wanted: int) -> np.ndarray:
    wanted = min(available, wanted)
    if wanted <= 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(available, size=wanted, replace=False))


def _cell_centers(shape: Tuple[int, int], stride: int) -> np.ndarray:
    rows, cols = shape[0] // stride, shape[1] // stride
    grid_r, grid_c = np.meshgrid(np.arange(rows), np.arange(cols), indexing='ij')
    return np.stack([(grid_c.ravel() + 0.5) * stride, (grid_r.ravel() + 0.5) * stride], axis=1)


def _tumor_samples(ctx: SlideContext, level: str, spec: nn.NetworkSpec, neg_ratio: float,
                   max_positives: int, coverage_threshold: float, rng: np.random.Generator) -> List[PatchSample]:
    record = ctx.record
    factor = ctx.level_factor(level)
    image = ctx.image(level)
    stride = spec.total_stride
    centers = _cell_centers((image.height, image.width), stride)
    inside = points_in_polygons(centers * factor, record.tumors)

    positives = np.flatnonzero(inside)
    if max_positives:
        positives = positives[_sample_indices(rng, len(positives), max_positives)]

    rows, cols = image.height // stride, image.width // stride
    coverage = coverage_fraction(ctx.tissue_mask, rows, cols, stride * factor).ravel()
    tumor_level = polygons_mask(record.tumors, (image.height, image.width), factor)
    half = spec.patch_size // 2
    # 패치 정사각형 안에 종양 픽셀이 하나라도 있으면 음성 후보에서 뺀다
    window = ndimage.maximum_filter(tumor_level.astype(np.uint8), size=2 * half + 1, mode='constant')
    cx = np.clip(centers[:, 0].astype(np.int64), 0, image.width - 1)
    cy = np.clip(centers[:, 1].astype(np.int64), 0, image.height - 1)
    negative_pool = np.flatnonzero((coverage >= coverage_threshold) & (window[cy, cx] == 0) & ~inside)
    negatives = negative_pool[_sample_indices(rng, len(negative_pool), int(round(neg_ratio * len(positives))))]

    samples = [PatchSample(record.slide_id, int(centers[i, 0]), int(centers[i, 1]), level, 1, ANNOTATED)
               for i in positives]
    samples += [PatchSample(record.slide_id, int(centers[i, 0]), int(centers[i, 1]), level, 0, RANDOM_NEGATIVE)
                for i in negatives]
    return samples


def _jitter(rng: np.random.Generator, count: int, stride: int) -> np.ndarray:
    """중심 셀 안에 원래 점이 남도록 하는 정수 (dx, dy) 오프셋 [−S/2+1, S/2−1]."""
    reach = max(stride // 2 - 1, 0)
    return rng.integers(-reach, reach + 1, size=(count, 2))


def _cell_clear_of(points: np.ndarray, centers: np.ndarray, stride: int) -> np.ndarray:
    """중앙 셀(한 변 stride, 여유 2px) 안에 주석점이 없는 중심인지 여부."""
    if len(points) == 0 or len(centers) == 0:
        return np.ones(len(centers), dtype=bool)
    distance, _ = cKDTree(points).query(centers, p=np.inf)
    return distance > stride / 2.0 + 2.0


def _mitosis_samples(ctx: SlideContext, level: str, stride: int, config: PipelineConfig,
                     neg_ratio: float, rng: np.random.Generator) -> List[PatchSample]:
    """
    유사분열 양성과 핵/배경 음성. 추론 격자에서는 유사분열이 셀 어디에나 놓이므로
    양성마다 셀 안에서 중심을 옮긴 복제를 더하고 음성도 같은 방식으로 옮깁니다.
    """
    train = config.train
    record = ctx.record
    factor = ctx.level_factor(level)
    nuclei = ctx.nuclei_40x(level, train.nuclei_area)
    centroids = np.array([n.centroid for n in nuclei], dtype=np.float64).reshape(-1, 2)
    points = record.mitoses / factor

    assigned, used = _nearest_match(points, centroids, train.match_radius)
    positive_xy = np.array([centroids[a] if a >= 0 else point for point, a in zip(points, assigned)],
                           dtype=np.float64).reshape(-1, 2)
    # 주석점과 반경 r 안에 있는 핵은 음성이 될 수 없다
    if len(points) and len(centroids):
        near = (np.linalg.norm(centroids[:, None, :] - points[None, :, :], axis=2) <= train.match_radius).any(axis=1)
    else:
        near = np.zeros(len(centroids), dtype=bool)
    pool = np.flatnonzero(~used & ~near)
    negatives = pool[_sample_indices(rng, len(pool), int(round(neg_ratio * len(positive_xy))))]
    negative_xy = centroids[negatives] + _jitter(rng, len(negatives), stride)

    image = ctx.image(level)
    cells = _cell_centers((image.height, image.width), stride)
    tissue = ctx.tissue_at(level)
    on_tissue = tissue[cells[:, 1].astype(np.int64), cells[:, 0].astype(np.int64)]
    background_pool = np.flatnonzero(on_tissue & _cell_clear_of(points, cells, stride))
    wanted = int(round(train.background_negatives * len(positive_xy)))
    background = background_pool[_sample_indices(rng, len(background_pool), wanted)]
    background_xy = cells[background] + _jitter(rng, len(background), stride)

    copies = train.mitosis_jitter_copies
    shifted = [positive_xy]
    if copies and len(positive_xy):
        shifted += [positive_xy + _jitter(rng, len(positive_xy), stride) for _ in range(copies)]

    samples = []
    seen = set()

    def add(xy: np.ndarray, label: int, provenance: str) -> None:
        for x, y in np.rint(xy).astype(np.int64):
            key = (int(x), int(y))
            if key not in seen:
                seen.add(key)
                samples.append(PatchSample(record.slide_id, key[0], key[1], level, label, provenance))

    for xy in shifted:
        add(xy, 1, ANNOTATED)
    for xy in (negative_xy, background_xy):
        add(xy[_cell_clear_of(points, xy, stride)], 0, RANDOM_NEGATIVE)
    return samples


def build_stage1_dataset(contexts: Sequence[SlideContext], kind: str, neg_ratio: float,
                         config: PipelineConfig, spec: Optional[nn.NetworkSpec] = None) -> PatchDataset:
    """
    주석 양성과 시드 고정 무작위 음성(양성의 neg_ratio배)으로 1단계 데이터셋을 만듭니다.

    Args:
        contexts: 슬라이드 문맥 목록
        kind: 'tumor' 또는 'mitosis'
        neg_ratio: 음성/양성 비율
        config: 파이프라인 설정
        spec: 검출기 구조 (None이면 설정으로 생성)

    Returns:
        PatchDataset

    Raises:
        DataError: 양성이 하나도 없는 경우
    """
    train = config.train
    spec = spec or nn.build_detector(kind, config.network.tumor_architecture, config.network.mitosis_width)
    level = getattr(config.heatmap, KIND_LEVELS[kind])
    samples: List[PatchSample] = []
    for offset, ctx in enumerate(sorted(contexts, key=lambda c: c.record.slide_id)):
        rng = np.random.default_rng([train.seed, offset])
        if kind == 'tumor':
            samples += _tumor_samples(ctx, level, spec, neg_ratio, train.max_positives_per_slide,
                                      config.heatmap.coverage_threshold, rng)
        else:
            samples += _mitosis_samples(ctx, level, spec.total_stride, config, neg_ratio, rng)

    dataset = PatchDataset(tuple(samples), train.seed)
    if dataset.positives == 0:
        raise DataError(f"{kind} 주석 양성 표본이 없습니다", 'train')
    logger.info(f"📊 1단계 {kind} 데이터셋: 양성 {dataset.positives}, 음성 {dataset.negatives}")
    return dataset


# ==================== 텐서 변환 ====================
def training_input_size(spec: nn.NetworkSpec, context_cells: int) -> int:
    return spec.patch_size + 2 * context_cells * spec.total_stride


def crop_tensor(image: RasterImage, cx: int, cy: int, size: int, lead: int) -> np.ndarray:
    """(cx, cy) 기준 좌상단 (cx − lead, cy − lead)에서 size 잘라내기 (밖은 0)."""
    return nn.image_to_tensor(image.crop(cx - lead, cy - lead, size, size, fill=0).data)


def dataset_tensors(dataset: PatchDataset, contexts: Dict[str, SlideContext], spec: nn.NetworkSpec,
                    context_cells: int, keys: Optional[set] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    표본을 (N,3,P,P) 입력과 중앙 셀만 라벨이 있는 (N,g,g) 라벨로 바꿉니다 (나머지는 255).

    Args:
        dataset: 데이터셋
        contexts: slide_id → 문맥
        spec: 검출기 구조
        context_cells: 중앙 셀 주변 문맥 셀 수
        keys: 포함할 키 (None이면 전체)

    Returns:
        (입력, 라벨)
    """
    size = training_input_size(spec, context_cells)
    grid = 2 * context_cells + 1
    lead = context_cells * spec.total_stride + spec.patch_size // 2
    selected = [s for s in dataset.samples if keys is None or s.key in keys]
    inputs = np.zeros((len(selected), 3, size, size))
    labels = np.full((len(selected), grid, grid), nn.IGNORE_LABEL, dtype=np.int64)
    for index, sample in enumerate(selected):
        image = contexts[sample.slide_id].image(sample.level)
        inputs[index] = crop_tensor(image, sample.x, sample.y, size, lead)
        labels[index, context_cells, context_cells] = sample.label
    return inputs, labels


def center_probabilities(store: nn.WeightStore, inputs: np.ndarray, context_cells: int,
                         batch: int = 64) -> np.ndarray:
    """학습 입력의 중앙 셀 양성 확률."""
    out = []
    for start in range(0, len(inputs), batch):
        probs = nn.predict_probs(store, inputs[start:start + batch])
        out.append(probs[:, 1, context_cells, context_cells])
    return np.concatenate(out) if out else np.zeros(0)


def split_validation(dataset: PatchDataset, fraction: float, seed: int) -> set:
    """검증용 키 집합 (두 단계에서 고정)."""
    count = int(round(fraction * len(dataset)))
    if count == 0:
        return set()
    rng = np.random.default_rng([seed, 1])
    picked = _sample_indices(rng, len(dataset), count)
    return {dataset.samples[i].key for i in picked}


# ==================== 2단계 채굴 ====================
def mine_stage2(store: nn.WeightStore, contexts: Sequence[SlideContext], dataset: PatchDataset,
                kind: str, config: PipelineConfig, tau: Optional[float] = None,
                jobs: int = 1) -> PatchDataset:
    """
    학습 슬라이드 히트맵에서 확률 > τ인 셀/핵을 mined_positive로 덧붙입니다.

    기존 항목은 그대로 두며, 이미 있는 (좌표, 레벨) 키는 라벨과 무관하게 건너뜁니다.

    Args:
        store: 1단계 검출기
        contexts: 학습 슬라이드 문맥
        dataset: 1단계 데이터셋
        kind: 'tumor' 또는 'mitosis'
        config: 파이프라인 설정
        tau: 채굴 신뢰도 (None이면 설정값)
        jobs: 병렬 작업자 수

    Returns:
        확장된 데이터셋 (입력의 상위집합)
    """
    tau = config.train.mining_confidence if tau is None else tau
    level = getattr(config.heatmap, KIND_LEVELS[kind])
    stride = store.spec.total_stride
    ordered = sorted(contexts, key=lambda c: c.record.slide_id)

    def mine(ctx: SlideContext) -> List[PatchSample]:
        pyramid = ctx.pyramid()
        heatmap = generate_heatmap(pyramid, level, store, ctx.tissue_mask, config.heatmap.mode,
                                   config.heatmap.tile_size, config.heatmap.coverage_threshold)
        if kind == 'tumor':
            rows, cols = np.nonzero(heatmap.probs > tau)
            return [PatchSample(ctx.record.slide_id, int((c + 0.5) * stride), int((r + 0.5) * stride),
                                level, 1, MINED_POSITIVE) for r, c in zip(rows, cols)]
        mined = []
        for nucleus in ctx.nuclei_40x(level, config.train.nuclei_area):
            x, y = int(round(nucleus.centroid[0])), int(round(nucleus.centroid[1]))
            row, col = min(y // stride, heatmap.height - 1), min(x // stride, heatmap.width - 1)
            if heatmap.probs[row, col] > tau:
                mined.append(PatchSample(ctx.record.slide_id, x, y, level, 1, MINED_POSITIVE))
        return mined

    added: List[PatchSample] = []
    for samples in SystemUtils.parallel_map(mine, ordered, jobs):
        added += samples
    result = dataset.extend(added)
    logger.info(f"⛏️ 2단계 채굴: {len(result) - len(dataset)}개 양성 추가 (τ={tau})")
    return result


def simulate_review(dataset: PatchDataset, contexts: Dict[str, SlideContext],
                    radius: float) -> List[Dict[str, object]]:
    """
    합성 정답을 병리 검토자로 삼아, 근처(반경 안)에 심은 유사분열이 없는 채굴 양성을 음성으로 고칩니다.

    Returns:
        보정 목록 [{slide, x, y, level, new_label}]
    """
    corrections = []
    for sample in dataset.samples:
        if sample.provenance != MINED_POSITIVE:
            continue
        ctx = contexts[sample.slide_id]
        truth = ctx.record.truth()['mitoses'] / ctx.level_factor(sample.level)
        near = len(truth) and np.min(np.linalg.norm(truth - [sample.x, sample.y], axis=1)) <= radius
        if not near:
            corrections.append({'slide': sample.slide_id, 'x': sample.x, 'y': sample.y,
                                'level': sample.level, 'new_label': 0})
    return corrections


def read_corrections(path: Union[str, Path]) -> List[Dict[str, object]]:
    data = JSONUtils.require_json(path, 'train')
    if not isinstance(data, list):
        raise DataError(f"보정 파일은 JSON 목록이어야 합니다: {path}", 'train')
    return data


def apply_corrections(dataset: PatchDataset, corrections: Sequence[Dict[str, object]]) -> PatchDataset:
    """
    보정 라벨을 반영합니다. annotated 항목은 절대 바꾸지 않고, 없는 키는 새로 덧붙입니다.
    """
    by_key = {s.key: s for s in dataset.samples}
    for item in corrections:
        key = (str(item['slide']), str(item['level']), int(item['y']), int(item['x']))
        label = int(item['new_label'])
        current = by_key.get(key)
        if current is not None and current.provenance == ANNOTATED:
            continue
        by_key[key] = PatchSample(key[0], key[3], key[2], key[1], label, PATHOLOGIST_CORRECTED)
    return PatchDataset(tuple(by_key.values()), dataset.seed)


# ==================== 학습 ====================
@dataclass
class StageReport:
    """단계별 학습 결과"""

    dataset: Dict[str, int]
    losses: List[float]
    validation_auc: Optional[float]

    def to_dict(self) -> Dict[str, object]:
        return {'dataset': self.dataset, 'losses': self.losses, 'validation_auc': self.validation_auc}


def _fit_stage(spec: nn.NetworkSpec, dataset: PatchDataset, contexts: Dict[str, SlideContext],
               validation: set, config: PipelineConfig, jobs: int,
               show_progress: bool) -> Tuple[nn.WeightStore, StageReport]:
    from services.predict import roc_auc

    train = config.train
    train_keys = dataset.keys() - validation
    inputs, labels = dataset_tensors(dataset, contexts, spec, train.context_cells, train_keys)
    store = nn.init_weights(spec, train.seed)
    store, history = nn.train_network(store, inputs, labels, train.epochs, train.batch_size, train.lr,
                                      train.momentum, train.weight_decay, train.seed,
                                      config.network.chunk_size, jobs, show_progress)

    auc = None
    if validation:
        val_inputs, val_labels = dataset_tensors(dataset, contexts, spec, train.context_cells, validation)
        truth = val_labels[:, train.context_cells, train.context_cells]
        if len(np.unique(truth)) == 2:
            auc = roc_auc(center_probabilities(store, val_inputs, train.context_cells), truth)[1]
    return store, StageReport(dataset.summary(), history.losses, auc)


def train_two_stage(contexts: Sequence[SlideContext], kind: str, config: PipelineConfig,
                    corrections: Optional[Sequence[Dict[str, object]]] = None, jobs: int = 1,
                    show_progress: bool = False
                    ) -> Tuple[nn.WeightStore, Dict[str, object], List[Dict[str, object]]]:
    """
    1단계 학습 → 채굴(+보정) → 같은 시드로 재초기화 후 정제 데이터로 재학습.

    Args:
        contexts: 학습 슬라이드 문맥
        kind: 'tumor' 또는 'mitosis'
        config: 파이프라인 설정
        corrections: 병리 검토 보정 (mitosis 전용)
        jobs: 병렬 작업자 수
        show_progress: 진행 표시

    Returns:
        (2단계 가중치, 학습 보고서, 반영된 보정 목록)
    """
    spec = nn.build_detector(kind, config.network.tumor_architecture, config.network.mitosis_width)
    by_id = {ctx.record.slide_id: ctx for ctx in contexts}

    stage1 = build_stage1_dataset(contexts, kind, config.train.neg_ratio, config, spec)
    validation = split_validation(stage1, config.train.validation_fraction, config.train.seed)
    store1, report1 = _fit_stage(spec, stage1, by_id, validation, config, jobs, show_progress)
    logger.info(f"✅ 1단계 학습 완료: 손실 {report1.losses[-1]:.4f}, 검증 AUC {report1.validation_auc}")

    stage2 = mine_stage2(store1, contexts, stage1, kind, config, jobs=jobs)
    applied = list(corrections or [])
    if kind == 'mitosis' and corrections is None and config.train.simulate_review:
        applied = simulate_review(stage2, by_id, config.train.review_radius)
    if applied:
        stage2 = apply_corrections(stage2, applied)
        logger.info(f"🩺 병리 검토 보정 {len(applied)}건 반영")

    if not stage1.positive_keys() <= stage2.positive_keys():
        raise TrainingError("2단계 양성 집합이 1단계 양성 집합을 포함하지 않습니다", 'train')

    store2, report2 = _fit_stage(spec, stage2, by_id, validation, config, jobs, show_progress)
    logger.info(f"✅ 2단계 학습 완료: 손실 {report2.losses[-1]:.4f}, 검증 AUC {report2.validation_auc}")

    report = {
        'kind': kind,
        'network': spec.name,
        'parameter_count': spec.parameter_count(),
        'seed': config.train.seed,
        'tau': config.train.mining_confidence,
        'validation_size': len(validation),
        'corrections': len(applied),
        'stage1': report1.to_dict(),
        'stage2': report2.to_dict(),
    }
    return store2, report, applied


# ==================== 캐스케이드 헤드 ====================
def cascade_centers(ctx: SlideContext, level: str, count: int, seed: int, stride: int = 16) -> List[Tuple[int, int]]:
    """
    캐스케이드 학습 패치 중심 (레벨 좌표). 종양 주석이 있으면 그 안에서, 없으면 조직에서 고릅니다.
    """
    factor = ctx.level_factor(level)
    image = ctx.image(level)
    tissue = ctx.tissue_at(level)
    centers = _cell_centers((image.height, image.width), stride)
    cx = centers[:, 0].astype(np.int64)
    cy = centers[:, 1].astype(np.int64)
    pool = np.flatnonzero(points_in_polygons(centers * factor, ctx.record.tumors))
    if len(pool) == 0:
        pool = np.flatnonzero(tissue[cy, cx])
    if len(pool) == 0:
        pool = np.arange(len(centers))
    rng = np.random.default_rng([seed, 2])
    picked = pool[_sample_indices(rng, len(pool), count)]
    return [(int(cx[i]), int(cy[i])) for i in picked]


def trunk_input(image: RasterImage, center: Tuple[int, int], patch: int,
                trunk: nn.NetworkSpec) -> np.ndarray:
    """
    패치 크기 + 몸통 context 만큼 실제 주변을 포함해 잘라냅니다.

    캐스케이드 헤드의 풀링 3회를 거치도록 몸통 출력이 최소 8×8이 되게 패치를 넓힙니다.
    """
    patch = max(patch, HEAD_MIN_CELLS * trunk.total_stride)
    context = trunk.context
    return crop_tensor(image, center[0], center[1], patch + context, patch // 2 + context // 2)


def train_cascade_heads(contexts: Sequence[SlideContext], detectors: Dict[str, nn.WeightStore],
                        config: PipelineConfig, jobs: int = 1,
                        show_progress: bool = False) -> Tuple[Dict[str, nn.WeightStore], Dict[str, object]]:
    """
    고정된 검출기 몸통 위에 3클래스(등급) 헤드를 학습합니다.

    Args:
        contexts: 등급이 있는 학습 슬라이드 문맥
        detectors: {'tumor': ..., 'mitosis': ...} 검출기 가중치
        config: 파이프라인 설정
        jobs: 병렬 작업자 수
        show_progress: 진행 표시

    Returns:
        ({'cascade_tumor': ..., 'cascade_mitosis': ...}, 보고서)
    """
    labelled = [ctx for ctx in sorted(contexts, key=lambda c: c.record.slide_id) if ctx.record.grade is not None]
    if not labelled:
        raise DataError("캐스케이드 학습에 등급이 있는 슬라이드가 없습니다", 'train')
    width = config.network.resolved_cascade_width
    heads: Dict[str, nn.WeightStore] = {}
    report: Dict[str, object] = {'width': width, 'slides': len(labelled)}

    for kind, store in sorted(detectors.items()):
        level = getattr(config.heatmap, KIND_LEVELS[kind])
        trunk = store.slice(nn.trunk_spec(store.spec))
        features, labels = [], []
        for offset, ctx in enumerate(labelled):
            image = ctx.image(level)
            patch = config.heatmap.patch_size // ctx.level_factor(level)
            for center in cascade_centers(ctx, level, config.train.cascade_patches_per_slide,
                                          config.train.seed + offset, store.spec.total_stride):
                features.append(nn.forward(trunk, trunk_input(image, center, patch, trunk.spec))[0])
                labels.append(ctx.record.grade)

        head_spec = nn.cascade_head(trunk.spec.output_channels, width, f"cascade_{kind}")
        head = nn.init_weights(head_spec, config.train.seed)
        head, history = nn.train_network(head, np.stack(features), np.array(labels).reshape(-1, 1, 1),
                                         config.train.cascade_epochs, config.train.batch_size,
                                         config.train.cascade_lr, config.train.momentum,
                                         config.train.weight_decay, config.train.seed,
                                         config.network.chunk_size, jobs, show_progress)
        heads[f"cascade_{kind}"] = head
        report[f"cascade_{kind}"] = {'patches': len(labels), 'losses': history.losses,
                                     'parameter_count': head_spec.parameter_count()}
        logger.info(f"✅ 캐스케이드 헤드 학습 완료: {kind} (패치 {len(labels)}개)")
    return heads, report
