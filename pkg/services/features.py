"""
특징 추출 서비스
생물학적(패치 형태/강도 50개), 구조적(슬라이드 유사분열 분포 60개), 데이터 기반(k-means 단어 주머니) 특징
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import cdist
from skimage import measure
from sklearn.cluster import kmeans_plusplus

from core.errors import DataError, NoTissueError, ShapeError
from services import nn
from services.raster import BinaryMask, RasterImage, to_grayscale
from services.trainloop import Nucleus, crop_tensor, propose_nuclei

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# ==================== 스키마 ====================
_MITOSIS_PRIMITIVES = (
    'area', 'perimeter', 'eccentricity', 'solidity', 'extent', 'equivalent_diameter',
    'major_axis', 'minor_axis',
    'hu_1', 'hu_2', 'hu_3', 'hu_4', 'hu_5', 'hu_6', 'hu_7',
    'intensity_mean', 'intensity_std', 'intensity_min', 'intensity_max', 'intensity_deviation',
)

BIOLOGICAL_NAMES: Tuple[str, ...] = tuple(
    f"bio_{name}_{stat}" for name in _MITOSIS_PRIMITIVES for stat in ('mean', 'std')
) + (
    'bio_mitosis_count', 'bio_mitosis_density', 'bio_nn_distance_mean', 'bio_nn_distance_std',
    'bio_nuclei_count', 'bio_mitosis_nuclei_ratio', 'bio_patch_intensity_mean',
    'bio_patch_intensity_std', 'bio_nucleus_area_std', 'bio_valid',
)

ARCHITECTURAL_NAMES: Tuple[str, ...] = (
    'arch_total_count', 'arch_count_per_tissue', 'arch_tissue_area', 'arch_occupied_fraction',
    'arch_grid_mean', 'arch_grid_std', 'arch_grid_skewness', 'arch_grid_kurtosis', 'arch_grid_entropy',
    'arch_grid_max', 'arch_grid_cv', 'arch_quadrat_chi2', 'arch_quadrat_p', 'arch_dispersion_index',
    'arch_nn_mean', 'arch_nn_std', 'arch_nn_min', 'arch_nn_max', 'arch_nn_median', 'arch_clark_evans',
    'arch_ripley_k_1', 'arch_ripley_k_2', 'arch_ripley_k_3',
    'arch_ripley_l_1', 'arch_ripley_l_2', 'arch_ripley_l_3',
    'arch_row_mean', 'arch_row_std', 'arch_row_skewness', 'arch_row_kurtosis',
    'arch_col_mean', 'arch_col_std', 'arch_col_skewness', 'arch_col_kurtosis',
    'arch_row_entropy', 'arch_col_entropy',
    'arch_inertia_major', 'arch_inertia_minor', 'arch_inertia_anisotropy',
    'arch_centroid_offset_x', 'arch_centroid_offset_y', 'arch_centroid_offset_radius',
    'arch_spread_radius', 'arch_hull_fraction', 'arch_tissue_aspect', 'arch_grid_gini',
    'arch_grid_p50', 'arch_grid_p75', 'arch_grid_p90', 'arch_hotspot_share', 'arch_hotspot_cells',
    'arch_pair_fraction_1', 'arch_pair_fraction_2', 'arch_pair_fraction_3',
    'arch_tissue_occupied_fraction', 'arch_tissue_cell_fraction',
    'arch_valid_moments', 'arch_valid_nn', 'arch_valid_inertia', 'arch_valid_count',
)

assert len(BIOLOGICAL_NAMES) == 50, len(BIOLOGICAL_NAMES)
assert len(ARCHITECTURAL_NAMES) == 60, len(ARCHITECTURAL_NAMES)

# 밀도 단위: 10^6 px^2
_AREA_UNIT = 1e6


def bof_names(bins: int = 200) -> Tuple[str, ...]:
    return tuple(f"bof_{i:03d}" for i in range(bins))


def cascade_names(width: int) -> Tuple[str, ...]:
    names: List[str] = []
    for kind in ('tumor', 'mitosis'):
        names += [f"cascade_{kind}_f{i:04d}" for i in range(width)]
        names += [f"cascade_{kind}_p{grade}" for grade in range(3)]
    return tuple(names)


def feature_names(bins: int = 200, cascade_width: int = 64) -> Tuple[str, ...]:
    """스키마 순서의 전체 특징 이름 (50 + 60 + bins + 2·(width+3))."""
    return BIOLOGICAL_NAMES + ARCHITECTURAL_NAMES + bof_names(bins) + cascade_names(cascade_width)


# ==================== 유사분열 인스턴스 ====================
@dataclass(frozen=True)
class MitosisInstance:
    """패치 안에서 검출된 유사분열 하나. centroid는 패치 좌표 (x, y)."""

    slide_id: str
    patch_id: int
    centroid: Tuple[float, float]
    mask: np.ndarray
    bbox: Tuple[int, int, int, int]

    def __post_init__(self):
        if not np.any(self.mask):
            raise DataError(f"{self.slide_id}/{self.patch_id}: 빈 유사분열 마스크")


def collect_mitosis_instances(slide_id: str, patch_id: int, patch: RasterImage,
                              points: Sequence[Tuple[float, float]], match_radius: float,
                              area_range: Tuple[int, int] = (20, 2000),
                              nuclei: Optional[List[Nucleus]] = None) -> List[MitosisInstance]:
    """
    검출점마다 반경 안 가장 가까운 (아직 쓰이지 않은) 핵 성분을 마스크로 붙입니다.

    Args:
        slide_id: 슬라이드 ID
        patch_id: 패치 번호
        patch: 40x 패치
        points: 패치 좌표 검출점 (x, y)
        match_radius: 핵 매칭 반경 (px)
        area_range: 핵 면적 범위
        nuclei: 미리 구한 핵 후보 (None이면 계산)

    Returns:
        MitosisInstance 목록 (매칭 핵이 없는 검출점은 제외)
    """
    if nuclei is None:
        nuclei = propose_nuclei(patch, area_range)
    if not nuclei or not len(points):
        return []
    centroids = np.array([n.centroid for n in nuclei])
    distances = cdist(np.asarray(points, dtype=np.float64).reshape(-1, 2), centroids)
    instances, used = [], set()
    for row in distances:
        index = int(np.argmin(row))
        if row[index] > match_radius or index in used:
            continue
        used.add(index)
        nucleus = nuclei[index]
        instances.append(MitosisInstance(slide_id, patch_id, nucleus.centroid, nucleus.mask, nucleus.bbox))
    return instances


def mitosis_deep_vectors(image: RasterImage, points: np.ndarray, trunk: nn.WeightStore,
                         crop: int = 63, length: int = 256) -> np.ndarray:
    """
    검출점마다 crop×crop 주변(밖은 0)을 몸통에 통과시킨 고정 길이 심층 벡터.

    Args:
        image: 검출 레벨 이미지
        points: 레벨 좌표 (N,2) (x, y)
        trunk: 유사분열 검출기 몸통
        crop: 잘라낼 크기
        length: 벡터 길이

    Returns:
        (N, length) 행렬
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    vectors = np.zeros((len(points), length))
    for index, (x, y) in enumerate(points):
        tensor = crop_tensor(image, int(round(x)), int(round(y)), crop, crop // 2)
        vectors[index] = nn.deep_feature(trunk, tensor, length)
    return vectors


# ==================== 생물학적 특징 ====================
def mitosis_primitives(instance: MitosisInstance, gray: np.ndarray, tissue_mean: float) -> np.ndarray:
    """유사분열 하나의 형태/강도 기본값 20개 (_MITOSIS_PRIMITIVES 순서)."""
    r0, c0, r1, c1 = instance.bbox
    intensity = gray[r0:r1, c0:c1]
    props = measure.regionprops(instance.mask.astype(np.uint8), intensity_image=intensity)[0]
    pixels = intensity[instance.mask]
    return np.array([
        props.area, props.perimeter, props.eccentricity, props.solidity, props.extent,
        props.equivalent_diameter_area, props.axis_major_length, props.axis_minor_length,
        *props.moments_hu,
        pixels.mean(), pixels.std(), pixels.min(), pixels.max(), pixels.mean() - tissue_mean,
    ], dtype=np.float64)


def _nn_distances(points: np.ndarray) -> np.ndarray:
    if len(points) < 2:
        return np.zeros(0)
    distances, _ = cKDTree(points).query(points, k=2)
    return distances[:, 1]


def biological_features(patch: RasterImage, mitoses: Sequence[MitosisInstance],
                        nuclei: Optional[List[Nucleus]] = None) -> np.ndarray:
    """
    패치 하나의 생물학적 특징 50개 (BIOLOGICAL_NAMES 순서).

    Args:
        patch: 40x 패치
        mitoses: 패치 안 유사분열
        nuclei: 패치 전체 핵 후보 (None이면 계산)

    Returns:
        (50,) 벡터. 유사분열이 없으면 집계값은 0, bio_valid = 0
    """
    gray = to_grayscale(patch)
    if nuclei is None:
        nuclei = propose_nuclei(patch)
    tissue_mean = float(gray.mean())
    count = len(mitoses)

    if count:
        primitives = np.stack([mitosis_primitives(m, gray, tissue_mean) for m in mitoses])
        aggregates = np.stack([primitives.mean(axis=0), primitives.std(axis=0)], axis=1).reshape(-1)
        nn_dist = _nn_distances(np.array([m.centroid for m in mitoses]))
    else:
        aggregates = np.zeros(2 * len(_MITOSIS_PRIMITIVES))
        nn_dist = np.zeros(0)

    areas = np.array([n.area for n in nuclei], dtype=np.float64)
    patch_area = patch.height * patch.width
    values = np.concatenate([aggregates, [
        count,
        count / patch_area * _AREA_UNIT,
        nn_dist.mean() if len(nn_dist) else 0.0,
        nn_dist.std() if len(nn_dist) else 0.0,
        len(nuclei),
        count / len(nuclei) if len(nuclei) else 0.0,
        tissue_mean,
        float(gray.std()),
        areas.std() if len(areas) else 0.0,
        1.0 if count else 0.0,
    ]])
    return values


def aggregate_biological(per_patch: Sequence[np.ndarray]) -> np.ndarray:
    """패치별 생물학적 특징의 평균 (패치가 없으면 0)."""
    if not len(per_patch):
        return np.zeros(len(BIOLOGICAL_NAMES))
    return np.mean(np.stack(per_patch), axis=0)


# ==================== 구조적 특징 ====================
def _moments(values: np.ndarray) -> Tuple[float, float, float, float, bool]:
    """(평균, 표준편차, 왜도, 초과 첨도, 유효). 상수 배열이면 왜도/첨도 0."""
    mean, std = float(values.mean()), float(values.std())
    if std == 0.0:
        return mean, std, 0.0, 0.0, False
    return mean, std, float(stats.skew(values)), float(stats.kurtosis(values, fisher=True)), True


def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total <= 0:
        return 0.0
    return float(stats.entropy(counts.ravel() / total, base=2))


def _gini(values: np.ndarray) -> float:
    values = np.sort(values.ravel())
    total = values.sum()
    if total <= 0:
        return 0.0
    n = len(values)
    return float((2 * np.sum(np.arange(1, n + 1) * values) / (n * total)) - (n + 1) / n)


def _tissue_box(mask: BinaryMask) -> Tuple[float, float, float, float]:
    rows, cols = np.nonzero(mask.bits)
    if len(rows) == 0:
        raise NoTissueError("빈 조직 마스크로 구조적 특징을 계산할 수 없습니다", 'features')
    f = mask.downsample_factor
    return cols.min() * f, rows.min() * f, (cols.max() + 1) * f, (rows.max() + 1) * f


def architectural_features(points: np.ndarray, tissue_mask: BinaryMask, grid_size: int = 16,
                           ripley_radii: Sequence[float] = (0.05, 0.1, 0.2)) -> np.ndarray:
    """
    슬라이드 전체 유사분열 점 분포의 구조적 특징 60개 (ARCHITECTURAL_NAMES 순서).

    Args:
        points: 레벨 0 좌표 (N,2) (x, y)
        tissue_mask: 조직 마스크
        grid_size: 조직 경계 상자 위 격자 크기 G
        ripley_radii: 조직 면적 제곱근 대비 반경 3개

    Returns:
        (60,) 벡터

    Raises:
        NoTissueError: 조직 마스크가 비어 있는 경우
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x0, y0, x1, y1 = _tissue_box(tissue_mask)
    width, height = x1 - x0, y1 - y0
    tissue_area = float(tissue_mask.area) * tissue_mask.downsample_factor ** 2
    n = len(points)
    g = grid_size

    # 격자 집계
    cols = np.clip(((points[:, 0] - x0) / width * g).astype(np.int64), 0, g - 1)
    rows = np.clip(((points[:, 1] - y0) / height * g).astype(np.int64), 0, g - 1)
    grid = np.zeros((g, g))
    np.add.at(grid, (rows, cols), 1.0)
    cells = grid.ravel()
    g_mean, g_std, g_skew, g_kurt, moments_ok = _moments(cells)
    occupied = float(np.count_nonzero(cells)) / cells.size

    if n:
        chi2 = float(np.sum((cells - g_mean) ** 2) / g_mean)
        chi2_p = float(stats.chi2.sf(chi2, cells.size - 1))
    else:
        chi2, chi2_p = 0.0, 1.0
    dispersion = g_std ** 2 / g_mean if g_mean > 0 else 0.0

    # 조직 격자 비율
    f = tissue_mask.downsample_factor
    t_rows, t_cols = np.nonzero(tissue_mask.bits)
    t_grid = np.zeros((g, g), dtype=bool)
    t_grid[np.clip(((t_rows * f - y0) / height * g).astype(np.int64), 0, g - 1),
           np.clip(((t_cols * f - x0) / width * g).astype(np.int64), 0, g - 1)] = True
    tissue_cells = int(t_grid.sum())
    tissue_occupied = float(np.count_nonzero(grid[t_grid])) / tissue_cells if tissue_cells else 0.0

    # 최근접 이웃
    nn_dist = _nn_distances(points)
    nn_ok = len(nn_dist) > 0
    if nn_ok:
        nn_stats = [nn_dist.mean(), nn_dist.std(), nn_dist.min(), nn_dist.max(), np.median(nn_dist)]
        expected = 0.5 / np.sqrt(n / tissue_area)
        clark_evans = float(nn_dist.mean() / expected)
    else:
        nn_stats = [0.0] * 5
        clark_evans = 0.0

    # Ripley K / L (가장자리 보정 없음)
    scale = np.sqrt(tissue_area)
    radii = [r * scale for r in ripley_radii]
    ripley_k, ripley_l, pair_fraction = [], [], []
    pair = cdist(points, points) if n >= 2 else np.zeros((0, 0))
    for radius in radii:
        if n >= 2:
            within = (pair <= radius) & ~np.eye(n, dtype=bool)
            k_value = tissue_area * within.sum() / (n * n)
            ripley_k.append(k_value / (np.pi * radius ** 2))
            ripley_l.append((np.sqrt(k_value / np.pi) - radius) / radius)
            pair_fraction.append(float(within.any(axis=1).mean()))
        else:
            ripley_k.append(0.0)
            ripley_l.append(0.0)
            pair_fraction.append(0.0)

    # 행/열 주변 분포
    row_profile, col_profile = grid.sum(axis=1), grid.sum(axis=0)
    row_m = _moments(row_profile)[:4]
    col_m = _moments(col_profile)[:4]

    # 관성 텐서
    inertia_ok = n >= 2
    diag = float(np.hypot(width, height))
    if n:
        centroid = points.mean(axis=0)
        offset_x = (centroid[0] - (x0 + x1) / 2) / width
        offset_y = (centroid[1] - (y0 + y1) / 2) / height
        spread = float(np.sqrt(np.mean(np.sum((points - centroid) ** 2, axis=1)))) / diag
    else:
        offset_x = offset_y = spread = 0.0
    if inertia_ok:
        eigen = np.sort(np.linalg.eigvalsh(np.cov(points.T, bias=True)))[::-1] / diag ** 2
        major, minor = float(eigen[0]), float(eigen[1])
        anisotropy = 1.0 - minor / major if major > 0 else 0.0
    else:
        major = minor = anisotropy = 0.0

    hull_fraction = 0.0
    if n >= 3:
        try:
            hull_fraction = float(ConvexHull(points).volume / tissue_area)
        except QhullError:
            hull_fraction = 0.0

    hotspot_share = float(cells.max() / n) if n else 0.0
    hotspot_cells = float(np.count_nonzero(cells > g_mean + 2 * g_std)) if moments_ok else 0.0

    values = np.array([
        n, n / tissue_area * _AREA_UNIT, tissue_area / _AREA_UNIT, occupied,
        g_mean, g_std, g_skew, g_kurt, _entropy(cells),
        cells.max(), g_std / g_mean if g_mean > 0 else 0.0, chi2, chi2_p, dispersion,
        *nn_stats, clark_evans,
        *ripley_k, *ripley_l,
        *row_m, *col_m,
        _entropy(row_profile), _entropy(col_profile),
        major, minor, anisotropy,
        offset_x, offset_y, float(np.hypot(offset_x, offset_y)),
        spread, hull_fraction, width / height, _gini(cells),
        *np.percentile(cells, [50, 75, 90]), hotspot_share, hotspot_cells,
        *pair_fraction,
        tissue_occupied, tissue_cells / cells.size,
        float(moments_ok), float(nn_ok), float(inertia_ok), float(n > 0),
    ], dtype=np.float64)
    if values.size != len(ARCHITECTURAL_NAMES):
        raise ShapeError(f"구조적 특징 개수 {values.size} ≠ {len(ARCHITECTURAL_NAMES)}")
    return values


# ==================== k-means ====================
@dataclass
class KMeansResult:
    """k-means 결과. inertia_history는 반복마다 기록한 관성."""

    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    inertia_history: List[float] = field(default_factory=list)
    iterations: int = 0


def _assign(vectors: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    distances = cdist(vectors, centroids, 'sqeuclidean')
    labels = np.argmin(distances, axis=1)
    return labels, distances[np.arange(len(vectors)), labels]


def kmeans(vectors: np.ndarray, k: int = 200, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """
    k-means++ 초기화 + Lloyd 반복. 할당이 변하지 않거나 max_iter에 도달하면 멈춥니다.

    빈 군집은 자기 중심에서 가장 먼 점으로 다시 심습니다. 점 수가 k보다 적으면 k를 점 수로 줄입니다.

    Args:
        vectors: (N,D)
        k: 군집 수
        seed: k-means++ 시드
        max_iter: 최대 반복

    Returns:
        KMeansResult

    Raises:
        DataError: 입력이 비었거나 k < 1
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or len(vectors) == 0:
        raise DataError("k-means 입력이 비어 있습니다", 'features')
    if k < 1:
        raise DataError(f"k는 1 이상이어야 합니다: {k}", 'features')
    k = min(k, len(vectors))

    centroids, _ = kmeans_plusplus(vectors, k, random_state=seed)
    centroids = centroids.astype(np.float64)
    labels, dist = _assign(vectors, centroids)
    history = [float(dist.sum())]
    iterations = 0

    for iterations in range(1, max_iter + 1):
        for cluster in range(k):
            members = labels == cluster
            if members.any():
                centroids[cluster] = vectors[members].mean(axis=0)
        # 갱신된 중심 기준 거리로 빈 군집 재시드
        dist = np.sum((vectors - centroids[labels]) ** 2, axis=1)
        for cluster in range(k):
            if not np.any(labels == cluster):
                far = int(np.argmax(dist))
                centroids[cluster] = vectors[far]
                labels[far] = cluster
                dist[far] = 0.0
        new_labels, dist = _assign(vectors, centroids)
        history.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

    return KMeansResult(centroids, labels, float(dist.sum()), history, iterations)


# ==================== 단어 주머니 ====================
@dataclass
class BagOfFeaturesModel:
    """학습 슬라이드 심층 벡터로 맞춘 코드북"""

    centroids: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    bins: int = 200
    seed: int = 0

    def transform(self, vectors: np.ndarray) -> np.ndarray:
        return (np.asarray(vectors, dtype=np.float64) - self.mean) / self.scale

    def assign(self, vectors: np.ndarray) -> np.ndarray:
        """가장 가까운 중심 번호."""
        vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, self.centroids.shape[1])
        if len(vectors) == 0:
            return np.zeros(0, dtype=np.int64)
        return _assign(self.transform(vectors), self.centroids)[0]

    def histogram(self, vectors: np.ndarray, normalize: bool = True) -> np.ndarray:
        """bins 길이 히스토그램 (정규화 시 합 1, 유사분열이 없으면 전부 0)."""
        counts = np.bincount(self.assign(vectors), minlength=self.bins).astype(np.float64)[:self.bins]
        total = counts.sum()
        if normalize and total > 0:
            counts /= total
        return counts

    def header(self) -> Dict[str, object]:
        return {'bins': self.bins, 'seed': self.seed, 'clusters': int(self.centroids.shape[0]),
                'dimension': int(self.centroids.shape[1])}

    def arrays(self) -> List[np.ndarray]:
        return [self.centroids, self.mean, self.scale]


def fit_bag_of_features(train_vectors: Dict[str, np.ndarray], bins: int = 200, seed: int = 0,
                        max_iter: int = 300, standardize: bool = True) -> BagOfFeaturesModel:
    """
    학습 슬라이드 벡터의 합집합으로 코드북을 맞춥니다 (평가 슬라이드는 할당만).

    Args:
        train_vectors: slide_id → (N_i, D) 심층 벡터
        bins: 히스토그램 길이 (군집 수)
        seed: 시드
        max_iter: k-means 최대 반복
        standardize: 학습 벡터 기준 z-점수 적용 여부

    Returns:
        BagOfFeaturesModel
    """
    stacked = [np.asarray(v, dtype=np.float64) for _, v in sorted(train_vectors.items()) if len(v)]
    if not stacked:
        raise DataError("코드북을 맞출 유사분열 심층 벡터가 없습니다", 'features')
    union = np.concatenate(stacked)
    if standardize:
        mean = union.mean(axis=0)
        scale = union.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean, scale = np.zeros(union.shape[1]), np.ones(union.shape[1])
    result = kmeans((union - mean) / scale, bins, seed, max_iter)
    logger.info(f"📊 코드북: 벡터 {len(union)}개, 군집 {len(result.centroids)}개, 관성 {result.inertia:.4f}")
    return BagOfFeaturesModel(result.centroids, mean, scale, bins, seed)


def bag_of_features(model: BagOfFeaturesModel, slide_vectors: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """슬라이드별 정규화 히스토그램."""
    return {slide_id: model.histogram(vectors) for slide_id, vectors in sorted(slide_vectors.items())}


def slide_histograms(train_vectors: Dict[str, np.ndarray], slide_vectors: Dict[str, np.ndarray],
                     bins: int = 200, seed: int = 0, max_iter: int = 300, standardize: bool = True
                     ) -> Tuple[Optional[BagOfFeaturesModel], Dict[str, np.ndarray]]:
    """
    학습 벡터로 코드북을 맞추고 slide_vectors의 히스토그램을 만듭니다.

    학습 쪽에 검출된 유사분열이 하나도 없으면 코드북 없이 모두 0 히스토그램을 돌려줍니다.

    Returns:
        (코드북 또는 None, slide_id → 히스토그램)
    """
    if not any(len(v) for v in train_vectors.values()):
        logger.warning("⚠️ 유사분열 심층 벡터가 없어 단어 주머니 특징을 0으로 둡니다")
        return None, {slide_id: np.zeros(bins) for slide_id in sorted(slide_vectors)}
    model = fit_bag_of_features(train_vectors, bins, seed, max_iter, standardize)
    return model, bag_of_features(model, slide_vectors)


# ==================== 조립 / 표준화 ====================
@dataclass(frozen=True)
class FeatureVector:
    """슬라이드 하나의 이름 붙은 특징 벡터"""

    slide_id: str
    names: Tuple[str, ...]
    values: np.ndarray
    schema_version: int = SCHEMA_VERSION

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


def assemble_features(slide_id: str, biological: np.ndarray, architectural: np.ndarray,
                      bof: np.ndarray, cascade: np.ndarray, bins: int = 200,
                      cascade_width: int = 64) -> FeatureVector:
    """
    네 블록을 스키마 순서로 이어 붙입니다. 비유한 값은 0으로 대체합니다.

    Raises:
        ShapeError: 블록 길이가 스키마와 다른 경우
    """
    names = feature_names(bins, cascade_width)
    blocks = [np.asarray(b, dtype=np.float64).reshape(-1) for b in (biological, architectural, bof, cascade)]
    expected = (len(BIOLOGICAL_NAMES), len(ARCHITECTURAL_NAMES), bins, 2 * (cascade_width + 3))
    for block, size, label in zip(blocks, expected, ('biological', 'architectural', 'bof', 'cascade')):
        if block.size != size:
            raise ShapeError(f"{slide_id}: {label} 블록 길이 {block.size} ≠ 스키마 {size}", 'features')
    values = np.concatenate(blocks)
    bad = ~np.isfinite(values)
    if bad.any():
        logger.warning(f"⚠️ {slide_id}: 비유한 특징 {int(bad.sum())}개를 0으로 대체")
        values = np.where(bad, 0.0, values)
    return FeatureVector(slide_id, names, values)


@dataclass(frozen=True)
class Standardizer:
    """학습 폴드에서 맞춘 z-점수 변환 (분산 0 특징은 중심화만)"""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, matrix: np.ndarray) -> 'Standardizer':
        matrix = np.asarray(matrix, dtype=np.float64)
        mean = matrix.mean(axis=0)
        scale = matrix.std(axis=0)
        return cls(mean, np.where(scale > 0, scale, 1.0))

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        return (np.asarray(matrix, dtype=np.float64) - self.mean) / self.scale


def feature_matrix(vectors: Sequence[FeatureVector]) -> Tuple[List[str], Tuple[str, ...], np.ndarray]:
    """(slide_id 목록, 이름, 행렬). 모든 벡터는 같은 스키마여야 합니다."""
    if not vectors:
        raise DataError("특징 벡터가 없습니다", 'features')
    names = vectors[0].names
    for vector in vectors:
        if vector.names != names or vector.schema_version != vectors[0].schema_version:
            raise ShapeError(f"{vector.slide_id}: 특징 스키마가 다릅니다", 'features')
    return [v.slide_id for v in vectors], names, np.stack([v.values for v in vectors])
