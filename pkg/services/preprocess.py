"""
전처리 서비스
광학 밀도(OD) 백분위 기반 염색 표준화와 HSV Otsu 조직 마스크 추출
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from core.errors import NoTissueError, OtsuError, ShapeError, StainProfileError
from services.raster import BinaryMask, ImagePyramid, RasterImage, rgb_to_hsv

logger = logging.getLogger(__name__)

OD_MAX = float(np.log10(256.0))

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


# ==================== 염색 프로파일 ====================
@dataclass(frozen=True)
class StainProfile:
    """채널별 OD 하한/상한 앵커"""

    low: Tuple[float, float, float]
    high: Tuple[float, float, float]

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64)
        high = np.asarray(self.high, dtype=np.float64)
        if low.shape != (3,) or high.shape != (3,):
            raise StainProfileError(f"앵커는 채널당 하나씩 3개여야 합니다: {low.shape}, {high.shape}")
        if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high))):
            raise StainProfileError("앵커에 유한하지 않은 값이 있습니다")
        if np.any(low < 0) or np.any(high < 0):
            raise StainProfileError(f"앵커는 0 이상이어야 합니다: low={low}, high={high}")
        if np.any(low >= high):
            raise StainProfileError(f"퇴화된 염색 프로파일 (low ≥ high): low={low}, high={high}")
        object.__setattr__(self, 'low', tuple(float(v) for v in low))
        object.__setattr__(self, 'high', tuple(float(v) for v in high))

    def to_dict(self) -> Dict[str, list]:
        return {'low': list(self.low), 'high': list(self.high)}

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[float]]) -> 'StainProfile':
        return cls(low=tuple(data['low']), high=tuple(data['high']))


def optical_density(values: np.ndarray) -> np.ndarray:
    """OD = −log10((v + 1) / 256)"""
    return -np.log10((np.asarray(values, dtype=np.float64) + 1.0) / 256.0)


def od_to_value(od: np.ndarray) -> np.ndarray:
    """OD의 역변환 (반올림 전 실수값)."""
    return 256.0 * np.power(10.0, -np.asarray(od, dtype=np.float64)) - 1.0


def _mask_bits(mask: Union[BinaryMask, np.ndarray]) -> np.ndarray:
    return mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)


def compute_stain_profile(image: RasterImage, tissue_mask: Union[BinaryMask, np.ndarray],
                          percentiles: Tuple[float, float] = (1.0, 99.0)) -> StainProfile:
    """
    조직 픽셀만으로 채널별 OD 백분위 앵커를 계산합니다.

    Args:
        image: 3채널 래스터
        tissue_mask: 이미지와 같은 해상도의 마스크
        percentiles: (하한, 상한) 백분위

    Returns:
        StainProfile

    Raises:
        StainProfileError: 마스크가 비었거나 프로파일이 퇴화한 경우
    """
    bits = _mask_bits(tissue_mask)
    if image.channels != 3:
        raise ShapeError(f"염색 프로파일은 3채널 이미지가 필요합니다: {image.channels}")
    if bits.shape != (image.height, image.width):
        raise ShapeError(f"마스크 크기 {bits.shape}가 이미지 {(image.height, image.width)}와 다릅니다")
    if not bits.any():
        raise StainProfileError("조직 마스크가 비어 있어 염색 프로파일을 계산할 수 없습니다")

    od = optical_density(image.data[bits])
    low = np.percentile(od, percentiles[0], axis=0)
    high = np.percentile(od, percentiles[1], axis=0)
    return StainProfile(low=tuple(low), high=tuple(high))


def map_optical_density(od: np.ndarray, source: StainProfile, template: StainProfile) -> np.ndarray:
    """source 앵커를 template 앵커로 보내는 채널별 아핀 사상."""
    s_low, s_high = np.asarray(source.low), np.asarray(source.high)
    t_low, t_high = np.asarray(template.low), np.asarray(template.high)
    scale = (t_high - t_low) / (s_high - s_low)
    return t_low + (np.asarray(od, dtype=np.float64) - s_low) * scale


def standardize_stain(image: RasterImage, source: StainProfile,
                      template: StainProfile) -> RasterImage:
    """
    OD 공간 아핀 사상 후 역변환하고 [0, 255]로 자릅니다.

    Args:
        image: 3채널 래스터
        source: 입력 이미지 프로파일
        template: 목표 프로파일

    Returns:
        표준화된 래스터
    """
    if image.channels != 3:
        raise ShapeError(f"염색 표준화는 3채널 이미지가 필요합니다: {image.channels}")
    mapped = map_optical_density(optical_density(image.data), source, template)
    values = np.clip(np.rint(od_to_value(mapped)), 0, 255)
    return RasterImage(values.astype(np.uint8))


def resolve_template(anchors: Optional[Dict[str, Sequence[float]]],
                     reference: Optional[StainProfile]) -> StainProfile:
    """설정 앵커가 있으면 그것을, 없으면 기준 슬라이드 프로파일을 템플릿으로 씁니다."""
    if anchors is not None:
        return StainProfile.from_dict(anchors)
    if reference is None:
        raise StainProfileError("염색 템플릿이 없습니다 (설정 앵커도 기준 슬라이드도 없음)")
    return reference


# ==================== Otsu / 형태학 연산 ====================
def otsu_threshold(histogram: Sequence[int]) -> int:
    """
    클래스 간 분산을 최대로 하는 분할 t (≤t | >t)를 반환합니다.

    유리수 연산으로 비교하므로 동점이면 정확히 가장 작은 t가 선택됩니다.

    Args:
        histogram: 256개 구간 도수

    Returns:
        임계 구간 인덱스 (0~254)

    Raises:
        OtsuError: 0이 아닌 구간이 2개 미만인 경우
    """
    counts = [int(c) for c in np.asarray(histogram).ravel()]
    if len(counts) != 256:
        raise OtsuError(f"히스토그램은 256개 구간이어야 합니다: {len(counts)}")
    if any(c < 0 for c in counts):
        raise OtsuError("히스토그램 도수는 음수일 수 없습니다")
    if sum(1 for c in counts if c > 0) < 2:
        raise OtsuError("0이 아닌 구간이 2개 미만이라 임계값을 정할 수 없습니다")

    total = sum(counts)
    total_sum = sum(i * c for i, c in enumerate(counts))
    best_t, best_var = 0, Fraction(-1)
    w0 = s0 = 0
    for t in range(255):
        w0 += counts[t]
        s0 += t * counts[t]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            variance = Fraction(0)
        else:
            # 도수 기준 w0·w1·(μ0 − μ1)²
            variance = Fraction((s0 * total - total_sum * w0) ** 2, w0 * w1)
        if variance > best_var:
            best_t, best_var = t, variance
    return best_t


def remove_small_components(mask: np.ndarray, min_area: int, connectivity: int = 4) -> np.ndarray:
    """면적이 min_area 미만인 연결 성분을 제거합니다."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if count == 0:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels]


def binary_dilation(mask: Union[BinaryMask, np.ndarray],
                    iterations: int) -> Union[BinaryMask, np.ndarray]:
    """
    3×3 정사각 구조 요소로 iterations번 팽창합니다. 0회는 항등입니다.

    Args:
        mask: BinaryMask 또는 불리언 배열
        iterations: 반복 횟수 (≥ 0)

    Returns:
        입력과 같은 타입의 마스크
    """
    if iterations < 0:
        raise ValueError(f"iterations는 0 이상이어야 합니다: {iterations}")
    bits = _mask_bits(mask)
    if iterations == 0:
        # scipy는 0을 '수렴할 때까지'로 해석한다
        out = bits.copy()
    else:
        out = ndimage.binary_dilation(bits, structure=np.ones((3, 3), dtype=bool),
                                      iterations=iterations)
    if isinstance(mask, BinaryMask):
        return BinaryMask(out, downsample_factor=mask.downsample_factor)
    return out


def tissue_mask_from_image(image: RasterImage, downsample_factor: int = 1,
                           min_area: int = 256, dilation_iterations: int = 2,
                           connectivity: int = 4, plane: str = 'saturation') -> BinaryMask:
    """
    HSV 평면(256구간 양자화) → Otsu → 소형 성분 제거 → 3×3 팽창.

    Args:
        image: 3채널 래스터
        downsample_factor: 이미지의 레벨 0 대비 배수
        min_area: 남길 최소 성분 면적 (px)
        dilation_iterations: 팽창 반복 횟수
        connectivity: 4 또는 8
        plane: 'saturation' (S > t) 또는 'value' (V ≤ t)

    Returns:
        조직 마스크

    Raises:
        NoTissueError: 히스토그램이 퇴화했거나 남은 조직이 없는 경우
    """
    _, saturation, value = rgb_to_hsv(image)
    source = saturation if plane == 'saturation' else value
    quantized = np.clip(np.rint(source * 255.0), 0, 255).astype(np.int64)
    histogram = np.bincount(quantized.ravel(), minlength=256)

    try:
        threshold = otsu_threshold(histogram)
    except OtsuError as e:
        raise NoTissueError(f"조직을 찾지 못했습니다: {e.message}")

    raw = quantized > threshold if plane == 'saturation' else quantized <= threshold
    filtered = remove_small_components(raw, min_area, connectivity)
    if not filtered.any():
        raise NoTissueError(f"조직을 찾지 못했습니다 (면적 {min_area} 이상 성분 없음)")

    logger.debug(f"Otsu 임계값 {threshold}, 조직 픽셀 {int(filtered.sum())}")
    return BinaryMask(binary_dilation(filtered, dilation_iterations),
                      downsample_factor=downsample_factor)


def extract_tissue_mask(pyramid: ImagePyramid, level_name: str, min_area: int = 256,
                        dilation_iterations: int = 2, connectivity: int = 4,
                        plane: str = 'saturation') -> BinaryMask:
    """
    피라미드의 지정 레벨에서 조직 마스크를 추출합니다.

    Raises:
        PyramidError: 레벨이 없는 경우
        NoTissueError: 조직을 찾지 못한 경우
    """
    image = pyramid.read_level(level_name)
    return tissue_mask_from_image(image, pyramid.level_factor(level_name), min_area,
                                  dilation_iterations, connectivity, plane)


def upsample_mask(mask: BinaryMask, target_factor: int) -> np.ndarray:
    """마스크를 더 고해상도 배수로 최근접 확대합니다."""
    ratio = mask.downsample_factor // target_factor
    if ratio < 1 or mask.downsample_factor % target_factor:
        raise ShapeError(f"배수 {mask.downsample_factor} → {target_factor} 확대가 불가능합니다")
    return np.repeat(np.repeat(mask.bits, ratio, axis=0), ratio, axis=1)


def standardize_pyramid(pyramid: ImagePyramid, template: StainProfile, mask: BinaryMask,
                        percentiles: Tuple[float, float] = (1.0, 99.0)
                        ) -> Tuple[Dict[str, Tuple[RasterImage, int]], StainProfile]:
    """
    마스크 레벨에서 구한 프로파일로 모든 레벨을 표준화합니다.

    Args:
        pyramid: 원본 피라미드
        template: 목표 프로파일
        mask: 조직 마스크 (피라미드 레벨 중 하나와 같은 배수)
        percentiles: 앵커 백분위

    Returns:
        (배율 이름 → (표준화 이미지, 배수), 원본 프로파일)
    """
    names = {pyramid.level_factor(name): name for name in pyramid.magnifications}
    if mask.downsample_factor not in names:
        raise ShapeError(f"마스크 배수 {mask.downsample_factor}에 해당하는 레벨이 없습니다")
    source = compute_stain_profile(pyramid.read_level(names[mask.downsample_factor]),
                                   mask, percentiles)

    standardized = {}
    for name in sorted(pyramid.magnifications):
        factor = pyramid.level_factor(name)
        standardized[name] = (standardize_stain(pyramid.read_level(name), source, template), factor)
    return standardized, source
