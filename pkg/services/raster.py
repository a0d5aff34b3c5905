"""
래스터 이미지 서비스
8비트 RGB/그레이 래스터, 다중 해상도 피라미드, 색공간 변환, PPM/PGM 입출력
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage import color

from core.errors import PyramidError, RasterFormatError, ShapeError

logger = logging.getLogger(__name__)

_MAGIC_CHANNELS = {b'P6': 3, b'P5': 1}
_CHANNELS_MAGIC = {3: b'P6', 1: b'P5'}


# ==================== 도메인 타입 ====================
@dataclass(frozen=True)
class RasterImage:
    """(높이, 너비, 채널) uint8 래스터"""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ShapeError(f"래스터는 (H, W, 1|3) 형상이어야 합니다: {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError(f"래스터 크기는 1 이상이어야 합니다: {data.shape}")
        if data.dtype != np.uint8:
            data = data.astype(np.uint8)
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    def plane(self, index: int = 0) -> np.ndarray:
        return self.data[:, :, index]

    def crop(self, x: int, y: int, width: int, height: int, fill: int = 255) -> 'RasterImage':
        """
        (x, y)에서 시작하는 영역을 잘라냅니다. 이미지 밖은 fill 값으로 채웁니다.

        Args:
            x: 좌상단 x
            y: 좌상단 y
            width: 너비
            height: 높이
            fill: 이미지 밖 채움 값

        Returns:
            잘라낸 래스터
        """
        out = np.full((height, width, self.channels), fill, dtype=np.uint8)
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + width, self.width), min(y + height, self.height)
        if x1 > x0 and y1 > y0:
            out[y0 - y:y1 - y, x0 - x:x1 - x] = self.data[y0:y1, x0:x1]
        return RasterImage(out)


@dataclass(frozen=True)
class BinaryMask:
    """레벨 0 대비 다운샘플 배수를 가진 불리언 마스크"""

    bits: np.ndarray
    downsample_factor: int = 1

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ShapeError(f"마스크는 비어 있지 않은 2차원이어야 합니다: {bits.shape}")
        if self.downsample_factor < 1:
            raise ShapeError(f"downsample_factor는 양수여야 합니다: {self.downsample_factor}")
        bits = np.ascontiguousarray(bits)
        bits.setflags(write=False)
        object.__setattr__(self, 'bits', bits)

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def area(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class PyramidLevel:
    """피라미드 한 레벨. 이미지가 메모리에 없으면 path에서 읽습니다."""

    factor: int
    path: Optional[Path] = None
    image: Optional[RasterImage] = None
    size: Optional[Tuple[int, int]] = None  # (width, height)


@dataclass(frozen=True)
class ImagePyramid:
    """다중 해상도 슬라이드 (WSI 대체물)"""

    levels: Tuple[PyramidLevel, ...]
    magnifications: Dict[str, int] = field(default_factory=dict)
    manifest_path: Optional[Path] = None

    def __post_init__(self):
        _validate_levels([lv.factor for lv in self.levels], self.magnifications)

    @classmethod
    def from_images(cls, images: Dict[str, Tuple[RasterImage, int]]) -> 'ImagePyramid':
        """
        메모리 이미지로 피라미드를 만듭니다.

        Args:
            images: 배율 이름 → (이미지, 다운샘플 배수)

        Returns:
            ImagePyramid
        """
        ordered = sorted(images.items(), key=lambda item: item[1][1])
        levels = tuple(PyramidLevel(factor=factor, image=image, size=(image.width, image.height))
                       for _, (image, factor) in ordered)
        magnifications = {name: index for index, (name, _) in enumerate(ordered)}
        return cls(levels=levels, magnifications=magnifications)

    def level_factor(self, name: str) -> int:
        return self.levels[self._index(name)].factor

    def read_level(self, name: str) -> RasterImage:
        """배율 이름의 레벨 이미지를 반환합니다."""
        level = self.levels[self._index(name)]
        if level.image is not None:
            return level.image
        if level.path is None:
            raise PyramidError(f"레벨 '{name}'에 이미지도 경로도 없습니다")
        return read_ppm(level.path)

    def _index(self, name: str) -> int:
        if name not in self.magnifications:
            raise PyramidError(f"피라미드에 '{name}' 레벨이 없습니다")
        return self.magnifications[name]


def _validate_levels(factors: List[int], magnifications: Dict[str, int]) -> None:
    if not factors:
        raise PyramidError("피라미드에 레벨이 없습니다")
    if factors[0] != 1:
        raise PyramidError(f"레벨 0의 배수는 1이어야 합니다: {factors[0]}")
    if any(b <= a for a, b in zip(factors, factors[1:])):
        raise PyramidError(f"다운샘플 배수는 엄격히 증가해야 합니다: {factors}")
    for name, index in magnifications.items():
        if not isinstance(index, int) or not 0 <= index < len(factors):
            raise PyramidError(f"배율 '{name}'이 존재하지 않는 레벨 {index}을 가리킵니다")


# ==================== PPM / PGM 입출력 ====================
def _parse_header(buffer: bytes, path: Union[str, Path]) -> Tuple[int, int, int, int]:
    """(채널, 너비, 높이, 데이터 시작 오프셋)을 반환합니다."""
    magic = buffer[:2]
    if magic not in _MAGIC_CHANNELS:
        raise RasterFormatError(f"지원하지 않는 매직 {magic!r}: {path}")

    tokens: List[int] = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(buffer):
            raise RasterFormatError(f"헤더가 잘렸습니다: {path}")
        ch = buffer[pos:pos + 1]
        if ch == b'#':
            end = buffer.find(b'\n', pos)
            if end < 0:
                raise RasterFormatError(f"헤더가 잘렸습니다: {path}")
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(buffer) and buffer[pos:pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise RasterFormatError(f"헤더에 숫자가 아닌 값이 있습니다: {path}")
            tokens.append(int(buffer[start:pos]))

    if pos >= len(buffer) or not buffer[pos:pos + 1].isspace():
        raise RasterFormatError(f"헤더 뒤 공백이 없습니다: {path}")
    width, height, maxval = tokens
    if maxval != 255:
        raise RasterFormatError(f"maxval은 255여야 합니다 ({maxval}): {path}")
    if width < 1 or height < 1:
        raise RasterFormatError(f"이미지 크기가 잘못되었습니다 {width}x{height}: {path}")
    return _MAGIC_CHANNELS[magic], width, height, pos + 1


def read_ppm(path: Union[str, Path]) -> RasterImage:
    """
    이진 PPM(P6) 또는 PGM(P5) 파일을 읽습니다.

    Args:
        path: 파일 경로

    Returns:
        RasterImage

    Raises:
        RasterFormatError: 매직/헤더 오류, 데이터 잘림, maxval ≠ 255
    """
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except FileNotFoundError:
        raise RasterFormatError(f"이미지 파일이 없습니다: {path}")

    channels, width, height, offset = _parse_header(buffer, path)
    expected = width * height * channels
    payload = buffer[offset:]
    if len(payload) < expected:
        raise RasterFormatError(f"픽셀 데이터가 잘렸습니다 ({len(payload)}/{expected} 바이트): {path}")
    if len(payload) > expected:
        raise RasterFormatError(f"픽셀 데이터 뒤에 여분 바이트가 있습니다: {path}")

    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return RasterImage(data.copy())


def read_ppm_size(path: Union[str, Path]) -> Tuple[int, int, int]:
    """헤더만 읽어 (너비, 높이, 채널)을 반환합니다."""
    path = Path(path)
    with open(path, 'rb') as f:
        head = f.read(512)
    channels, width, height, _ = _parse_header(head, path)
    return width, height, channels


def write_ppm(image: RasterImage, path: Union[str, Path]) -> None:
    """
    래스터를 P6(3채널) 또는 P5(1채널)로 씁니다.

    Args:
        image: 래스터
        path: 출력 경로
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = b'%s\n%d %d\n255\n' % (_CHANNELS_MAGIC[image.channels], image.width, image.height)
    with open(path, 'wb') as f:
        f.write(header)
        f.write(image.data.tobytes())


def write_mask(mask: BinaryMask, path: Union[str, Path], extra: Optional[Dict] = None) -> Path:
    """
    마스크를 0/255 PGM과 JSON 사이드카로 저장합니다.

    Args:
        mask: 마스크
        path: PGM 경로
        extra: 사이드카에 추가할 항목

    Returns:
        사이드카 경로
    """
    path = Path(path)
    write_ppm(RasterImage(mask.bits.astype(np.uint8) * 255), path)
    sidecar = path.with_suffix('.json')
    meta = {'downsample_factor': mask.downsample_factor}
    meta.update(extra or {})
    with open(sidecar, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write('\n')
    return sidecar


def read_mask(path: Union[str, Path]) -> BinaryMask:
    """write_mask로 저장한 마스크를 읽습니다."""
    path = Path(path)
    image = read_ppm(path)
    if image.channels != 1:
        raise RasterFormatError(f"마스크는 PGM이어야 합니다: {path}")
    sidecar = path.with_suffix('.json')
    factor = 1
    if sidecar.exists():
        with open(sidecar, 'r', encoding='utf-8') as f:
            factor = int(json.load(f).get('downsample_factor', 1))
    return BinaryMask(image.plane(0) > 127, downsample_factor=factor)


# ==================== 피라미드 ====================
def _reject_duplicates(pairs):
    seen: Dict[str, object] = {}
    for key, value in pairs:
        if key in seen:
            raise PyramidError(f"매니페스트에 중복 키가 있습니다: '{key}'")
        seen[key] = value
    return seen


def load_pyramid(manifest_path: Union[str, Path]) -> ImagePyramid:
    """
    JSON 매니페스트에서 피라미드를 읽습니다. 이미지 본문은 필요할 때 읽습니다.

    매니페스트 형식:
        {"levels": [{"file": str, "factor": int}, ...],
         "magnifications": {"10x": int, "40x": int}}

    Args:
        manifest_path: 매니페스트 경로 (file은 이 파일 기준 상대 경로)

    Returns:
        ImagePyramid

    Raises:
        PyramidError: 파일 누락, 배수 순서 오류, 중복 배율 이름, 크기 불일치
    """
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f, object_pairs_hook=_reject_duplicates)
    except FileNotFoundError:
        raise PyramidError(f"매니페스트가 없습니다: {manifest_path}")
    except json.JSONDecodeError as e:
        raise PyramidError(f"매니페스트 JSON 오류 {manifest_path}: {e}")

    entries = manifest.get('levels')
    magnifications = manifest.get('magnifications', {})
    if not isinstance(entries, list) or not isinstance(magnifications, dict):
        raise PyramidError(f"매니페스트 형식이 잘못되었습니다: {manifest_path}")

    factors = [int(entry['factor']) for entry in entries]
    _validate_levels(factors, magnifications)
    if len(set(magnifications.values())) != len(magnifications):
        raise PyramidError(f"두 배율 이름이 같은 레벨을 가리킵니다: {magnifications}")

    levels = []
    base_size: Optional[Tuple[int, int]] = None
    for entry, factor in zip(entries, factors):
        file_path = manifest_path.parent / entry['file']
        if not file_path.exists():
            raise PyramidError(f"레벨 이미지가 없습니다: {file_path}")
        width, height, _ = read_ppm_size(file_path)
        if base_size is None:
            base_size = (width, height)
        elif (width, height) != (base_size[0] // factor, base_size[1] // factor):
            raise PyramidError(f"레벨 크기가 배수 {factor}와 맞지 않습니다: {file_path}")
        levels.append(PyramidLevel(factor=factor, path=file_path, size=(width, height)))

    return ImagePyramid(levels=tuple(levels), magnifications=dict(magnifications),
                        manifest_path=manifest_path)


def write_pyramid(images: Dict[str, Tuple[RasterImage, int]], directory: Union[str, Path],
                  stem: str) -> Path:
    """
    레벨 이미지들을 PPM으로 쓰고 매니페스트를 만듭니다.

    Args:
        images: 배율 이름 → (이미지, 다운샘플 배수)
        directory: 출력 디렉토리
        stem: 파일 이름 접두어

    Returns:
        매니페스트 경로
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ordered = sorted(images.items(), key=lambda item: item[1][1])
    entries = []
    magnifications = {}
    for index, (name, (image, factor)) in enumerate(ordered):
        file_name = f"{stem}_{name}.ppm"
        write_ppm(image, directory / file_name)
        entries.append({'file': file_name, 'factor': factor})
        magnifications[name] = index

    manifest_path = directory / f"{stem}.pyramid.json"
    with open(manifest_path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump({'levels': entries, 'magnifications': magnifications}, f, indent=2)
        f.write('\n')
    return manifest_path


# ==================== 색공간 / 보간 ====================
def rgb_to_hsv(image: RasterImage) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    육각뿔(hexcone) HSV 변환. H∈[0,360), S∈[0,1], V∈[0,1].

    V=0이면 S=0, S=0이면 H=0으로 정합니다.

    Args:
        image: 3채널 래스터

    Returns:
        (H, S, V) float64 평면
    """
    if image.channels != 3:
        raise ShapeError(f"HSV 변환은 3채널 이미지만 가능합니다: {image.channels}")
    hsv = color.rgb2hsv(image.data.astype(np.float64) / 255.0)
    hue = hsv[:, :, 0] * 360.0
    hue = np.where(hue >= 360.0, 0.0, hue)
    saturation = hsv[:, :, 1]
    hue = np.where(saturation == 0.0, 0.0, hue)
    return hue, saturation, hsv[:, :, 2]


def hsv_to_rgb(hue: np.ndarray, saturation: np.ndarray, value: np.ndarray) -> RasterImage:
    """rgb_to_hsv의 역변환 (8비트 반올림)."""
    hsv = np.stack([np.asarray(hue, dtype=np.float64) / 360.0, saturation, value], axis=-1)
    rgb = color.hsv2rgb(hsv)
    return RasterImage(np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8))


def to_grayscale(image: RasterImage) -> np.ndarray:
    """0.299R + 0.587G + 0.114B 휘도 평면 (float64, 0~255)."""
    if image.channels == 1:
        return image.plane(0).astype(np.float64)
    rgb = image.data.astype(np.float64)
    return 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]


def resize_bilinear(plane: np.ndarray, new_width: int, new_height: int) -> np.ndarray:
    """
    모서리 정렬(corner-aligned) 이중선형 보간.

    목적 격자의 양 끝 표본이 원본의 양 끝 표본과 일치합니다.

    Args:
        plane: 2차원 float 평면
        new_width: 새 너비
        new_height: 새 높이

    Returns:
        보간된 평면
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.shape[0] < 1 or plane.shape[1] < 1:
        raise ShapeError(f"원본 평면 크기가 잘못되었습니다: {plane.shape}")
    if new_width < 1 or new_height < 1:
        raise ShapeError(f"목표 크기는 1 이상이어야 합니다: {new_width}x{new_height}")

    height, width = plane.shape
    if (new_height, new_width) == (height, width):
        return plane.copy()
    rows = np.linspace(0.0, height - 1, new_height)
    cols = np.linspace(0.0, width - 1, new_width)
    grid_r, grid_c = np.meshgrid(rows, cols, indexing='ij')
    return ndimage.map_coordinates(plane, [grid_r, grid_c], order=1, mode='nearest')
