"""
신경망 서비스
numpy float64 기반 최소 CNN 엔진: 순전파/역전파, 모멘텀 SGD, 완전 합성곱(FCN) 추론,
LocNet-mini / MitosNet-mini 검출기, 캐스케이드 특징 추출기, 가중치 저장소
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from tqdm import tqdm

from core.config import FORMAT_VERSION
from core.errors import DataError, ShapeError, TrainingError
from utils.json_utils import JSONUtils
from utils.system_utils import SystemUtils

logger = logging.getLogger(__name__)

IGNORE_LABEL = 255
PARAM_KINDS = ('conv', 'linear')


# ==================== 구조 명세 ====================
@dataclass(frozen=True)
class LayerSpec:
    """레이어 하나의 선언"""

    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in ('conv', 'relu', 'maxpool', 'softmax2d', 'globalavgpool', 'linear'):
            raise ShapeError(f"알 수 없는 레이어 종류: {self.kind}")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"stride ≥ 1, padding ≥ 0 이어야 합니다: {self}")
        if self.kind == 'conv' and min(self.in_ch, self.out_ch, self.kernel) < 1:
            raise ShapeError(f"conv 차원은 양수여야 합니다: {self}")
        if self.kind == 'maxpool' and self.kernel < 1:
            raise ShapeError(f"maxpool 커널은 양수여야 합니다: {self}")
        if self.kind == 'linear' and min(self.in_ch, self.out_ch) < 1:
            raise ShapeError(f"linear 차원은 양수여야 합니다: {self}")

    @classmethod
    def conv(cls, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0) -> 'LayerSpec':
        return cls('conv', in_ch, out_ch, kernel, stride, padding)

    @classmethod
    def relu(cls) -> 'LayerSpec':
        return cls('relu')

    @classmethod
    def maxpool(cls, kernel: int, stride: Optional[int] = None) -> 'LayerSpec':
        return cls('maxpool', kernel=kernel, stride=stride or kernel)

    @classmethod
    def softmax2d(cls) -> 'LayerSpec':
        return cls('softmax2d')

    @classmethod
    def globalavgpool(cls) -> 'LayerSpec':
        return cls('globalavgpool')

    @classmethod
    def linear(cls, in_dim: int, out_dim: int) -> 'LayerSpec':
        return cls('linear', in_ch=in_dim, out_ch=out_dim)

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        if self.kind == 'conv':
            return {'w': (self.out_ch, self.in_ch, self.kernel, self.kernel), 'b': (self.out_ch,)}
        if self.kind == 'linear':
            return {'w': (self.out_ch, self.in_ch), 'b': (self.out_ch,)}
        return {}

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'in_ch': self.in_ch, 'out_ch': self.out_ch,
                'kernel': self.kernel, 'stride': self.stride, 'padding': self.padding}


def compute_geometry(layers: Sequence[LayerSpec]) -> Tuple[int, int]:
    """
    (total_stride, receptive_field)를 계산합니다. globalavgpool 이후는 공간 구조가 없어 멈춥니다.
    """
    stride, field_size = 1, 1
    for layer in layers:
        if layer.kind == 'globalavgpool':
            break
        if layer.kind in ('conv', 'maxpool'):
            field_size += (layer.kernel - 1) * stride
            stride *= layer.stride
    return stride, field_size


@dataclass(frozen=True)
class NetworkSpec:
    """레이어 목록으로 선언한 네트워크"""

    name: str
    layers: Tuple[LayerSpec, ...]
    class_count: Optional[int] = None
    total_stride: Optional[int] = None
    receptive_field: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        stride, field_size = compute_geometry(self.layers)
        if self.total_stride is not None and self.total_stride != stride:
            raise ShapeError(f"{self.name}: 선언된 stride {self.total_stride} ≠ 계산값 {stride}")
        if self.receptive_field is not None and self.receptive_field != field_size:
            raise ShapeError(f"{self.name}: 선언된 수용영역 {self.receptive_field} ≠ 계산값 {field_size}")
        object.__setattr__(self, 'total_stride', stride)
        object.__setattr__(self, 'receptive_field', field_size)
        if self.class_count is not None and self.output_channels != self.class_count:
            raise ShapeError(f"{self.name}: 마지막 출력 채널 {self.output_channels} ≠ 클래스 수 {self.class_count}")

    @property
    def output_channels(self) -> int:
        for layer in reversed(self.layers):
            if layer.has_params:
                return layer.out_ch
        raise ShapeError(f"{self.name}: 파라미터 레이어가 없습니다")

    @property
    def padded(self) -> bool:
        return any(layer.kind == 'conv' and layer.padding > 0 for layer in self.layers)

    @property
    def context(self) -> int:
        """패딩 없는 망의 타일 확장량 (RF − stride). 패딩 망은 0."""
        return 0 if self.padded else self.receptive_field - self.total_stride

    @property
    def patch_size(self) -> int:
        """출력 셀 하나를 만드는 입력 크기."""
        return self.total_stride + self.context

    @property
    def ends_with_softmax(self) -> bool:
        return bool(self.layers) and self.layers[-1].kind == 'softmax2d'

    def parameter_count(self) -> int:
        return int(sum(int(np.prod(shape)) for layer in self.layers
                       for shape in layer.param_shapes().values()))

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'class_count': self.class_count,
                'layers': [layer.to_dict() for layer in self.layers]}

    def spec_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def layer_name(self, index: int) -> str:
        return f"{self.name}.{index}:{self.layers[index].kind}"


# ==================== 아키텍처 ====================
def locnet_mini(valid: bool = False, width: int = 1) -> NetworkSpec:
    """
    LocNet-mini 종양 검출기 (stride 16). valid=True면 패딩 없는 변형.
    """
    pad = 0 if valid else 1
    channels = [3, 8 * width, 16 * width, 32 * width, 32 * width]
    layers: List[LayerSpec] = []
    for c_in, c_out in zip(channels, channels[1:]):
        layers += [LayerSpec.conv(c_in, c_out, 3, 1, pad), LayerSpec.relu(), LayerSpec.maxpool(2)]
    layers.append(LayerSpec.conv(channels[-1], 2, 1))
    return NetworkSpec('locnet_mini_valid' if valid else 'locnet_mini', tuple(layers), class_count=2)


def mitosnet_mini(width: int = 1) -> NetworkSpec:
    """MitosNet-mini 유사분열 검출기 (6 레이어, stride 16, 수용영역 16)."""
    c1, c2 = 16 * width, 32 * width
    layers = (
        LayerSpec.conv(3, c1, 4, 4), LayerSpec.relu(),
        LayerSpec.conv(c1, c2, 4, 4), LayerSpec.relu(),
        LayerSpec.conv(c2, 2, 1), LayerSpec.softmax2d(),
    )
    return NetworkSpec('mitosnet_mini', layers, class_count=2, total_stride=16, receptive_field=16)


def cascade_head(in_channels: int, width: int, name: str = 'cascade_head') -> NetworkSpec:
    """3C/P 캐스케이드 헤드: (conv3×3 + relu + maxpool2)×3 → GAP → linear(3) → softmax."""
    layers: List[LayerSpec] = []
    c_in = in_channels
    for _ in range(3):
        layers += [LayerSpec.conv(c_in, width, 3, 1, 1), LayerSpec.relu(), LayerSpec.maxpool(2)]
        c_in = width
    layers += [LayerSpec.globalavgpool(), LayerSpec.linear(width, 3), LayerSpec.softmax2d()]
    return NetworkSpec(name, tuple(layers), class_count=3)


def trunk_spec(spec: NetworkSpec) -> NetworkSpec:
    """검출기에서 마지막 분류 conv(와 softmax)를 뗀 특징 추출 몸통."""
    last_param = max(i for i, layer in enumerate(spec.layers) if layer.has_params)
    return NetworkSpec(f"{spec.name}_trunk", spec.layers[:last_param])


def build_detector(kind: str, architecture: str = 'locnet_mini', mitosis_width: int = 1) -> NetworkSpec:
    """검출 종류(tumor/mitosis)에 맞는 네트워크를 만듭니다."""
    if kind == 'tumor':
        return locnet_mini(valid=(architecture == 'locnet_mini_valid'))
    if kind == 'mitosis':
        return mitosnet_mini(mitosis_width)
    raise ValueError(f"알 수 없는 검출 종류: {kind}")


# ==================== 가중치 저장소 ====================
@dataclass
class WeightStore:
    """레이어별 파라미터 (파라미터 없는 레이어는 빈 딕셔너리)"""

    spec: NetworkSpec
    params: List[Dict[str, np.ndarray]]
    seed: int = 0
    version: int = FORMAT_VERSION
    frozen: bool = False

    def __post_init__(self):
        if len(self.params) != len(self.spec.layers):
            raise ShapeError(f"{self.spec.name}: 파라미터 목록 길이가 레이어 수와 다릅니다")
        for index, (layer, params) in enumerate(zip(self.spec.layers, self.params)):
            expected = layer.param_shapes()
            actual = {key: tuple(value.shape) for key, value in params.items()}
            if actual != expected:
                raise ShapeError(f"{self.spec.layer_name(index)}: 파라미터 형상 {actual} ≠ {expected}")

    def copy(self) -> 'WeightStore':
        return WeightStore(self.spec, [{k: v.copy() for k, v in p.items()} for p in self.params],
                           self.seed, self.version, self.frozen)

    def slice(self, spec: NetworkSpec, start: int = 0) -> 'WeightStore':
        """앞쪽 레이어 일부를 공유하는 하위 네트워크 가중치."""
        params = self.params[start:start + len(spec.layers)]
        return WeightStore(spec, params, self.seed, self.version, frozen=True)

    def header(self) -> Dict[str, Any]:
        return {
            'name': self.spec.name,
            'spec_hash': self.spec.spec_hash(),
            'spec': self.spec.to_dict(),
            'seed': self.seed,
            'version': self.version,
            'layers': [{key: list(shape) for key, shape in layer.param_shapes().items()}
                       for layer in self.spec.layers],
        }

    def arrays(self) -> List[np.ndarray]:
        return [params[key] for params in self.params for key in ('w', 'b') if key in params]

    def save(self, path: Union[str, Path]) -> None:
        JSONUtils.save_blob(self.header(), self.arrays(), path)

    @classmethod
    def load(cls, path: Union[str, Path], spec: Optional[NetworkSpec] = None) -> 'WeightStore':
        """
        가중치 파일을 읽습니다. spec이 주어지면 해시가 일치해야 합니다.

        Raises:
            ShapeError: 구조 해시 불일치
        """
        header, arrays = JSONUtils.load_blob(path)
        if spec is None:
            spec = spec_from_dict(header['spec'])
        if header.get('spec_hash') != spec.spec_hash():
            raise ShapeError(f"가중치 파일 {path}의 구조가 {spec.name}와 다릅니다")
        params: List[Dict[str, np.ndarray]] = []
        cursor = 0
        for layer in spec.layers:
            layer_params = {}
            for key in layer.param_shapes():
                layer_params[key] = arrays[cursor]
                cursor += 1
            params.append(layer_params)
        return cls(spec, params, int(header.get('seed', 0)), int(header.get('version', FORMAT_VERSION)))


def spec_from_dict(data: Dict[str, Any]) -> NetworkSpec:
    layers = tuple(LayerSpec(**layer) for layer in data['layers'])
    return NetworkSpec(data['name'], layers, class_count=data.get('class_count'))


def init_weights(spec: NetworkSpec, seed: int) -> WeightStore:
    """
    He-uniform 초기화 (레이어 순서대로 같은 RNG 스트림 사용), 편향은 0.

    Args:
        spec: 네트워크 구조
        seed: 난수 시드

    Returns:
        WeightStore
    """
    rng = np.random.default_rng(seed)
    params: List[Dict[str, np.ndarray]] = []
    for layer in spec.layers:
        shapes = layer.param_shapes()
        if not shapes:
            params.append({})
            continue
        fan_in = int(np.prod(shapes['w'][1:]))
        limit = np.sqrt(6.0 / fan_in)
        params.append({'w': rng.uniform(-limit, limit, size=shapes['w']),
                       'b': np.zeros(shapes['b'])})
    return WeightStore(spec, params, seed)


# ==================== 레이어 연산 ====================
def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise ShapeError(f"입력은 (C,H,W) 또는 (N,C,H,W)여야 합니다: {x.shape}")
    return x


def _window(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   stride: int = 1, padding: int = 0) -> np.ndarray:
    """
    2차원 상호상관 (커널 뒤집기 없음). 출력 = floor((H+2p−k)/s)+1.

    Args:
        x: (N,C,H,W) 또는 (C,H,W)
        weight: (O,C,k,k)
        bias: (O,)
        stride: 보폭
        padding: 0 패딩 폭

    Returns:
        (N,O,Ho,Wo) 출력
    """
    return _conv_forward(_as_batch(x), weight, bias, stride, padding)[0]


def _conv_forward(x, weight, bias, stride, padding):
    n, c, h, w = x.shape
    out_ch, in_ch, k, _ = weight.shape
    if c != in_ch:
        raise ShapeError(f"conv 입력 채널 {c} ≠ {in_ch}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"conv 입력 {h}x{w}(패딩 {padding})가 커널 {k}보다 작습니다")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    out = np.zeros((n, ho, wo, out_ch))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, _window(i, ho, stride), _window(j, wo, stride)]
            out += np.tensordot(patch, weight[:, :, i, j], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out), xp


def _conv_backward(dout, xp, weight, stride, padding, input_shape):
    _, _, ho, wo = dout.shape
    k = weight.shape[2]
    dxp = np.zeros_like(xp)
    dweight = np.zeros_like(weight)
    for i in range(k):
        for j in range(k):
            rows, cols = _window(i, ho, stride), _window(j, wo, stride)
            dweight[:, :, i, j] = np.tensordot(dout, xp[:, :, rows, cols], axes=([0, 2, 3], [0, 2, 3]))
            dxp[:, :, rows, cols] += np.tensordot(dout, weight[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
    h, w = input_shape[2], input_shape[3]
    dx = dxp[:, :, padding:padding + h, padding:padding + w]
    return dx, {'w': dweight, 'b': dout.sum(axis=(0, 2, 3))}


def _maxpool_forward(x, kernel, stride):
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"maxpool 입력 {h}x{w}가 커널 {kernel}보다 작습니다")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = windows.reshape(n, c, ho, wo, kernel * kernel)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def _maxpool_backward(dout, argmax, kernel, stride, input_shape):
    dx = np.zeros(input_shape)
    _, _, ho, wo = dout.shape
    for index in range(kernel * kernel):
        di, dj = divmod(index, kernel)
        dx[:, :, _window(di, ho, stride), _window(dj, wo, stride)] += dout * (argmax == index)
    return dx


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """채널 축(1) 소프트맥스."""
    shifted = x - x.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def log_softmax_channels(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def layer_forward(layer: LayerSpec, params: Dict[str, np.ndarray],
                  x: np.ndarray) -> Tuple[np.ndarray, Any]:
    """
    레이어 하나의 순전파. 역전파에 필요한 캐시를 함께 반환합니다.

    Args:
        layer: 레이어 명세
        params: 레이어 파라미터
        x: (N,C,H,W) 입력

    Returns:
        (출력, 캐시)
    """
    kind = layer.kind
    if kind == 'conv':
        out, xp = _conv_forward(x, params['w'], params['b'], layer.stride, layer.padding)
        return out, (xp, x.shape)
    if kind == 'relu':
        return np.maximum(x, 0.0), x
    if kind == 'maxpool':
        out, argmax = _maxpool_forward(x, layer.kernel, layer.stride)
        return out, (argmax, x.shape)
    if kind == 'softmax2d':
        out = softmax_channels(x)
        return out, out
    if kind == 'globalavgpool':
        return x.mean(axis=(2, 3), keepdims=True), x.shape
    # linear
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != layer.in_ch:
        raise ShapeError(f"linear 입력 차원 {flat.shape[1]} ≠ {layer.in_ch}")
    out = flat @ params['w'].T + params['b']
    return out[:, :, None, None], (flat, x.shape)


def layer_backward(layer: LayerSpec, params: Dict[str, np.ndarray], cache: Any,
                   dout: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    레이어 하나의 역전파.

    Returns:
        (입력 기울기, 파라미터 기울기)
    """
    kind = layer.kind
    if kind == 'conv':
        xp, shape = cache
        return _conv_backward(dout, xp, params['w'], layer.stride, layer.padding, shape)
    if kind == 'relu':
        return dout * (cache > 0), {}
    if kind == 'maxpool':
        argmax, shape = cache
        return _maxpool_backward(dout, argmax, layer.kernel, layer.stride, shape), {}
    if kind == 'softmax2d':
        y = cache
        return y * (dout - (dout * y).sum(axis=1, keepdims=True)), {}
    if kind == 'globalavgpool':
        shape = cache
        return np.broadcast_to(dout / (shape[2] * shape[3]), shape).copy(), {}
    flat, shape = cache
    dflat = dout.reshape(dout.shape[0], -1)
    grads = {'w': dflat.T @ flat, 'b': dflat.sum(axis=0)}
    return (dflat @ params['w']).reshape(shape), grads


# ==================== 네트워크 순전파/역전파 ====================
def forward(store: WeightStore, x: np.ndarray, stop: Optional[int] = None,
            keep_caches: bool = False) -> Union[np.ndarray, Tuple[np.ndarray, List[Any]]]:
    """
    레이어 [0, stop) 구간 순전파.

    Args:
        store: 가중치
        x: (C,H,W) 또는 (N,C,H,W)
        stop: 멈출 레이어 인덱스 (None이면 끝까지)
        keep_caches: 역전파용 캐시 반환 여부

    Returns:
        출력 (또는 (출력, 캐시 목록))
    """
    out = _as_batch(x)
    caches = []
    layers = store.spec.layers[:stop]
    for layer, params in zip(layers, store.params):
        out, cache = layer_forward(layer, params, out)
        if keep_caches:
            caches.append(cache)
    return (out, caches) if keep_caches else out


def logits_stop(spec: NetworkSpec) -> int:
    """손실 계산용 로짓 지점 (마지막 softmax2d 제외)."""
    return len(spec.layers) - 1 if spec.ends_with_softmax else len(spec.layers)


def predict_probs(store: WeightStore, x: np.ndarray) -> np.ndarray:
    """채널 축 클래스 확률 (N,K,Ho,Wo)."""
    return softmax_channels(forward(store, x, stop=logits_stop(store.spec)))


def _loss_sums(store: WeightStore, x: np.ndarray,
               labels: np.ndarray) -> Tuple[float, List[Dict[str, np.ndarray]], int]:
    """정규화하지 않은 (손실 합, 기울기 합, 유효 위치 수)."""
    spec = store.spec
    stop = logits_stop(spec)
    logits, caches = forward(store, x, stop=stop, keep_caches=True)
    labels = np.asarray(labels).astype(np.int64)
    expected = (logits.shape[0],) + logits.shape[2:]
    if labels.size != int(np.prod(expected)):
        raise ShapeError(f"{spec.name}: 라벨 형상 {labels.shape}이 출력 격자 {expected}와 맞지 않습니다")
    labels = labels.reshape(expected)
    classes = logits.shape[1]

    valid = labels != IGNORE_LABEL
    if np.any((labels[valid] < 0) | (labels[valid] >= classes)):
        raise DataError(f"{spec.name}: 라벨이 [0, {classes}) 범위를 벗어났습니다")
    count = int(valid.sum())
    grads: List[Dict[str, np.ndarray]] = [{k: np.zeros_like(v) for k, v in p.items()} for p in store.params]
    if count == 0:
        return 0.0, grads, 0

    log_probs = log_softmax_channels(logits)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(log_probs, safe[:, None], axis=1)[:, 0]
    loss_sum = float(-(picked * valid).sum())

    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    dout = (np.exp(log_probs) - onehot) * valid[:, None]

    for index in range(stop - 1, -1, -1):
        layer = spec.layers[index]
        dout, layer_grads = layer_backward(layer, store.params[index], caches[index], dout)
        if layer_grads:
            grads[index] = layer_grads
    return loss_sum, grads, count


def backward(store: WeightStore, x: np.ndarray,
             labels: np.ndarray) -> Tuple[float, List[Dict[str, np.ndarray]]]:
    """
    위치별 평균 교차 엔트로피 손실과 모든 파라미터 기울기를 계산합니다.

    라벨 255 위치는 평균에서 제외합니다. 모두 제외되면 손실과 기울기는 0입니다.

    Args:
        store: 가중치
        x: 입력 배치
        labels: (N,Ho,Wo) 정수 라벨

    Returns:
        (손실, 레이어별 기울기)
    """
    loss_sum, grads, count = _loss_sums(store, x, labels)
    if count == 0:
        return 0.0, grads
    scale = 1.0 / count
    return loss_sum * scale, [{k: v * scale for k, v in g.items()} for g in grads]


# ==================== 최적화 ====================
def sgd_step(store: WeightStore, grads: List[Dict[str, np.ndarray]], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: Optional[List[Dict[str, np.ndarray]]] = None
             ) -> Tuple[WeightStore, List[Dict[str, np.ndarray]]]:
    """
    모멘텀 SGD: v ← m·v + g + wd·w, w ← w − lr·v.

    Args:
        store: 현재 가중치
        grads: 기울기
        lr: 학습률 (> 0)
        momentum: 모멘텀 계수
        weight_decay: 가중치 감쇠
        velocity: 이전 속도 (None이면 0)

    Returns:
        (새 가중치, 새 속도)

    Raises:
        TrainingError: 유한하지 않은 기울기 (레이어 이름 포함)
    """
    if lr <= 0:
        raise ValueError(f"학습률은 양수여야 합니다: {lr}")
    if store.frozen:
        raise TrainingError(f"{store.spec.name}: 고정된 가중치는 갱신할 수 없습니다")
    if velocity is None:
        velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in store.params]

    new_params, new_velocity = [], []
    for index, (params, layer_grads, layer_velocity) in enumerate(zip(store.params, grads, velocity)):
        updated, moved = {}, {}
        for key, value in params.items():
            grad = layer_grads[key]
            if not np.all(np.isfinite(grad)):
                raise TrainingError(f"유한하지 않은 기울기: {store.spec.layer_name(index)}.{key}")
            v = momentum * layer_velocity[key] + grad + weight_decay * value
            moved[key] = v
            updated[key] = value - lr * v
        new_params.append(updated)
        new_velocity.append(moved)
    return WeightStore(store.spec, new_params, store.seed, store.version), new_velocity


@dataclass
class TrainingHistory:
    """에폭별 평균 손실"""

    losses: List[float] = field(default_factory=list)


def train_network(store: WeightStore, inputs: np.ndarray, labels: np.ndarray, epochs: int,
                  batch_size: int, lr: float, momentum: float, weight_decay: float, seed: int,
                  chunk_size: int = 32, jobs: int = 1, show_progress: bool = False
                  ) -> Tuple[WeightStore, TrainingHistory]:
    """
    미니배치 SGD 학습. 각 배치는 고정 크기 청크로 나눠 청크 순서대로 합산하므로
    jobs 값과 무관하게 같은 가중치가 나옵니다.

    Args:
        store: 초기 가중치
        inputs: (N,C,H,W)
        labels: (N,Ho,Wo)
        epochs: 에폭 수
        batch_size: 배치 크기
        lr, momentum, weight_decay: SGD 하이퍼파라미터
        seed: 셔플 시드
        chunk_size: 기울기 청크 크기
        jobs: 병렬 작업자 수
        show_progress: tqdm 진행 표시

    Returns:
        (학습된 가중치, 손실 기록)
    """
    if len(inputs) == 0:
        raise TrainingError(f"{store.spec.name}: 학습 표본이 없습니다")
    rng = np.random.default_rng(seed)
    history = TrainingHistory()
    velocity = None

    for _ in tqdm(range(epochs), desc=f"{store.spec.name} 학습", disable=not show_progress, leave=False):
        order = rng.permutation(len(inputs))
        epoch_loss, epoch_count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            chunks = [batch[i:i + chunk_size] for i in range(0, len(batch), chunk_size)]
            current = store

            def run_chunk(indices: np.ndarray) -> Tuple[float, List[Dict[str, np.ndarray]], int]:
                return _loss_sums(current, inputs[indices], labels[indices])

            results = SystemUtils.parallel_map(run_chunk, chunks, jobs)
            loss_sum = sum(r[0] for r in results)
            count = sum(r[2] for r in results)
            if count == 0:
                continue
            total = results[0][1]
            for _, chunk_grads, _ in results[1:]:
                total = [{k: g[k] + c[k] for k in g} for g, c in zip(total, chunk_grads)]
            grads = [{k: v / count for k, v in g.items()} for g in total]
            if not np.isfinite(loss_sum):
                raise TrainingError(f"{store.spec.name}: 손실이 유한하지 않습니다")
            store, velocity = sgd_step(store, grads, lr, momentum, weight_decay, velocity)
            epoch_loss += loss_sum
            epoch_count += count
        history.losses.append(epoch_loss / max(epoch_count, 1))
        logger.debug(f"{store.spec.name} 에폭 손실 {history.losses[-1]:.6f}")
    return store, history


# ==================== 완전 합성곱 추론 ====================
def fcn_forward(store: WeightStore, tile: np.ndarray, extended: bool = False) -> np.ndarray:
    """
    타일 전체를 한 번에 통과시켜 (N,K,H/S,W/S) 로짓 맵을 만듭니다.

    패딩 없는 망은 아래/오른쪽을 context(RF − S)만큼 0으로 늘려,
    셀 (i, j)가 (i·S, j·S)에서 시작하는 수용영역 크기 잘라내기의 분류 결과와 같아집니다.

    Args:
        store: 검출기 가중치
        tile: (C,H,W) 또는 (N,C,H,W), H/W는 stride의 배수
        extended: True면 tile이 이미 context만큼 실제 주변 픽셀을 포함한 것으로 봅니다

    Returns:
        로짓 맵

    Raises:
        ShapeError: 타일 크기가 stride로 나누어떨어지지 않는 경우
    """
    spec = store.spec
    x = _as_batch(tile)
    context = spec.context
    height, width = x.shape[2], x.shape[3]
    if extended:
        height, width = height - context, width - context
    stride = spec.total_stride
    if height < stride or width < stride or height % stride or width % stride:
        raise ShapeError(f"타일 {height}x{width}가 stride {stride}로 나누어떨어지지 않습니다")
    if context and not extended:
        x = np.pad(x, ((0, 0), (0, 0), (0, context), (0, context)))
    out = forward(store, x, stop=logits_stop(spec))
    return out[:, :, :height // stride, :width // stride]


def sliding_forward(store: WeightStore, image: np.ndarray, extended: bool = False,
                    batch: int = 256) -> np.ndarray:
    """
    셀마다 patch_size 잘라내기를 따로 분류하는 슬라이딩 윈도 로짓 맵 (fcn_forward와 같은 좌표계).

    Args:
        store: 검출기 가중치
        image: (C,H,W), H/W는 stride의 배수
        extended: True면 image가 이미 context만큼 확장된 것으로 봅니다
        batch: 한 번에 분류할 잘라내기 수

    Returns:
        (1,K,H/S,W/S) 로짓 맵
    """
    spec = store.spec
    stride, patch, context = spec.total_stride, spec.patch_size, spec.context
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[1], image.shape[2]
    if extended:
        height, width = height - context, width - context
    if height < stride or width < stride or height % stride or width % stride:
        raise ShapeError(f"이미지 {height}x{width}가 stride {stride}로 나누어떨어지지 않습니다")
    padded = image if extended else np.pad(image, ((0, 0), (0, context), (0, context)))
    rows, cols = height // stride, width // stride
    coords = [(i, j) for i in range(rows) for j in range(cols)]
    out = np.zeros((1, spec.output_channels, rows, cols))
    for start in range(0, len(coords), batch):
        chunk = coords[start:start + batch]
        crops = np.stack([padded[:, i * stride:i * stride + patch, j * stride:j * stride + patch]
                          for i, j in chunk])
        logits = forward(store, crops, stop=logits_stop(spec))
        for (i, j), value in zip(chunk, logits[:, :, 0, 0]):
            out[0, :, i, j] = value
    return out


# ==================== 캐스케이드 / 심층 특징 ====================
def head_penultimate_index(spec: NetworkSpec) -> int:
    """GAP 출력(끝에서 두 번째 표현) 다음 레이어 인덱스."""
    return next(i for i, layer in enumerate(spec.layers) if layer.kind == 'globalavgpool') + 1


def cascade_features(trunk: WeightStore, head: WeightStore,
                     patches: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """
    고정 몸통 + 학습된 헤드로 패치들의 끝에서 두 번째 활성과 3클래스 확률을 평균냅니다.

    Args:
        trunk: 고정된 몸통 가중치
        head: 3클래스 헤드 가중치
        patches: (C,H,W) 패치 목록

    Returns:
        (특징 벡터, 클래스 확률 3개)

    Raises:
        DataError: 패치가 없는 경우
    """
    if len(patches) == 0:
        raise DataError("캐스케이드 특징을 계산할 패치가 없습니다")
    if head.spec.output_channels != 3:
        raise ShapeError(f"캐스케이드 헤드는 3클래스여야 합니다: {head.spec.output_channels}")
    split = head_penultimate_index(head.spec)
    rest = head.slice(NetworkSpec(f"{head.spec.name}_tail", head.spec.layers[split:]), split)
    features, probs = [], []
    for patch in patches:
        trunk_out = forward(trunk, patch)
        penultimate = forward(head, trunk_out, stop=split)
        logits = forward(rest, penultimate, stop=logits_stop(rest.spec))
        features.append(penultimate.reshape(-1))
        probs.append(softmax_channels(logits).reshape(-1))
    return np.mean(features, axis=0), np.mean(probs, axis=0)


def deep_feature(trunk: WeightStore, crop: np.ndarray, length: int) -> np.ndarray:
    """
    잘라낸 패치의 몸통 활성을 펼쳐 길이 length로 0 채움/절단합니다.

    Args:
        trunk: 유사분열 검출기 몸통
        crop: (C,H,W)
        length: 목표 길이

    Returns:
        (length,) 벡터
    """
    flat = forward(trunk, crop).reshape(-1)
    out = np.zeros(length)
    n = min(length, flat.size)
    out[:n] = flat[:n]
    return out


def image_to_tensor(data: np.ndarray) -> np.ndarray:
    """(H,W,C) uint8 → (C,H,W) float64, [0,1] 범위."""
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64).transpose(2, 0, 1) / 255.0)
