# -*- coding: utf-8 -*-
"""
schemas.py
- 단계별 설정 모델 정의 (pydantic)
- 모든 기본값은 이 파일 한 곳에서 관리하고 docs/CONFIG_REFERENCE.md에 정리한다
"""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# 합성 다각형 반경의 조화 성분 진폭과 그 최대 편차 (2~4차 합)
BLOB_ROUGHNESS = 0.12
BLOB_SPREAD = BLOB_ROUGHNESS * (1 / 2 + 1 / 3 + 1 / 4)


class _Section(BaseModel):
    """알 수 없는 키를 허용하지 않는 설정 섹션 기본 클래스"""

    model_config = ConfigDict(extra='forbid', frozen=True)


class SynthConfig(_Section):
    """합성 슬라이드 생성 설정"""

    seed: int = Field(7, description="코퍼스 난수 시드 (최상위 seed로 덮어씀)")
    slide_count: int = Field(60, ge=1, description="평가용 슬라이드 수")
    aux_slide_count: int = Field(12, ge=0, description="검출기 학습용 보조 슬라이드 수")
    level0_size: int = Field(4032, description="레벨 0(40x) 한 변 픽셀 수")
    levels: Dict[str, int] = Field(
        default_factory=lambda: {"40x": 1, "10x": 4},
        description="배율 이름 → 다운샘플 배수",
    )
    tissue_radius_fraction: Tuple[float, float] = Field((0.32, 0.42), description="조직 반경 범위 (한 변 대비)")
    tumor_count: Tuple[int, int] = Field((1, 3), description="슬라이드당 종양 개수 범위")
    tumor_radius_fraction: Tuple[float, float] = Field((0.08, 0.14), description="종양 반경 범위 (한 변 대비)")
    mitosis_rate: float = Field(2.0, ge=0.0, description="종양 10^4 px^2당 평균 유사분열 수")
    grade_thresholds: Tuple[float, float] = Field((4.0 / 3.0, 8.0 / 3.0), description="밀도 → 등급 경계")
    score_a: float = Field(0.5, description="분자 점수 기울기")
    score_b: float = Field(1.0, description="분자 점수 절편")
    score_noise: float = Field(0.1, ge=0.0, description="분자 점수 가우시안 잡음 표준편차")
    nuclei_density: float = Field(3.0, ge=0.0, description="정상 조직 10^4 px^2당 핵 수")
    tumor_nuclei_density: float = Field(25.0, ge=0.0, description="종양 10^4 px^2당 핵 수")
    nucleus_radius: Tuple[float, float] = Field((2.5, 4.0), description="정상 핵 반경 범위 (px)")
    mitosis_radius: Tuple[float, float] = Field((4.5, 6.5), description="유사분열 반경 범위 (px)")
    mitosis_min_separation: float = Field(40.0, ge=0.0, description="유사분열 간 최소 간격 (px)")
    fringe_scale: float = Field(0.25, gt=0.0, description="경계 가중치 감쇠 길이 (종양 반경 대비)")
    stain_cast: float = Field(0.06, ge=0.0, description="슬라이드별 채널 색조 편차")
    noise: float = Field(6.0, ge=0.0, description="픽셀 잡음 표준편차")
    aux_annotation_fraction: float = Field(0.7, gt=0.0, le=1.0, description="보조 슬라이드 종양 주석 비율")
    max_attempts: int = Field(200, ge=1, description="기하 배치 재시도 한도")

    @model_validator(mode='after')
    def _check_geometry(self) -> 'SynthConfig':
        if self.levels.get("40x") != 1:
            raise ValueError("levels['40x']는 1이어야 합니다")
        if "10x" not in self.levels:
            raise ValueError("levels에 '10x'가 필요합니다")
        for name, factor in self.levels.items():
            if factor < 1 or self.level0_size % (16 * factor) != 0:
                raise ValueError(f"level0_size는 16×{factor}의 배수여야 합니다 ({name})")
        if self.tumor_count[0] < 1 or self.tumor_count[0] > self.tumor_count[1]:
            raise ValueError("tumor_count 범위가 잘못되었습니다")
        for name in ('tissue_radius_fraction', 'tumor_radius_fraction'):
            low, high = getattr(self, name)
            if not 0.0 < low <= high:
                raise ValueError(f"{name} 범위가 잘못되었습니다: {(low, high)}")
        # 가장 작은 종양이 가장 좁은 조직 안에 들어가야 함
        tumor_extent = self.tumor_radius_fraction[0] * (1 + BLOB_SPREAD)
        tissue_inner = 0.95 * self.tissue_radius_fraction[0] * (1 - BLOB_SPREAD)
        if tumor_extent >= tissue_inner:
            raise ValueError(
                f"최소 종양 반경이 조직 안에 들어가지 않습니다: {tumor_extent:.3f} ≥ {tissue_inner:.3f}"
            )
        return self


class PreprocessConfig(_Section):
    """염색 표준화 및 조직 마스크 설정"""

    mask_level: str = Field("10x", description="조직 마스크를 계산할 배율")
    min_area: int = Field(256, ge=1, description="제거할 소형 성분 면적 기준 (px)")
    dilation_iterations: int = Field(2, ge=0, description="3×3 팽창 반복 횟수")
    connectivity: Literal[4, 8] = Field(4, description="연결 성분 연결성")
    plane: Literal["saturation", "value"] = Field("saturation", description="Otsu를 적용할 HSV 평면")
    percentiles: Tuple[float, float] = Field((1.0, 99.0), description="광학 밀도 앵커 백분위")
    template: Optional[Dict[str, List[float]]] = Field(
        None, description="고정 템플릿 앵커 {'low': [r,g,b], 'high': [r,g,b]}; 없으면 기준 슬라이드 사용"
    )


class NetworkConfig(_Section):
    """네트워크 구조 설정"""

    profile: Literal["desk", "full"] = Field("desk", description="특징 폭 프리셋")
    tumor_architecture: Literal["locnet_mini", "locnet_mini_valid"] = Field(
        "locnet_mini", description="종양 검출기 구조 (valid = 패딩 없는 변형)"
    )
    mitosis_width: int = Field(1, ge=1, description="MitosNet-mini 채널 배수")
    cascade_width: Optional[int] = Field(None, description="캐스케이드 특징 폭 (None이면 프리셋)")
    deep_feature_length: Optional[int] = Field(None, description="유사분열 심층 특징 길이 (None이면 프리셋)")
    deep_crop: int = Field(63, ge=16, description="유사분열 주변 잘라낼 패치 크기")
    chunk_size: int = Field(32, ge=1, description="기울기 계산 청크 크기 (jobs와 무관)")

    @property
    def resolved_cascade_width(self) -> int:
        if self.cascade_width is not None:
            return self.cascade_width
        return 1024 if self.profile == "full" else 64

    @property
    def resolved_deep_length(self) -> int:
        if self.deep_feature_length is not None:
            return self.deep_feature_length
        return 4096 if self.profile == "full" else 256


class TrainConfig(_Section):
    """2단계 능동 학습 설정"""

    lr: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    epochs: int = Field(8, ge=1)
    batch_size: int = Field(32, ge=1)
    mining_confidence: float = Field(0.95, description="2단계 채굴 신뢰도 τ")
    seed: int = Field(7)
    neg_ratio: float = Field(3.0, ge=0.0, description="양성 대비 음성 샘플 비율")
    match_radius: float = Field(8.0, gt=0.0, description="핵-주석 매칭 반경 (40x px)")
    nuclei_area: Tuple[int, int] = Field((20, 2000), description="핵 후보 면적 범위 (px)")
    context_cells: int = Field(1, ge=0, description="학습 입력 주변 문맥 셀 수")
    max_positives_per_slide: int = Field(150, ge=0, description="슬라이드당 양성 상한 (0 = 제한 없음)")
    validation_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    simulate_review: bool = Field(True, description="합성 정답으로 병리 검토 보정 파일 생성")
    review_radius: float = Field(8.0, gt=0.0)
    cascade_epochs: int = Field(6, ge=1)
    cascade_lr: float = Field(0.01, gt=0.0)
    cascade_patches_per_slide: int = Field(4, ge=1)
    mitosis_jitter_copies: int = Field(
        4, ge=0, description="유사분열 양성마다 중심을 셀 안에서 무작위로 옮긴 추가 표본 수"
    )
    background_negatives: float = Field(
        1.0, ge=0.0, description="유사분열 양성 대비 핵 없는 조직 위치 음성 비율"
    )

    @field_validator('mining_confidence')
    @classmethod
    def _check_tau(cls, value: float) -> float:
        if not 0.5 < value < 1.0:
            raise ValueError("mining_confidence는 (0.5, 1) 범위여야 합니다")
        return value


class HeatmapConfig(_Section):
    """히트맵 생성 및 영역 추출 설정"""

    mode: Literal["sliding", "fcn"] = Field("fcn")
    tile_size: int = Field(1008, ge=16)
    tumor_level: str = Field("10x")
    mitosis_level: str = Field("40x")
    tumor_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    mitosis_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    coverage_threshold: float = Field(0.5, ge=0.0, le=1.0)
    fringe_patch_count: int = Field(50, ge=1)
    patch_size: int = Field(1008, ge=16)
    match_radius_cells: float = Field(2.0, gt=0.0)
    gate_dilation_cells: int = Field(1, ge=0, description="유사분열 검출점 종양 게이트 팽창 셀 수")


class FeatureConfig(_Section):
    """특징 추출 설정"""

    grid_size: int = Field(16, ge=2)
    bof_clusters: int = Field(200, ge=1)
    kmeans_max_iter: int = Field(300, ge=1)
    ripley_radii: Tuple[float, float, float] = Field((0.05, 0.1, 0.2), description="조직 크기 대비 반경")
    mitosis_match_radius: float = Field(12.0, gt=0.0, description="검출점-핵 매칭 반경 (px)")
    standardize_deep: bool = Field(True)


class PredictConfig(_Section):
    """최종 예측 모델 및 평가 설정"""

    folds: int = Field(5, ge=2)
    classifier_lambda: float = Field(1.0, gt=0.0)
    regressor_lambda: float = Field(1.0, gt=0.0)
    max_iter: int = Field(10000, ge=1)
    tol: float = Field(1e-6, gt=0.0)
    significance: float = Field(0.005, gt=0.0, lt=1.0)


class PipelineConfig(_Section):
    """전체 파이프라인 설정"""

    seed: int = Field(7)
    jobs: int = Field(1, ge=1)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    heatmap: HeatmapConfig = Field(default_factory=HeatmapConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    predict: PredictConfig = Field(default_factory=PredictConfig)
