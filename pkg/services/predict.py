"""
최종 예측 서비스
3등급 다항 로지스틱 분류, 리지 회귀, 층화 교차검증, 평가 지표와 바이오마커 순위
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, optimize, stats
from scipy.special import log_softmax, softmax
from sklearn.metrics import accuracy_score, auc, f1_score, mean_squared_error, roc_curve
from sklearn.model_selection import KFold, StratifiedKFold

from core.errors import DataError, MetricError
from services.features import Standardizer
from utils.system_utils import SystemUtils

logger = logging.getLogger(__name__)

CLASSES = (0, 1, 2)
WILSON_Z = 1.96


# ==================== 분류기 ====================
@dataclass(frozen=True)
class LinearClassifier:
    """다항 로지스틱 회귀 (weights: (K,D), intercept: (K,))"""

    weights: np.ndarray
    intercept: np.ndarray
    iterations: int = 0

    def decision(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights.T + self.intercept

    def predict_probs(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.decision(features), axis=1)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.decision(features), axis=1)


def classifier_objective(theta: np.ndarray, features: np.ndarray, onehot: np.ndarray,
                         lam: float) -> Tuple[float, np.ndarray]:
    """
    평균 교차 엔트로피 + (λ / 2n)·‖W‖² 와 그 기울기 (절편은 벌점 제외).

    Args:
        theta: [W.ravel(), b] 펼친 파라미터
        features: (n,D)
        onehot: (n,K)
        lam: L2 계수

    Returns:
        (목적함수 값, 기울기)
    """
    n, dim = features.shape
    k = onehot.shape[1]
    weights = theta[:k * dim].reshape(k, dim)
    intercept = theta[k * dim:]
    logits = features @ weights.T + intercept
    log_probs = log_softmax(logits, axis=1)
    value = -np.sum(onehot * log_probs) / n + lam / (2 * n) * np.sum(weights ** 2)
    residual = (np.exp(log_probs) - onehot) / n
    grad_w = residual.T @ features + lam / n * weights
    grad_b = residual.sum(axis=0)
    return float(value), np.concatenate([grad_w.ravel(), grad_b])


def fit_classifier(features: np.ndarray, grades: np.ndarray, lam: float = 1.0,
                   max_iter: int = 10000, tol: float = 1e-6) -> LinearClassifier:
    """
    L-BFGS 전체 배치 최적화로 3클래스 분류기를 학습합니다.

    Args:
        features: (n,D) 표준화된 특징
        grades: (n,) 등급 0–2
        lam: L2 계수 λ
        max_iter: 최대 반복
        tol: 기울기 노름 허용치

    Returns:
        LinearClassifier

    Raises:
        MetricError: 학습 데이터에 클래스가 하나뿐인 경우
    """
    features = np.asarray(features, dtype=np.float64)
    grades = np.asarray(grades, dtype=np.int64)
    if len(np.unique(grades)) < 2:
        raise MetricError("분류기 학습 데이터에 클래스가 하나뿐입니다", 'predict')
    k = len(CLASSES)
    onehot = np.eye(k)[grades]
    theta0 = np.zeros(k * features.shape[1] + k)
    result = optimize.minimize(classifier_objective, theta0, args=(features, onehot, lam), jac=True,
                               method='L-BFGS-B', options={'maxiter': max_iter, 'gtol': tol, 'ftol': 0.0})
    if not result.success:
        logger.warning(f"⚠️ 분류기 최적화 미수렴: {result.message}")
    dim = features.shape[1]
    return LinearClassifier(result.x[:k * dim].reshape(k, dim), result.x[k * dim:], int(result.nit))


# ==================== 회귀 ====================
@dataclass(frozen=True)
class RidgeRegressor:
    """리지 회귀 (절편은 중심화로 벌점 제외)"""

    coef: np.ndarray
    intercept: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.coef + self.intercept


def fit_regressor(features: np.ndarray, scores: np.ndarray, lam: float = 1.0) -> RidgeRegressor:
    """
    (XᵀX + λI)β = Xᵀy 정규방정식 풀이 (X, y는 중심화).

    Raises:
        DataError: 표본이 2개 미만인 경우
    """
    features = np.asarray(features, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) < 2:
        raise DataError("회귀에는 표본이 2개 이상 필요합니다", 'predict')
    x_mean, y_mean = features.mean(axis=0), scores.mean()
    xc, yc = features - x_mean, scores - y_mean
    gram = xc.T @ xc + lam * np.eye(features.shape[1])
    coef = linalg.solve(gram, xc.T @ yc, assume_a='pos')
    return RidgeRegressor(coef, float(y_mean - x_mean @ coef))


# ==================== 지표 ====================
def roc_auc(scores: np.ndarray, labels: np.ndarray) -> Tuple[pd.DataFrame, float]:
    """
    모든 임계값을 지나는 ROC 점과 사다리꼴 AUC (동점은 ½로 계산되는 순위식과 같음).

    Returns:
        (threshold/fpr/tpr 표, AUC)

    Raises:
        MetricError: 라벨이 한 종류뿐인 경우
    """
    labels = np.asarray(labels).astype(np.int64)
    if len(np.unique(labels)) < 2:
        raise MetricError("ROC에는 양성과 음성이 모두 필요합니다", 'predict')
    fpr, tpr, thresholds = roc_curve(labels, np.asarray(scores, dtype=np.float64), drop_intermediate=False)
    points = pd.DataFrame({'threshold': thresholds, 'fpr': fpr, 'tpr': tpr})
    return points, float(auc(fpr, tpr))


def micro_average_auroc(probs: np.ndarray, grades: np.ndarray) -> Tuple[pd.DataFrame, float]:
    """세 가지 일대다 문제의 (점수, 라벨) 쌍을 모두 모아 하나의 ROC로 계산합니다."""
    probs = np.asarray(probs, dtype=np.float64)
    onehot = np.eye(len(CLASSES))[np.asarray(grades, dtype=np.int64)]
    return roc_auc(probs.ravel(), onehot.ravel())


def wilson_interval(successes: int, total: int, z: float = WILSON_Z) -> Tuple[float, float]:
    """이항 비율의 Wilson 점수 구간."""
    if total <= 0:
        raise MetricError("Wilson 구간의 표본 수는 1 이상이어야 합니다", 'predict')
    p = successes / total
    denom = 1 + z ** 2 / total
    center = (p + z ** 2 / (2 * total)) / denom
    half = z * np.sqrt(p * (1 - p) / total + z ** 2 / (4 * total ** 2)) / denom
    return float(max(0.0, center - half)), float(min(1.0, center + half))


def classification_metrics(predictions: np.ndarray, grades: np.ndarray) -> Dict[str, object]:
    """
    macro-F1(없는 클래스 F1 = 0), 정확도, Wilson 95% 구간.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    grades = np.asarray(grades, dtype=np.int64)
    if len(grades) == 0:
        raise MetricError("분류 지표를 계산할 표본이 없습니다", 'predict')
    accuracy = float(accuracy_score(grades, predictions))
    correct = int(np.sum(predictions == grades))
    return {
        'macro_f1': float(f1_score(grades, predictions, labels=list(CLASSES), average='macro', zero_division=0)),
        'accuracy': accuracy,
        'accuracy_ci': list(wilson_interval(correct, len(grades))),
    }


def correlations(predicted: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    """
    MSE, Pearson r, Spearman ρ(평균 순위 Pearson)와 양측 t 검정 p값.

    Raises:
        MetricError: 어느 한쪽 분산이 0이거나 표본이 3개 미만인 경우
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if len(truth) < 3:
        raise MetricError("상관 p값에는 표본이 3개 이상 필요합니다", 'predict')
    if np.ptp(predicted) == 0 or np.ptp(truth) == 0:
        raise MetricError("분산이 0인 벡터의 상관계수는 정의되지 않습니다", 'predict')
    n = len(truth)
    pearson = float(stats.pearsonr(predicted, truth)[0])
    rho = float(np.corrcoef(stats.rankdata(predicted), stats.rankdata(truth))[0, 1])
    if abs(rho) >= 1.0:
        p_value = 0.0
    else:
        t = rho * np.sqrt((n - 2) / (1 - rho ** 2))
        p_value = float(2 * stats.t.sf(abs(t), n - 2))
    return {'mse': float(mean_squared_error(truth, predicted)), 'pearson_r': pearson,
            'spearman_rho': rho, 'spearman_p': p_value}


def biomarker_ranking(features: np.ndarray, scores: np.ndarray, names: Sequence[str],
                      significance: float = 0.005) -> pd.DataFrame:
    """
    특징별 단변량 회귀 기울기 F 검정 (F = t², F(1, n−2)). p 오름차순.

    Returns:
        feature/f_stat/p_value/significant/constant 표

    Raises:
        MetricError: 표본이 3개 미만인 경우
    """
    features = np.asarray(features, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n <= 2:
        raise MetricError("바이오마커 순위에는 표본이 3개 이상 필요합니다", 'predict')
    rows = []
    for index, name in enumerate(names):
        column = features[:, index]
        if np.ptp(column) == 0:
            rows.append((name, 0.0, 1.0, True))
            continue
        fit = stats.linregress(column, scores)
        if fit.stderr == 0:
            f_stat, p_value = float('inf'), 0.0
        else:
            f_stat = float((fit.slope / fit.stderr) ** 2)
            p_value = float(stats.f.sf(f_stat, 1, n - 2))
        rows.append((name, f_stat, p_value, False))
    table = pd.DataFrame(rows, columns=['feature', 'f_stat', 'p_value', 'constant'])
    table['significant'] = (table['p_value'] < significance) & ~table['constant']
    return table.sort_values(['p_value', 'feature'], kind='mergesort').reset_index(drop=True)


# ==================== 교차검증 ====================
FoldFeatures = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass
class MetricsReport:
    """교차검증 평가 결과"""

    seed: int
    folds: List[int]
    predictions: pd.DataFrame
    classification: Dict[str, object] = field(default_factory=dict)
    per_class_auc: Dict[str, float] = field(default_factory=dict)
    micro_auroc: Optional[float] = None
    regression: Dict[str, float] = field(default_factory=dict)
    roc_points: Dict[str, pd.DataFrame] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            'seed': self.seed,
            'folds': self.folds,
            'classification': self.classification,
            'per_class_auc': self.per_class_auc,
            'micro_auroc': self.micro_auroc,
            'regression': self.regression,
        }


def assign_folds(grades: Optional[np.ndarray], count: int, folds: int, seed: int) -> np.ndarray:
    """
    등급 층화 폴드 번호 (등급이 없으면 단순 KFold).

    Raises:
        MetricError: 어떤 등급의 슬라이드가 폴드 수보다 적은 경우
    """
    assignment = np.full(count, -1, dtype=np.int64)
    if grades is not None:
        grades = np.asarray(grades, dtype=np.int64)
        values, counts = np.unique(grades, return_counts=True)
        short = [int(v) for v, c in zip(values, counts) if c < folds]
        if short:
            raise MetricError(f"등급 {short}의 슬라이드 수가 폴드 수 {folds}보다 적습니다", 'predict')
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
        splits = splitter.split(np.zeros(count), grades)
    else:
        if count < folds:
            raise MetricError(f"슬라이드 수 {count}가 폴드 수 {folds}보다 적습니다", 'predict')
        splits = KFold(n_splits=folds, shuffle=True, random_state=seed).split(np.zeros(count))
    for fold, (_, test) in enumerate(splits):
        assignment[test] = fold
    return assignment


def cross_validate(slide_ids: Sequence[str], grades: Optional[np.ndarray], scores: Optional[np.ndarray],
                   fold_features: FoldFeatures, folds: int = 5, seed: int = 0, classifier_lambda: float = 1.0,
                   regressor_lambda: float = 1.0, max_iter: int = 10000, tol: float = 1e-6,
                   jobs: int = 1) -> MetricsReport:
    """
    층화 k-겹 교차검증. 표준화/코드북/분류기/회귀는 학습 폴드에서만 맞춥니다.

    Args:
        slide_ids: 슬라이드 ID
        grades: 등급 (없으면 분류 생략)
        scores: 분자 점수 (없으면 회귀 생략)
        fold_features: (학습 인덱스, 평가 인덱스) → (학습 특징, 평가 특징)
        folds: 폴드 수
        seed: 폴드 시드
        classifier_lambda, regressor_lambda: L2 계수
        max_iter, tol: 분류기 최적화 한도
        jobs: 폴드 병렬 작업자 수

    Returns:
        MetricsReport (폴드 외 예측을 모아 계산)
    """
    count = len(slide_ids)
    assignment = assign_folds(grades, count, folds, seed)

    def run_fold(fold: int) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
        test = np.flatnonzero(assignment == fold)
        train = np.flatnonzero(assignment != fold)
        train_x, test_x = fold_features(train, test)
        scaler = Standardizer.fit(train_x)
        train_x, test_x = scaler.transform(train_x), scaler.transform(test_x)
        probs = predicted = None
        if grades is not None:
            model = fit_classifier(train_x, grades[train], classifier_lambda, max_iter, tol)
            probs = model.predict_probs(test_x)
        if scores is not None:
            predicted = fit_regressor(train_x, scores[train], regressor_lambda).predict(test_x)
        return test, probs, predicted

    results = SystemUtils.parallel_map(run_fold, list(range(folds)), jobs)

    table = pd.DataFrame({'slide': list(slide_ids), 'fold': assignment})
    oof_probs = np.zeros((count, len(CLASSES)))
    oof_scores = np.zeros(count)
    for test, probs, predicted in results:
        if probs is not None:
            oof_probs[test] = probs
        if predicted is not None:
            oof_scores[test] = predicted

    report = MetricsReport(seed, assignment.tolist(), table)
    if grades is not None:
        predictions = np.argmax(oof_probs, axis=1)
        table['grade'] = grades
        table['predicted_grade'] = predictions
        for grade in CLASSES:
            table[f'prob_{grade}'] = oof_probs[:, grade]
        report.classification = classification_metrics(predictions, grades)
        for grade in CLASSES:
            binary = (grades == grade).astype(np.int64)
            if 0 < binary.sum() < count:
                points, value = roc_auc(oof_probs[:, grade], binary)
                report.per_class_auc[str(grade)] = value
                report.roc_points[str(grade)] = points
        points, report.micro_auroc = micro_average_auroc(oof_probs, grades)
        report.roc_points['micro'] = points
    if scores is not None:
        table['score'] = scores
        table['predicted_score'] = oof_scores
        report.regression = correlations(oof_scores, scores)
    logger.info(f"📊 교차검증 완료: {folds}겹, 슬라이드 {count}개")
    return report
