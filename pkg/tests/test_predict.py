# -*- coding: utf-8 -*-
"""분류기 / 회귀 / 평가 지표 / 교차검증 테스트"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.errors import DataError, MetricError
from services import predict as pred


def _pair_count_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# ==================== AUC ====================
@settings(max_examples=80, deadline=None)
@given(data=st.data())
def test_auc_matches_pair_counting(data):
    n = data.draw(st.integers(2, 30))
    labels = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
    if len(np.unique(labels)) < 2:
        labels[0], labels[1] = 0, 1
    scores = np.array(data.draw(st.lists(st.integers(0, 5), min_size=n, max_size=n)), dtype=np.float64)

    _, value = pred.roc_auc(scores, labels)

    assert value == pytest.approx(_pair_count_auc(scores, labels), abs=1e-12)


def test_auc_invariant_under_monotone_transform(rng):
    scores = rng.normal(size=40)
    labels = (rng.uniform(size=40) < 0.5).astype(int)
    labels[:2] = [0, 1]

    assert pred.roc_auc(np.exp(3 * scores), labels)[1] == pytest.approx(pred.roc_auc(scores, labels)[1])


def test_auc_perfect_and_single_class():
    points, value = pred.roc_auc(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1]))

    assert value == 1.0
    assert list(points.columns) == ['threshold', 'fpr', 'tpr']
    with pytest.raises(MetricError):
        pred.roc_auc(np.array([0.1, 0.2]), np.array([1, 1]))


def test_micro_average_pools_one_vs_rest_pairs():
    probs = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])

    _, value = pred.micro_average_auroc(probs, np.array([0, 1, 2]))

    assert value == 1.0


# ==================== 지표 ====================
def test_wilson_interval_reference_value():
    low, high = pred.wilson_interval(360, 500)

    assert low == pytest.approx(0.679, abs=0.005)
    assert high == pytest.approx(0.758, abs=0.005)


@pytest.mark.parametrize('successes, total', [(0, 10), (10, 10), (3, 7)])
def test_wilson_interval_stays_in_unit_range(successes, total):
    low, high = pred.wilson_interval(successes, total)

    assert 0.0 <= low <= successes / total <= high <= 1.0


def test_classification_metrics_missing_class_counts_zero():
    metrics = pred.classification_metrics(np.array([0, 0, 1, 1]), np.array([0, 0, 1, 1]))

    assert metrics['accuracy'] == 1.0
    assert metrics['macro_f1'] == pytest.approx(2 / 3)
    assert len(metrics['accuracy_ci']) == 2


def test_spearman_is_pearson_of_mid_ranks():
    predicted = np.array([1.0, 2.0, 2.0, 5.0, 3.0, 8.0])
    truth = np.array([2.0, 1.0, 4.0, 4.0, 6.0, 7.0])

    result = pred.correlations(predicted, truth)

    ranks_p = np.array([1, 2.5, 2.5, 5, 4, 6])
    ranks_t = np.array([2, 1, 3.5, 3.5, 5, 6])
    assert result['spearman_rho'] == pytest.approx(np.corrcoef(ranks_p, ranks_t)[0, 1])
    assert result['mse'] == pytest.approx(np.mean((predicted - truth) ** 2))
    assert 0.0 < result['spearman_p'] < 1.0


@pytest.mark.parametrize('predicted, truth', [
    (np.array([1.0, 1.0, 1.0]), np.array([1.0, 2.0, 3.0])),
    (np.array([1.0, 2.0]), np.array([1.0, 2.0])),
])
def test_correlations_undefined_cases(predicted, truth):
    with pytest.raises(MetricError):
        pred.correlations(predicted, truth)


def test_biomarker_ranking_orders_by_p_value(rng):
    n = 40
    signal = rng.normal(size=n)
    scores = 2.0 * signal + rng.normal(0, 0.1, size=n)
    features = np.column_stack([rng.normal(size=n), signal, np.ones(n)])

    table = pred.biomarker_ranking(features, scores, ['noise', 'signal', 'flat'], significance=0.005)

    assert table.loc[0, 'feature'] == 'signal' and bool(table.loc[0, 'significant'])
    flat = table[table['feature'] == 'flat'].iloc[0]
    assert bool(flat['constant']) and not bool(flat['significant']) and flat['p_value'] == 1.0


# ==================== 모델 ====================
def test_ridge_matches_normal_equations(rng):
    x = rng.normal(size=(30, 4))
    y = x @ np.array([1.0, -2.0, 0.5, 0.0]) + 3.0 + rng.normal(0, 0.1, size=30)

    model = pred.fit_regressor(x, y, lam=2.0)

    xc, yc = x - x.mean(axis=0), y - y.mean()
    expected = np.linalg.solve(xc.T @ xc + 2.0 * np.eye(4), xc.T @ yc)
    assert np.allclose(model.coef, expected)
    assert model.intercept == pytest.approx(y.mean() - x.mean(axis=0) @ expected)


def test_ridge_needs_two_samples():
    with pytest.raises(DataError):
        pred.fit_regressor(np.ones((1, 2)), np.ones(1))


def test_classifier_objective_gradient(rng):
    features = rng.normal(size=(12, 3))
    onehot = np.eye(3)[rng.integers(0, 3, size=12)]
    theta = rng.normal(size=3 * 3 + 3)

    _, grad = pred.classifier_objective(theta, features, onehot, lam=0.7)

    eps = 1e-6
    for index in range(theta.size):
        step = np.zeros_like(theta)
        step[index] = eps
        numeric = (pred.classifier_objective(theta + step, features, onehot, 0.7)[0]
                   - pred.classifier_objective(theta - step, features, onehot, 0.7)[0]) / (2 * eps)
        assert grad[index] == pytest.approx(numeric, abs=1e-7)


def test_classifier_separates_grades(rng):
    centers = np.array([[-3.0, 0.0], [0.0, 3.0], [3.0, 0.0]])
    grades = np.repeat([0, 1, 2], 15)
    features = centers[grades] + rng.normal(0, 0.3, size=(45, 2))

    model = pred.fit_classifier(features, grades, lam=0.1)

    assert np.mean(model.predict(features) == grades) > 0.95
    assert np.allclose(model.predict_probs(features).sum(axis=1), 1.0)
    with pytest.raises(MetricError):
        pred.fit_classifier(features, np.zeros(45, dtype=int))


# ==================== 교차검증 ====================
def test_assign_folds_stratifies_and_checks_counts():
    grades = np.repeat([0, 1, 2], 5)

    folds = pred.assign_folds(grades, 15, 5, seed=1)

    assert sorted(np.bincount(folds).tolist()) == [3] * 5
    for fold in range(5):
        assert sorted(grades[folds == fold].tolist()) == [0, 1, 2]
    with pytest.raises(MetricError):
        pred.assign_folds(np.array([0, 0, 0, 1, 1, 2]), 6, 3, seed=1)
    with pytest.raises(MetricError):
        pred.assign_folds(None, 2, 3, seed=1)


def test_cross_validate_fits_only_on_training_folds(rng):
    n = 30
    grades = np.repeat([0, 1, 2], 10)
    matrix = grades[:, None] + rng.normal(0, 0.2, size=(n, 3))
    scores = grades * 1.5 + rng.normal(0, 0.1, size=n)
    seen = []

    def fold_features(train, test):
        seen.append((set(train.tolist()), set(test.tolist())))
        return matrix[train], matrix[test]

    report = pred.cross_validate([f"s{i:02d}" for i in range(n)], grades, scores, fold_features, folds=5, seed=3)

    assert len(seen) == 5
    assert all(not (train & test) for train, test in seen)
    assert set().union(*(test for _, test in seen)) == set(range(n))
    assert report.classification['accuracy'] > 0.9
    assert report.micro_auroc > 0.9
    assert report.regression['spearman_rho'] > 0.8
    assert {'slide', 'fold', 'grade', 'predicted_grade', 'prob_0', 'score', 'predicted_score'} <= set(report.predictions)
    assert set(report.roc_points) == {'0', '1', '2', 'micro'}
    assert report.to_dict()['folds'] == report.predictions['fold'].tolist()


def test_cross_validate_is_identical_across_job_counts(rng):
    n = 20
    grades = np.repeat([0, 1], 10)
    matrix = rng.normal(size=(n, 4)) + grades[:, None]

    def fold_features(train, test):
        return matrix[train], matrix[test]

    ids = [f"s{i}" for i in range(n)]
    single = pred.cross_validate(ids, grades, None, fold_features, folds=4, seed=0, jobs=1)
    multi = pred.cross_validate(ids, grades, None, fold_features, folds=4, seed=0, jobs=4)

    assert single.predictions.equals(multi.predictions)
    assert single.regression == {}
