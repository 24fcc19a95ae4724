#!/usr/bin/env python3
"""
靜態統計模型測試

測試 GMM 擬合、靜態機率、一元勢能與重新擬合
"""

import math

import numpy as np
import pytest

from utils.errors import InsufficientDataError
from utils.gaussian_map import DYNAMIC, GaussianMap, MotionStats, TaggedGaussian
from utils.motion_stats import (StatComponent, StaticStatModel, component_density,
                                fit_static_model, refit_static_model, static_probability,
                                static_probability_batch, unary_from_probability,
                                unary_potential)

MU = np.array([0.8, 0.02, 6.0, 0.5])
SIGMA = np.array([0.3, 0.01, 2.0, 0.2])


def _stats(values) -> MotionStats:
    return MotionStats(mean_reproj_error=float(values[0]), depth_variation=float(values[1]),
                       observation_count=float(values[2]), mean_epipolar_distance=float(values[3]))


def _samples(rng, count, shift=0.0):
    return MU + SIGMA * (rng.normal(size=(count, 4)) + shift)


def test_fit_requires_enough_samples():
    """少於 8 筆樣本時拒絕擬合"""
    print("=" * 60)
    print("📊 靜態模型擬合")
    print("=" * 60)

    rng = np.random.default_rng(0)
    with pytest.raises(InsufficientDataError):
        fit_static_model([_stats(v) for v in _samples(rng, 7)])
    model = fit_static_model([_stats(v) for v in _samples(rng, 8)])
    assert model.sample_count == 8
    assert math.isclose(sum(model.weights), 1.0)
    print(f"   模型: {model.to_dict()}")


def test_fit_matches_sample_moments():
    rng = np.random.default_rng(1)
    values = _samples(rng, 500)
    model = fit_static_model([_stats(v) for v in values])
    assert np.allclose(model.means, values.mean(axis=0))
    assert np.allclose(model.variances, values.var(axis=0, ddof=1))


def test_variance_floor_applies_to_constant_statistic():
    values = [[0.5, 0.0, 3.0, float(i)] for i in range(10)]
    model = fit_static_model([_stats(v) for v in values], variance_floor=1e-6)
    assert model.variances[1] == 1e-6
    assert model.variances[3] > 1e-6


def test_component_density():
    model = StaticStatModel(tuple(StatComponent(m, s ** 2) for m, s in zip(MU, SIGMA)))
    for k in range(4):
        assert component_density(MU[k], k, model) == pytest.approx(1.0)
        assert component_density(MU[k] + SIGMA[k], k, model) == pytest.approx(math.exp(-0.5))
    assert 0.0 < component_density(MU[0] + 30 * SIGMA[0], 0, model) < 1e-100


def test_static_probability_peaks_at_means():
    model = StaticStatModel(tuple(StatComponent(m, s ** 2) for m, s in zip(MU, SIGMA)))
    assert static_probability(_stats(MU), model) == pytest.approx(1.0)
    far = static_probability(_stats(MU + 10 * SIGMA), model)
    assert 0.0 <= far < 1e-10


def test_batch_matches_scalar():
    rng = np.random.default_rng(2)
    model = StaticStatModel(tuple(StatComponent(m, s ** 2) for m, s in zip(MU, SIGMA)))
    values = _samples(rng, 20, shift=1.0)
    batch = static_probability_batch(values, model)
    single = [static_probability(_stats(v), model) for v in values]
    assert np.allclose(batch, single)


def test_unary_values():
    unary = unary_from_probability(np.array([1.0, 0.5]), epsilon=1e-6)
    assert unary[0, 0] == pytest.approx(0.0)
    assert unary[0, 1] == pytest.approx(-math.log(1e-6))
    assert unary[1, 0] == pytest.approx(math.log(2.0))
    assert unary[1, 1] == pytest.approx(-math.log(0.5 + 1e-6))
    assert np.all(unary >= 0)


def test_unary_labeling_accuracy():
    """動態統計偏移 3σ 時，只靠一元勢能的正確率 ≥ 90%"""
    print("\n" + "=" * 60)
    print("🎯 一元勢能分類能力")
    print("=" * 60)

    rng = np.random.default_rng(3)
    model = fit_static_model([_stats(v) for v in _samples(rng, 400)])
    static = _samples(rng, 1000)
    dynamic = _samples(rng, 1000, shift=3.0)
    truth = np.r_[np.zeros(1000), np.ones(1000)]
    unary = unary_from_probability(static_probability_batch(np.vstack([static, dynamic]), model))
    predicted = (unary[:, 1] < unary[:, 0]).astype(int)
    accuracy = float(np.mean(predicted == truth))
    print(f"   正確率: {accuracy:.3f}")
    assert accuracy >= 0.9


def test_unary_potential_wraps_probability():
    model = StaticStatModel(tuple(StatComponent(m, s ** 2) for m, s in zip(MU, SIGMA)))
    stats = _stats(MU + SIGMA)
    p = static_probability(stats, model)
    assert np.allclose(unary_potential(stats, model), unary_from_probability(p))


def _map_with_stats(values, labels):
    gmap = GaussianMap()
    for i, (v, label) in enumerate(zip(values, labels)):
        gmap.add(TaggedGaussian(i, np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]), np.ones(3) * 0.01,
                                0.5, np.full(3, 0.5), label=label, stats=_stats(v)))
    return gmap


def test_refit_uses_static_gaussians_only():
    rng = np.random.default_rng(4)
    previous = fit_static_model([_stats(v) for v in _samples(rng, 50)])
    static = _samples(rng, 30, shift=0.5)
    dynamic = _samples(rng, 30, shift=4.0)
    gmap = _map_with_stats(np.vstack([static, dynamic]), [0] * 30 + [DYNAMIC] * 30)
    refit = refit_static_model(gmap, previous, min_observations=0)
    assert refit.sample_count == 30
    assert np.allclose(refit.means, static.mean(axis=0))


def test_refit_falls_back_when_too_few_samples():
    rng = np.random.default_rng(5)
    previous = fit_static_model([_stats(v) for v in _samples(rng, 20)])
    gmap = _map_with_stats(_samples(rng, 5), [0] * 5)
    assert refit_static_model(gmap, previous, min_observations=0) is previous


if __name__ == '__main__':
    try:
        test_fit_requires_enough_samples()
        test_fit_matches_sample_moments()
        test_variance_floor_applies_to_constant_statistic()
        test_component_density()
        test_static_probability_peaks_at_means()
        test_batch_matches_scalar()
        test_unary_values()
        test_unary_labeling_accuracy()
        test_unary_potential_wraps_probability()
        test_refit_uses_static_gaussians_only()
        test_refit_falls_back_when_too_few_samples()

        print("\n\n" + "=" * 60)
        print("✅ 所有測試完成")
        print("=" * 60)

    except Exception as e:
        print(f"\n❌ 測試失敗: {str(e)}")
        import traceback
        traceback.print_exc()
