#!/usr/bin/env python3
"""
CRF 動態分割測試

測試 Potts / 核函數、Gibbs 能量、平均場推論（對照窮舉最小值）與時間視窗刪除
"""

import itertools
import math

import numpy as np
import pytest

from utils.crf_segmentation import (CrfFeatures, CrfProblem, apply_labels, apply_retention,
                                    build_problem, data_driven_bandwidths, free_energy,
                                    gibbs_energy, kernel_appearance, kernel_position,
                                    kernel_row, mean_field_infer, pairwise_potential, potts,
                                    window_score, write_label_dump)
from utils.gaussian_map import DYNAMIC, STATIC, GaussianMap, MotionStats, TaggedGaussian
from utils.motion_stats import (fit_static_model, static_probability_batch,
                                unary_from_probability)


def _random_problem(rng, n):
    p = rng.uniform(0.05, 0.95, size=n)
    alpha = rng.uniform(0.0, 3.0, size=n)
    gamma = rng.integers(1, 20, size=n).astype(float)
    positions = rng.uniform(-1.0, 1.0, size=(n, 3))
    pixels = rng.uniform(0.0, 100.0, size=(n, 2))
    bandwidths = data_driven_bandwidths(alpha, gamma, positions, pixels)
    weights = (0.5 / max(n - 1, 1), 0.5 / max(n - 1, 1))
    return CrfProblem(np.arange(n), unary_from_probability(p), alpha, gamma, positions, pixels,
                      bandwidths, weights)


def _exact_minimum(problem):
    n = len(problem)
    return min(gibbs_energy(labels, problem) for labels in itertools.product((0, 1), repeat=n))


def test_potts_and_kernels():
    """Potts 與核函數基本性質"""
    print("=" * 60)
    print("🔗 Potts 與核函數")
    print("=" * 60)

    assert potts(0, 0) == 0 and potts(1, 1) == 0
    assert potts(0, 1) == 1 and potts(1, 0) == 1

    f = CrfFeatures(1.0, 5.0, np.zeros(3), np.zeros(2))
    g = CrfFeatures(2.0, 7.0, np.array([1.0, 0.0, 0.0]), np.array([3.0, 4.0]))
    assert kernel_appearance(f, f, 1.0, 1.0) == 1.0
    assert kernel_position(f, f, 1.0, 1.0) == 1.0
    assert kernel_appearance(f, g, 1.0, 2.0) == pytest.approx(math.exp(-0.5 - 0.5))
    # 位置核使用未平方的距離
    assert kernel_position(f, g, 1.0, 2.0) == pytest.approx(math.exp(-1.0 / 2.0 - 5.0 / 8.0))
    assert kernel_appearance(f, g, 1.0, 2.0) == kernel_appearance(g, f, 1.0, 2.0)


def test_pairwise_matches_kernel_row():
    rng = np.random.default_rng(0)
    problem = _random_problem(rng, 6)
    labels = [0, 1, 0, 1, 1, 0]
    row = kernel_row(problem, 0)
    assert row[0] == 0.0
    for j in range(1, 6):
        expected = row[j] if labels[j] != labels[0] else 0.0
        assert pairwise_potential(0, j, labels, problem) == pytest.approx(expected)


def test_gibbs_energy_two_nodes():
    unaries = np.array([[0.1, 2.0], [1.5, 0.2]])
    problem = CrfProblem(np.arange(2), unaries, np.zeros(2), np.zeros(2), np.zeros((2, 3)),
                         np.zeros((2, 2)), (1.0, 1.0, 1.0, 1.0), (0.5, 0.25))
    assert gibbs_energy([0, 0], problem) == pytest.approx(1.6)
    # 不同標籤時加上 ω¹ + ω²（特徵相同，兩個核都是 1）
    assert gibbs_energy([0, 1], problem) == pytest.approx(0.3 + 0.75)


def test_problem_rejects_bad_inputs():
    with pytest.raises(ValueError):
        CrfProblem(np.arange(1), np.array([[-1.0, 0.0]]), np.zeros(1), np.zeros(1),
                   np.zeros((1, 3)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        CrfProblem(np.arange(1), np.array([[1.0, 0.0]]), np.zeros(1), np.zeros(1),
                   np.zeros((1, 3)), np.zeros((1, 2)), (1.0, 0.0, 1.0, 1.0))


def test_free_energy_non_increasing():
    """每次迭代的自由能單調不增"""
    rng = np.random.default_rng(1)
    for _ in range(20):
        problem = _random_problem(rng, int(rng.integers(2, 13)))
        result = mean_field_infer(problem, iterations=10, tolerance=0.0)
        energies = result.free_energy
        assert len(energies) == result.iterations + 1
        for before, after in zip(energies, energies[1:]):
            assert after <= before + 1e-9


def test_mean_field_matches_exhaustive_minimum():
    """100 組隨機問題中至少 90 組的能量在窮舉最小值的 5% 以內"""
    print("\n" + "=" * 60)
    print("🧮 平均場 vs 窮舉最小值")
    print("=" * 60)

    rng = np.random.default_rng(2)
    good = 0
    for _ in range(100):
        problem = _random_problem(rng, int(rng.integers(2, 13)))
        result = mean_field_infer(problem)
        energy = gibbs_energy(result.labels, problem)
        exact = _exact_minimum(problem)
        if energy <= exact + 0.05 * abs(exact) + 1e-9:
            good += 1
    print(f"   符合: {good} / 100")
    assert good >= 90


def test_tie_is_static():
    problem = CrfProblem(np.arange(1), np.array([[0.7, 0.7]]), np.zeros(1), np.zeros(1),
                         np.zeros((1, 3)), np.zeros((1, 2)))
    result = mean_field_infer(problem, iterations=1)
    assert result.marginals.q[0] == pytest.approx(0.5)
    assert result.labels[0] == STATIC


def test_smoothing_keeps_clustered_movers():
    """空間聚集的移動物體：加入 CRF 平滑後正確率不下降"""
    rng = np.random.default_rng(3)
    mu = np.array([0.8, 0.02, 6.0, 0.5])
    sigma = np.array([0.3, 0.01, 2.0, 0.2])
    fit = [MotionStats(*v) for v in mu + sigma * rng.normal(size=(200, 4))]
    model = fit_static_model(fit)

    n = 100
    static = mu + sigma * rng.normal(size=(n, 4))
    dynamic = mu + sigma * (rng.normal(size=(n, 4)) + 3.0)
    values = np.vstack([static, dynamic])
    truth = np.r_[np.zeros(n, dtype=int), np.ones(n, dtype=int)]
    positions = np.vstack([rng.uniform(0.0, 1.0, size=(n, 3)),
                           5.0 + rng.uniform(-0.1, 0.1, size=(n, 3))])
    pixels = np.vstack([rng.uniform(0.0, 100.0, size=(n, 2)),
                        150.0 + rng.uniform(-5.0, 5.0, size=(n, 2))])
    unaries = unary_from_probability(static_probability_batch(values, model))
    alpha, gamma = values[:, 0], values[:, 2]
    w = 1.0 / (2 * n - 1)
    problem = CrfProblem(np.arange(2 * n), unaries, alpha, gamma, positions, pixels,
                         data_driven_bandwidths(alpha, gamma, positions, pixels), (w, w))

    unary_only = (unaries[:, 1] < unaries[:, 0]).astype(int)
    smoothed = mean_field_infer(problem).labels
    acc_unary = float(np.mean(unary_only == truth))
    acc_crf = float(np.mean(smoothed == truth))
    print(f"   正確率：一元 {acc_unary:.3f}，CRF {acc_crf:.3f}")
    assert acc_crf >= acc_unary


def test_window_score():
    assert window_score([0, 1, 1, 1], 10) == pytest.approx(0.75)
    assert window_score([0] * 5 + [1] * 11, 10) == 1.0
    with pytest.raises(ValueError):
        window_score([], 10)


def _gaussian(gid, label=STATIC, history=()):
    return TaggedGaussian(gid, np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]), np.full(3, 0.01),
                          0.5, np.full(3, 0.5), label=label, label_history=list(history))


def test_retention_deletes_full_dynamic_window():
    """整個視窗皆為動態才刪除；視窗內一次靜態即可保留（門檻 0.95）"""
    print("\n" + "=" * 60)
    print("⏳ 時間視窗刪除")
    print("=" * 60)

    gmap = GaussianMap(window_size=10)
    gmap.add(_gaussian(1, DYNAMIC, [DYNAMIC] * 11))
    gmap.add(_gaussian(2, DYNAMIC, [DYNAMIC] * 5 + [STATIC] + [DYNAMIC] * 5))
    gmap.add(_gaussian(3, DYNAMIC, [DYNAMIC] * 6))
    gmap.add(_gaussian(4, STATIC, [STATIC] * 11))
    deleted = apply_retention(gmap, 10, 0.95)
    assert deleted == [1]
    assert 1 in gmap.deleted_ids
    assert gmap.ids() == [2, 3, 4]


def test_retention_threshold_counts_fraction():
    gmap = GaussianMap(window_size=10)
    gmap.add(_gaussian(1, DYNAMIC, [STATIC] + [DYNAMIC] * 10))
    assert apply_retention(gmap, 10, 0.9) == [1]


def _map_for_problem(count):
    gmap = GaussianMap(window_size=10)
    rng = np.random.default_rng(4)
    for gid in range(count):
        g = _gaussian(gid)
        g.position = rng.uniform(-1.0, 1.0, size=3)
        g.last_pixel = rng.uniform(0.0, 100.0, size=2)
        g.stats = MotionStats(float(rng.uniform(0, 2)), float(rng.uniform(0, 0.1)),
                              int(rng.integers(2, 10)), float(rng.uniform(0, 1)))
        gmap.add(g)
    # 觀測不足的 Gaussian 不納入問題
    sparse = _gaussian(count)
    sparse.last_pixel = np.zeros(2)
    sparse.stats = MotionStats(observation_count=1)
    gmap.add(sparse)
    return gmap


def test_build_problem_normalizes_weights():
    gmap = _map_for_problem(5)
    rng = np.random.default_rng(5)
    model = fit_static_model([MotionStats(*v) for v in rng.uniform(0, 2, size=(10, 4))])
    problem = build_problem(gmap, model, kernel_weights=(1.0, 2.0))
    assert list(problem.ids) == [0, 1, 2, 3, 4]
    assert problem.kernel_weights == pytest.approx((0.25, 0.5))
    literal = build_problem(gmap, model, kernel_weights=(1.0, 2.0), normalization='none')
    assert literal.kernel_weights == (1.0, 2.0)
    with pytest.raises(ValueError):
        build_problem(gmap, model, normalization='sum')


def test_apply_labels_records_history(tmp_path):
    gmap = _map_for_problem(3)
    rng = np.random.default_rng(6)
    model = fit_static_model([MotionStats(*v) for v in rng.uniform(0, 2, size=(10, 4))])
    problem = build_problem(gmap, model)
    result = mean_field_infer(problem)
    result.labels[:] = [1, 0, 1]
    dynamic, static = apply_labels(gmap, problem, result)
    assert (dynamic, static) == (2, 1)
    assert gmap.get(0).label == DYNAMIC
    assert list(gmap.get(0).label_history) == [DYNAMIC]
    # 未納入問題的 Gaussian 沿用原標籤
    assert list(gmap.get(3).label_history) == [STATIC]

    path = tmp_path / 'labels.txt'
    write_label_dump(path, problem, result)
    lines = path.read_text(encoding='utf-8').splitlines()
    assert len(lines) == 3
    gid, label, q = lines[0].split()
    assert (int(gid), int(label)) == (0, 1)
    assert 0.0 <= float(q) <= 1.0


def test_free_energy_of_hard_labels_equals_gibbs():
    rng = np.random.default_rng(7)
    problem = _random_problem(rng, 5)
    labels = np.array([0, 1, 1, 0, 1])
    assert free_energy(labels.astype(float), problem) == pytest.approx(gibbs_energy(labels, problem))


if __name__ == '__main__':
    import tempfile
    from pathlib import Path

    try:
        test_potts_and_kernels()
        test_pairwise_matches_kernel_row()
        test_gibbs_energy_two_nodes()
        test_problem_rejects_bad_inputs()
        test_free_energy_non_increasing()
        test_mean_field_matches_exhaustive_minimum()
        test_tie_is_static()
        test_smoothing_keeps_clustered_movers()
        test_window_score()
        test_retention_deletes_full_dynamic_window()
        test_retention_threshold_counts_fraction()
        test_build_problem_normalizes_weights()
        with tempfile.TemporaryDirectory() as tmp:
            test_apply_labels_records_history(Path(tmp))
        test_free_energy_of_hard_labels_equals_gibbs()

        print("\n\n" + "=" * 60)
        print("✅ 所有測試完成")
        print("=" * 60)

    except Exception as e:
        print(f"\n❌ 測試失敗: {str(e)}")
        import traceback
        traceback.print_exc()
