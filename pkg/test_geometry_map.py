#!/usr/bin/env python3
"""
幾何與 Tagged Gaussian 地圖測試

測試投影、位姿、軌跡，以及地圖的插入、統計累積與快照
"""

import logging
import math

import numpy as np
import pytest

from utils.errors import CheiralityError, GeometryError, UnknownGaussianError
from utils.gaussian_map import (DYNAMIC, STATIC, FrameObservations, GaussianMap, Observation,
                                compute_epipolar_distance)
from utils.geometry import (Camera, CameraPose, Trajectory, back_project, look_at, project,
                            project_points, quaternion_to_matrix, relative_pose)

CAMERA = Camera(100.0, 100.0, 50.0, 40.0, 100, 80)


def _pose(rotvec=(0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0), timestamp=0.0):
    from scipy.spatial.transform import Rotation
    return CameraPose(Rotation.from_rotvec(rotvec).as_quat(), np.array(t, dtype=float), timestamp)


def test_project_back_project_roundtrip():
    """投影後反投影回到原點"""
    print("=" * 60)
    print("📐 投影 / 反投影")
    print("=" * 60)

    pose = _pose((0.1, -0.2, 0.05), (0.3, -0.1, 0.5))
    point = np.array([0.4, -0.3, 3.0])
    pixel = project(pose, CAMERA, point)
    depth = pose.transform(point)[2]
    restored = back_project(pixel, depth, pose, CAMERA)
    assert np.allclose(restored, point, atol=1e-9)
    print(f"   像素 {pixel}，深度 {depth:.3f}")


def test_project_behind_camera_raises():
    with pytest.raises(CheiralityError):
        project(CameraPose.identity(), CAMERA, np.array([0.0, 0.0, -1.0]))


def test_pose_inverse_and_compose():
    pose = _pose((0.3, 0.1, -0.2), (1.0, 2.0, 3.0))
    identity = pose.compose(pose.inverse())
    assert np.allclose(identity.to_matrix(), np.eye(4), atol=1e-12)
    assert np.allclose(pose.transform(pose.center()), 0.0, atol=1e-12)


def test_relative_pose_maps_between_cameras():
    a = _pose((0.0, 0.2, 0.0), (0.1, 0.0, 0.0))
    b = _pose((0.1, 0.0, 0.0), (0.0, 0.3, 0.2))
    point = np.array([0.5, 0.2, 4.0])
    rel = relative_pose(a, b)
    assert np.allclose(rel.transform(a.transform(point)), b.transform(point), atol=1e-12)


def test_look_at_centers_target():
    """注視點投影到主點"""
    pose = look_at(np.array([2.0, -0.5, 1.0]), np.zeros(3))
    pixel = project(pose, CAMERA, np.zeros(3))
    assert np.allclose(pixel, [CAMERA.cx, CAMERA.cy], atol=1e-9)


def test_camera_scaled_halves_intrinsics():
    level = CAMERA.scaled(1)
    assert level.fx == 50.0 and level.cx == 25.0
    assert (level.width, level.height) == (50, 40)
    odd = Camera(100.0, 100.0, 50.0, 40.0, 101, 81).scaled(1)
    assert (odd.width, odd.height) == (51, 41)


def test_trajectory_requires_increasing_timestamps():
    trajectory = Trajectory()
    trajectory.append(CameraPose.identity(0.0))
    trajectory.append(CameraPose.identity(0.1))
    with pytest.raises(GeometryError):
        trajectory.append(CameraPose.identity(0.1))
    with pytest.raises(GeometryError):
        Trajectory([CameraPose.identity(1.0), CameraPose.identity(0.5)])


def _frame(items, frame_id=0, timestamp=0.0):
    return FrameObservations(frame_id, timestamp, [Observation(*item) for item in items])


def test_insert_from_features():
    """未連結觀測建立靜態 Gaussian"""
    print("\n" + "=" * 60)
    print("🧩 由特徵插入 Gaussian")
    print("=" * 60)

    gmap = GaussianMap(window_size=10)
    pose = CameraPose.identity()
    created = gmap.insert_from_features(_frame([(7, (60.0, 30.0), 2.0), (8, (10.0, 10.0), -1.0)]),
                                        pose, CAMERA)
    assert created == [7]
    g = gmap.get(7)
    assert g.label == STATIC
    assert g.opacity == 0.5
    assert np.allclose(g.scale, 2.0 / CAMERA.fx)
    assert np.allclose(g.position, [0.2, -0.2, 2.0])
    assert g.stats.observation_count == 1
    assert gmap.insert_stats['skipped_invalid'] == 1

    # 已連結的 id 不重複建立
    assert gmap.insert_from_features(_frame([(7, (60.0, 30.0), 2.0)]), pose, CAMERA) == []
    print(f"   插入統計: {gmap.insert_stats}")


def test_deleted_ids_are_not_reinserted():
    gmap = GaussianMap()
    pose = CameraPose.identity()
    gmap.insert_from_features(_frame([(3, (50.0, 40.0), 1.5)]), pose, CAMERA)
    assert gmap.remove([3]) == [3]
    assert 3 in gmap.deleted_ids
    assert gmap.insert_from_features(_frame([(3, (50.0, 40.0), 1.5)]), pose, CAMERA) == []
    assert gmap.insert_stats['skipped_deleted'] == 1


def test_insert_logs_skips_per_call():
    """除錯訊息只報告本次略過的筆數，累計值留在 insert_stats"""
    records = []

    class _Collect(logging.Handler):
        def emit(self, record):
            records.append(record)

    logger = logging.getLogger('utils.gaussian_map')
    handler = _Collect(level=logging.DEBUG)
    previous = logger.level
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG)
    try:
        gmap = GaussianMap()
        pose = CameraPose.identity()
        gmap.insert_from_features(_frame([(1, (10.0, 10.0), -1.0), (2, (20.0, 10.0), 0.0)]), pose, CAMERA)
        gmap.insert_from_features(_frame([(3, (10.0, 10.0), -1.0)], frame_id=1), pose, CAMERA)
    finally:
        logger.removeHandler(handler)
        logger.setLevel(previous)

    skips = [r.args for r in records if '略過' in r.msg]
    assert skips == [(0, 2), (1, 1)]
    assert gmap.insert_stats['skipped_invalid'] == 3


def test_accumulate_depth_variation_is_sample_std():
    gmap = GaussianMap()
    pose = CameraPose.identity()
    gmap.insert_from_features(_frame([(1, (50.0, 40.0), 2.0)]), pose, CAMERA)
    for depth in (2.2, 1.8):
        stats = gmap.accumulate_observation(1, np.array([50.0, 40.0]), depth, pose, CAMERA)
    assert stats.observation_count == 3
    assert math.isclose(stats.depth_variation, np.std([2.0, 2.2, 1.8], ddof=1), rel_tol=1e-9)
    assert stats.mean_reproj_error == pytest.approx(0.0, abs=1e-9)


def test_epipolar_distance_static_vs_moving():
    """靜態點落在極線上，移動點偏離極線"""
    pose_a = CameraPose.identity()
    pose_b = _pose((0.0, 0.05, 0.0), (-0.2, 0.0, 0.0))
    point = np.array([0.3, -0.2, 3.0])
    pa = project(pose_a, CAMERA, point)
    pb = project(pose_b, CAMERA, point)
    static = compute_epipolar_distance(pa, pb, relative_pose(pose_a, pose_b), CAMERA)
    assert not static.degenerate
    assert static.distance < 1e-6

    moved = project(pose_b, CAMERA, point + np.array([0.0, 0.3, 0.0]))
    moving = compute_epipolar_distance(pa, moved, relative_pose(pose_a, pose_b), CAMERA)
    assert moving.distance > 1.0


def test_epipolar_zero_baseline_is_degenerate():
    gmap = GaussianMap()
    pose = CameraPose.identity()
    gmap.insert_from_features(_frame([(1, (50.0, 40.0), 2.0)]), pose, CAMERA)
    gmap.accumulate_observation(1, np.array([50.0, 40.0]), 2.0, pose, CAMERA)
    assert gmap.epipolar_degenerate == 1
    assert gmap.get(1).stats.epipolar_count == 0


def test_outlier_gate_skips_statistics():
    gmap = GaussianMap(outlier_gate_px=1.0)
    pose = CameraPose.identity()
    gmap.insert_from_features(_frame([(1, (50.0, 40.0), 2.0)]), pose, CAMERA)
    stats = gmap.accumulate_observation(1, np.array([55.0, 40.0]), 2.0, pose, CAMERA)
    assert stats.gated_count == 1
    assert stats.observation_count == 1


def test_point_behind_camera_is_skipped():
    gmap = GaussianMap()
    gmap.insert_from_features(_frame([(1, (50.0, 40.0), 2.0)]), CameraPose.identity(), CAMERA)
    flipped = _pose((0.0, math.pi, 0.0))
    gmap.accumulate_observation(1, np.array([50.0, 40.0]), 2.0, flipped, CAMERA)
    assert gmap.skipped_behind == 1
    assert gmap.get(1).stats.observation_count == 1


def test_label_history_and_reset():
    gmap = GaussianMap(window_size=3)
    gmap.insert_from_features(_frame([(1, (50.0, 40.0), 2.0)]), CameraPose.identity(), CAMERA)
    for _ in range(6):
        gmap.set_label(1, DYNAMIC)
    assert list(gmap.get(1).label_history) == [DYNAMIC] * 4
    gmap.reset_history(1)
    assert gmap.get(1).label == STATIC
    assert list(gmap.get(1).label_history) == [STATIC]


def test_snapshot_is_read_only():
    gmap = GaussianMap()
    gmap.insert_from_features(_frame([(1, (50.0, 40.0), 2.0), (2, (20.0, 20.0), 3.0)]),
                              CameraPose.identity(), CAMERA)
    gmap.set_label(2, DYNAMIC)
    snapshot = gmap.snapshot()
    assert snapshot.ids == [1, 2]
    assert snapshot.filter(STATIC).ids == [1]
    with pytest.raises(ValueError):
        snapshot[1].position[0] = 9.0
    # 之後的修改不影響快照
    gmap.get(1).position[0] = 9.0
    assert snapshot[1].position[0] != 9.0


def test_unknown_gaussian_raises():
    with pytest.raises(UnknownGaussianError):
        GaussianMap().get(42)


def test_project_points_batch_matches_single():
    pose = _pose((0.1, 0.2, 0.0), (0.0, 0.1, 0.4))
    points = np.array([[0.1, 0.2, 3.0], [-0.5, 0.3, 2.5]])
    pixels, z = project_points(pose, CAMERA, points)
    for p, px in zip(points, pixels):
        assert np.allclose(project(pose, CAMERA, p), px)
    assert np.all(z > 0)


def test_quaternion_to_matrix_normalizes_batch():
    from scipy.spatial.transform import Rotation
    rotvecs = np.array([[0.0, 0.0, 0.0], [0.3, -0.2, 0.1], [0.0, math.pi / 2, 0.0]])
    quats = Rotation.from_rotvec(rotvecs).as_quat() * np.array([[1.0], [2.5], [0.4]])
    matrices = quaternion_to_matrix(quats)
    assert matrices.shape == (3, 3, 3)
    assert np.allclose(matrices, Rotation.from_rotvec(rotvecs).as_matrix(), atol=1e-12)
    assert quaternion_to_matrix(np.zeros((0, 4))).shape == (0, 3, 3)


if __name__ == '__main__':
    try:
        test_project_back_project_roundtrip()
        test_project_behind_camera_raises()
        test_pose_inverse_and_compose()
        test_relative_pose_maps_between_cameras()
        test_look_at_centers_target()
        test_camera_scaled_halves_intrinsics()
        test_trajectory_requires_increasing_timestamps()
        test_insert_from_features()
        test_deleted_ids_are_not_reinserted()
        test_insert_logs_skips_per_call()
        test_accumulate_depth_variation_is_sample_std()
        test_epipolar_distance_static_vs_moving()
        test_epipolar_zero_baseline_is_degenerate()
        test_outlier_gate_skips_statistics()
        test_point_behind_camera_is_skipped()
        test_label_history_and_reset()
        test_snapshot_is_read_only()
        test_unknown_gaussian_raises()
        test_project_points_batch_matches_single()
        test_quaternion_to_matrix_normalizes_batch()

        print("\n\n" + "=" * 60)
        print("✅ 所有測試完成")
        print("=" * 60)

    except Exception as e:
        print(f"\n❌ 測試失敗: {str(e)}")
        import traceback
        traceback.print_exc()
