"""
Tagged Gaussian 地圖

功能：
1. 儲存帶有動態/靜態標籤的 3D Gaussian（TaggedGaussian）
2. 由特徵觀測插入新 Gaussian（反投影）
3. 累積每個 Gaussian 的四項運動統計（重投影誤差、深度變化、觀測次數、極線距離）
4. 提供不可變快照給追蹤與渲染使用

單一寫入者（建圖階段），快照可安全跨執行緒傳遞。
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Tuple

import numpy as np

from .errors import UnknownGaussianError
from .geometry import Camera, CameraPose, back_project, project_points, relative_pose, skew

logger = logging.getLogger(__name__)

STATIC = 0
DYNAMIC = 1


@dataclass
class MotionStats:
    """
    單一 Gaussian 的運動統計

    Attributes:
        mean_reproj_error: 平均重投影誤差（像素，α）
        depth_variation: 觀測深度的樣本標準差（公尺，β）
        observation_count: 觀測次數（γ）
        mean_epipolar_distance: 平均極線距離（像素，δ）
    """
    mean_reproj_error: float = 0.0
    depth_variation: float = 0.0
    observation_count: int = 0
    mean_epipolar_distance: float = 0.0
    depth_mean: float = 0.0
    depth_m2: float = 0.0
    epipolar_count: int = 0
    gated_count: int = 0

    def as_vector(self) -> np.ndarray:
        return np.array([self.mean_reproj_error, self.depth_variation,
                         float(self.observation_count), self.mean_epipolar_distance])

    def copy(self) -> 'MotionStats':
        return MotionStats(**self.__dict__)


class Observation(NamedTuple):
    """單一特徵觀測"""
    gaussian_id: int
    pixel: Tuple[float, float]
    depth: float
    valid: bool = True


@dataclass
class FrameObservations:
    """
    單一影格的特徵觀測

    Attributes:
        frame_id: 影格編號
        timestamp: 時間戳記（秒）
        items: 觀測列表
        outliers: 模擬器標註的離群觀測 id（真實資料為空）
    """
    frame_id: int
    timestamp: float
    items: List[Observation] = field(default_factory=list)
    outliers: FrozenSet[int] = frozenset()

    def by_id(self) -> Dict[int, Observation]:
        return {item.gaussian_id: item for item in self.items}

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class TaggedGaussian:
    """帶標籤的 3D Gaussian"""
    id: int
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    sh_rest: Optional[np.ndarray] = None
    label: int = STATIC
    label_history: deque = field(default_factory=lambda: deque(maxlen=11))
    stats: MotionStats = field(default_factory=MotionStats)
    last_pixel: Optional[np.ndarray] = None
    last_pose: Optional[CameraPose] = None


@dataclass(frozen=True)
class GaussianView:
    """TaggedGaussian 的唯讀檢視"""
    id: int
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    label: int
    label_history: Tuple[int, ...]
    stats: MotionStats
    last_pixel: Optional[np.ndarray]
    sh_rest: Optional[np.ndarray] = None


def _frozen(array: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if array is None:
        return None
    out = np.array(array, dtype=float, copy=True)
    out.flags.writeable = False
    return out


class MapSnapshot:
    """
    地圖的不可變快照（依 id 排序）

    可用 filter() 依標籤過濾。
    """

    def __init__(self, views: Iterable[GaussianView]):
        self._views = tuple(sorted(views, key=lambda v: v.id))
        self._index = MappingProxyType({v.id: v for v in self._views})

    def __len__(self) -> int:
        return len(self._views)

    def __iter__(self):
        return iter(self._views)

    def __getitem__(self, gaussian_id: int) -> GaussianView:
        try:
            return self._index[gaussian_id]
        except KeyError:
            raise UnknownGaussianError(gaussian_id) from None

    def __contains__(self, gaussian_id: int) -> bool:
        return gaussian_id in self._index

    @property
    def ids(self) -> List[int]:
        return [v.id for v in self._views]

    def labels(self) -> Dict[int, int]:
        return {v.id: v.label for v in self._views}

    def filter(self, label: int) -> 'MapSnapshot':
        return MapSnapshot(v for v in self._views if v.label == label)


class GaussianMap:
    """
    Tagged Gaussian 地圖

    Gaussian 的 id 與特徵觀測的 gaussian_id 相同；
    已刪除的 id 會留下墓碑，避免被重新插入。
    """

    def __init__(self, window_size: int = 10, initial_opacity: float = 0.5,
                 outlier_gate_px: float = 0.0):
        """
        初始化地圖

        Args:
            window_size: 標籤視窗 n（歷史保留 n+1 筆）
            initial_opacity: 新 Gaussian 的初始不透明度
            outlier_gate_px: 重投影誤差超過此值的觀測不納入統計（0 表示停用）
        """
        self.window_size = window_size
        self.initial_opacity = initial_opacity
        self.outlier_gate_px = outlier_gate_px
        self._gaussians: Dict[int, TaggedGaussian] = {}
        self._deleted: set = set()
        self.insert_stats = {'inserted': 0, 'skipped_invalid': 0,
                             'skipped_linked': 0, 'skipped_deleted': 0}
        self.skipped_behind = 0
        self.epipolar_degenerate = 0

    # ===== 基本存取 =====

    def __len__(self) -> int:
        return len(self._gaussians)

    def __contains__(self, gaussian_id: int) -> bool:
        return gaussian_id in self._gaussians

    def get(self, gaussian_id: int) -> TaggedGaussian:
        try:
            return self._gaussians[gaussian_id]
        except KeyError:
            raise UnknownGaussianError(gaussian_id) from None

    def ids(self, label: Optional[int] = None) -> List[int]:
        return sorted(gid for gid, g in self._gaussians.items()
                      if label is None or g.label == label)

    @property
    def deleted_ids(self) -> FrozenSet[int]:
        return frozenset(self._deleted)

    def add(self, gaussian: TaggedGaussian):
        """直接加入 Gaussian（載入地圖、測試使用）"""
        gaussian.label_history = deque(gaussian.label_history, maxlen=self.window_size + 1)
        self._gaussians[gaussian.id] = gaussian

    def remove(self, gaussian_ids: Iterable[int]) -> List[int]:
        removed = []
        for gid in gaussian_ids:
            if self._gaussians.pop(gid, None) is not None:
                self._deleted.add(gid)
                removed.append(gid)
        return removed

    def mark_deleted(self, gaussian_ids: Iterable[int]):
        """只登記墓碑（載入地圖時使用）"""
        self._deleted.update(int(g) for g in gaussian_ids)

    def set_label(self, gaussian_id: int, label: int, record: bool = True):
        g = self.get(gaussian_id)
        g.label = int(label)
        if record:
            g.label_history.append(int(label))

    def reset_history(self, gaussian_id: int, label: int = STATIC):
        """清除刪除倒數（光流恢復時使用）"""
        g = self.get(gaussian_id)
        g.label = int(label)
        g.label_history.clear()
        g.label_history.append(int(label))

    # ===== 插入與統計 =====

    def insert_from_features(self, obs: FrameObservations, pose: CameraPose,
                             camera: Camera) -> List[int]:
        """
        由未連結的特徵觀測建立新的 Gaussian

        新 Gaussian 位於反投影點，標籤為靜態，不透明度 0.5，
        等向尺度 depth/fx（插入深度下一個像素的足跡）。

        Args:
            obs: 影格觀測
            pose: 影格位姿（世界 → 相機）
            camera: 相機內參

        Returns:
            新建立的 Gaussian id 列表
        """
        created = []
        skipped = 0
        for item in obs.items:
            gid = int(item.gaussian_id)
            if gid in self._gaussians:
                self.insert_stats['skipped_linked'] += 1
                continue
            if gid in self._deleted:
                self.insert_stats['skipped_deleted'] += 1
                continue
            pixel = np.asarray(item.pixel, dtype=float)
            if (not item.valid or not np.isfinite(item.depth) or item.depth <= 0
                    or not camera.contains(pixel)[0]):
                skipped += 1
                continue

            position = back_project(pixel, item.depth, pose, camera)
            footprint = item.depth / camera.fx
            g = TaggedGaussian(
                id=gid,
                position=position,
                rotation=np.array([0.0, 0.0, 0.0, 1.0]),
                scale=np.full(3, footprint),
                opacity=self.initial_opacity,
                color=np.full(3, 0.5),
                label_history=deque(maxlen=self.window_size + 1),
            )
            # 插入即為第一次觀測
            pixels, _ = project_points(pose, camera, position)
            g.stats = MotionStats(
                mean_reproj_error=float(np.linalg.norm(pixel - pixels[0])),
                observation_count=1,
                depth_mean=float(item.depth),
            )
            g.last_pixel = pixel.copy()
            g.last_pose = pose
            self._gaussians[gid] = g
            created.append(gid)

        self.insert_stats['inserted'] += len(created)
        self.insert_stats['skipped_invalid'] += skipped
        if skipped:
            logger.debug('影格 %d 插入時略過 %d 筆無效觀測', obs.frame_id, skipped)
        return created

    def accumulate_observation(self, gaussian_id: int, pixel: np.ndarray, depth: float,
                               pose: CameraPose, camera: Camera,
                               prev_pose: Optional[CameraPose] = None) -> MotionStats:
        """
        將一筆觀測累積到運動統計

        Args:
            gaussian_id: Gaussian id
            pixel: 觀測像素
            depth: 觀測深度（公尺）
            pose: 目前影格位姿
            camera: 相機內參
            prev_pose: 上一次觀測的位姿（None 表示使用 Gaussian 記錄的位姿）

        Returns:
            更新後的統計（複本）

        Raises:
            UnknownGaussianError: id 不存在
        """
        g = self.get(gaussian_id)
        pixel = np.asarray(pixel, dtype=float)
        projected, z = project_points(pose, camera, g.position)
        if z[0] <= 1e-6:
            self.skipped_behind += 1
            logger.debug('Gaussian %d 位於相機後方，略過觀測', gaussian_id)
            return g.stats.copy()

        error = float(np.linalg.norm(pixel - projected[0]))
        if self.outlier_gate_px > 0 and error > self.outlier_gate_px:
            g.stats.gated_count += 1
            return g.stats.copy()

        s = g.stats
        s.observation_count += 1
        n = s.observation_count
        s.mean_reproj_error += (error - s.mean_reproj_error) / n

        # Welford，樣本標準差（n-1）
        delta = depth - s.depth_mean
        s.depth_mean += delta / n
        s.depth_m2 += delta * (depth - s.depth_mean)
        s.depth_variation = math.sqrt(max(s.depth_m2, 0.0) / (n - 1)) if n > 1 else 0.0

        prev_pose = prev_pose if prev_pose is not None else g.last_pose
        if g.last_pixel is not None and prev_pose is not None:
            distance, degenerate = compute_epipolar_distance(
                g.last_pixel, pixel, relative_pose(prev_pose, pose), camera)
            if degenerate:
                self.epipolar_degenerate += 1
            else:
                s.epipolar_count += 1
                s.mean_epipolar_distance += (distance - s.mean_epipolar_distance) / s.epipolar_count

        g.last_pixel = pixel.copy()
        g.last_pose = pose
        return s.copy()

    # ===== 快照 =====

    def snapshot(self, label_filter: Optional[int] = None) -> MapSnapshot:
        """
        取得唯讀快照

        Args:
            label_filter: 只保留指定標籤（None 表示全部）
        """
        views = []
        for g in self._gaussians.values():
            if label_filter is not None and g.label != label_filter:
                continue
            views.append(GaussianView(
                id=g.id,
                position=_frozen(g.position),
                rotation=_frozen(g.rotation),
                scale=_frozen(g.scale),
                opacity=float(g.opacity),
                color=_frozen(g.color),
                label=int(g.label),
                label_history=tuple(g.label_history),
                stats=g.stats.copy(),
                last_pixel=_frozen(g.last_pixel),
                sh_rest=_frozen(g.sh_rest),
            ))
        return MapSnapshot(views)


class EpipolarResult(NamedTuple):
    distance: float
    degenerate: bool


def fundamental_matrix(rel: CameraPose, camera: Camera) -> np.ndarray:
    """由相對位姿（前一相機 → 目前相機）建立基礎矩陣 F = K^-T [t]x R K^-1"""
    K_inv = np.linalg.inv(camera.K)
    essential = skew(rel.translation) @ rel.R
    return K_inv.T @ essential @ K_inv


def point_line_distance(pixel: np.ndarray, line: np.ndarray) -> float:
    norm = math.hypot(line[0], line[1])
    if norm < 1e-300:
        return 0.0
    return abs(line[0] * pixel[0] + line[1] * pixel[1] + line[2]) / norm


def compute_epipolar_distance(pixel_prev: np.ndarray, pixel_cur: np.ndarray,
                              rel: CameraPose, camera: Camera,
                              min_baseline: float = 1e-9) -> EpipolarResult:
    """
    計算目前像素到前一像素極線的距離

    Args:
        pixel_prev: 前一影格像素
        pixel_cur: 目前影格像素
        rel: 相對位姿（前一相機座標 → 目前相機座標）
        camera: 相機內參
        min_baseline: 平移小於此值視為退化

    Returns:
        EpipolarResult(距離（像素）, 是否退化)；退化時距離為 0
    """
    if np.linalg.norm(rel.translation) < min_baseline:
        return EpipolarResult(0.0, True)
    F = fundamental_matrix(rel, camera)
    prev_h = np.array([pixel_prev[0], pixel_prev[1], 1.0])
    line = F @ prev_h
    return EpipolarResult(point_line_distance(pixel_cur, line), False)
