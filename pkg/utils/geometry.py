"""
相機幾何工具

功能：
1. 針孔相機內參（Camera）與金字塔縮放
2. SE(3) 相機位姿（CameraPose，世界 → 相機）
3. 投影 / 反投影
4. 軌跡容器（Trajectory）

四元數一律使用 scipy 的 (x, y, z, w) 順序。
"""

from dataclasses import dataclass, field
from typing import Iterator, List, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import CheiralityError, GeometryError

MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Camera:
    """針孔相機內參（單位：像素）"""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f'焦距必須為正: fx={self.fx}, fy={self.fy}')
        if self.width < 1 or self.height < 1:
            raise GeometryError(f'影像尺寸不合法: {self.width}x{self.height}')

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, level: int) -> 'Camera':
        """
        取得金字塔第 level 層的內參

        每層影像以 [::2] 抽樣，像素 i 對應上一層的 2i，
        因此 fx、cx 皆除以 2，尺寸取 ceil。
        """
        if level == 0:
            return self
        factor = 2 ** level
        width, height = self.width, self.height
        for _ in range(level):
            width = (width + 1) // 2
            height = (height + 1) // 2
        return Camera(self.fx / factor, self.fy / factor,
                      self.cx / factor, self.cy / factor, width, height)

    def contains(self, pixels: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """像素是否位於影像內（含邊界保留）"""
        pixels = np.atleast_2d(pixels)
        return ((pixels[:, 0] >= margin) & (pixels[:, 0] <= self.width - 1 - margin) &
                (pixels[:, 1] >= margin) & (pixels[:, 1] <= self.height - 1 - margin))


@dataclass(frozen=True, eq=False)
class CameraPose:
    """
    相機位姿（世界 → 相機）：P_c = R·P_w + t

    Attributes:
        rotation: 單位四元數 (x, y, z, w)
        translation: 平移向量（公尺）
        timestamp: 時間戳記（秒）
    """
    rotation: np.ndarray
    translation: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm < 1e-12:
            raise GeometryError('四元數長度為零')
        # 正規化後 |q| 與 1 的差距在 1e-9 以內
        q = q / norm
        t = np.asarray(self.translation, dtype=float).reshape(3)
        q.flags.writeable = False
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, 'rotation', q)
        object.__setattr__(self, 'translation', t)
        object.__setattr__(self, 'timestamp', float(self.timestamp))

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> 'CameraPose':
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3), timestamp)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, timestamp: float = 0.0) -> 'CameraPose':
        matrix = np.asarray(matrix, dtype=float)
        return cls(Rotation.from_matrix(matrix[:3, :3]).as_quat(), matrix[:3, 3], timestamp)

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation)

    def to_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.R
        matrix[:3, 3] = self.translation
        return matrix

    def inverse(self) -> 'CameraPose':
        inv = Rotation.from_quat(self.rotation).inv()
        return CameraPose(inv.as_quat(), -inv.apply(self.translation), self.timestamp)

    def compose(self, other: 'CameraPose') -> 'CameraPose':
        """self ∘ other（先套用 other）"""
        rot = Rotation.from_quat(self.rotation)
        combined = rot * Rotation.from_quat(other.rotation)
        return CameraPose(combined.as_quat(),
                          rot.apply(other.translation) + self.translation,
                          self.timestamp)

    def with_timestamp(self, timestamp: float) -> 'CameraPose':
        return CameraPose(self.rotation, self.translation, timestamp)

    def center(self) -> np.ndarray:
        """相機中心（世界座標）"""
        return -self.R.T @ self.translation

    def transform(self, points: np.ndarray) -> np.ndarray:
        """世界座標 → 相機座標"""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation


def quaternion_to_matrix(quats: np.ndarray) -> np.ndarray:
    """
    批次四元數 (x, y, z, w) → 旋轉矩陣，會先正規化

    Args:
        quats: (N, 4)

    Returns:
        (N, 3, 3)
    """
    q = np.asarray(quats, dtype=float)
    if q.ndim == 2 and len(q) == 0:
        return np.zeros((0, 3, 3))
    return Rotation.from_quat(q).as_matrix()


def project_points(pose: CameraPose, camera: Camera,
                   world_points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    批次投影，不檢查 cheirality

    Returns:
        (pixels (N, 2), 相機座標深度 (N,))
    """
    pc = pose.transform(np.atleast_2d(world_points))
    z = pc[:, 2]
    safe_z = np.where(np.abs(z) > MIN_DEPTH, z, MIN_DEPTH)
    u = camera.fx * pc[:, 0] / safe_z + camera.cx
    v = camera.fy * pc[:, 1] / safe_z + camera.cy
    return np.stack([u, v], axis=1), z


def project(pose: CameraPose, camera: Camera, world_point: np.ndarray) -> np.ndarray:
    """
    針孔投影 R·P + t

    Raises:
        CheiralityError: 轉換後 z ≤ 1e-6
    """
    pixels, z = project_points(pose, camera, np.asarray(world_point, dtype=float).reshape(1, 3))
    if z[0] <= MIN_DEPTH:
        raise CheiralityError(f'點位於相機後方 (z={z[0]:.3g})')
    return pixels[0]


def back_project(pixel: np.ndarray, depth: float, pose: CameraPose, camera: Camera) -> np.ndarray:
    """像素 + 深度 → 世界座標"""
    pixel = np.asarray(pixel, dtype=float)
    pc = np.array([(pixel[0] - camera.cx) / camera.fx * depth,
                   (pixel[1] - camera.cy) / camera.fy * depth,
                   depth])
    R = pose.R
    return R.T @ (pc - pose.translation)


def relative_pose(pose_from: CameraPose, pose_to: CameraPose) -> CameraPose:
    """從 pose_from 相機座標到 pose_to 相機座標的轉換"""
    return pose_to.compose(pose_from.inverse())


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def look_at(eye: np.ndarray, target: np.ndarray, down_hint: np.ndarray = None,
            timestamp: float = 0.0) -> CameraPose:
    """建立注視 target 的位姿（相機 y 軸朝下）"""
    eye = np.asarray(eye, dtype=float)
    if down_hint is None:
        down_hint = np.array([0.0, 1.0, 0.0])
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(down_hint, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_wc = np.stack([x, y, z], axis=1)
    R = R_wc.T
    return CameraPose(Rotation.from_matrix(R).as_quat(), -R @ eye, timestamp)


@dataclass
class Trajectory:
    """依時間排序的位姿序列"""
    poses: List[CameraPose] = field(default_factory=list)

    def __post_init__(self):
        stamps = [p.timestamp for p in self.poses]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise GeometryError('軌跡時間戳記必須嚴格遞增')

    def append(self, pose: CameraPose):
        if self.poses and pose.timestamp <= self.poses[-1].timestamp:
            raise GeometryError(
                f'時間戳記未遞增: {pose.timestamp:.6f} <= {self.poses[-1].timestamp:.6f}')
        self.poses.append(pose)

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[CameraPose]:
        return iter(self.poses)

    def __getitem__(self, index: int) -> CameraPose:
        return self.poses[index]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([p.timestamp for p in self.poses])

    def centers(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.center() for p in self.poses])

    def replace(self, index: int, pose: CameraPose):
        self.poses[index] = pose.with_timestamp(self.poses[index].timestamp)
