"""
合成動態 RGB-D 序列

功能：
1. 場景規格（SceneSpec）與預設桌面尺度場景
2. 產生靜態房間 Gaussian 與剛體移動物體
3. 相機軌跡（環繞 / Lissajous / 固定）
4. 以 splat_render 渲染 RGB-D 影格與純靜態影像
5. 產生帶雜訊與離群值的特徵追蹤（代替 ORB 前端）

同一組 (spec, seed) 產生的結果完全相同。
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .gaussian_map import DYNAMIC, STATIC, FrameObservations, Observation
from .geometry import Camera, Trajectory, look_at
from .splat_render import GaussianParams, RenderedImage, composite

logger = logging.getLogger(__name__)

TRAJECTORY_KINDS = ('orbit', 'lissajous', 'static')
TRACK_MARGIN = 8.0


@dataclass
class SceneSpec:
    """
    合成場景規格

    預設為桌面尺度：160x120、30 影格、2000 個靜態 Gaussian、
    2 個各 150 個 Gaussian 的物體、每影格 0.05 m、像素雜訊 0.5、離群 5%。
    """
    width: int = 160
    height: int = 120
    fx: float = 140.0
    fy: float = 140.0
    cx: Optional[float] = None
    cy: Optional[float] = None
    frame_count: int = 30
    fps: float = 30.0
    static_gaussian_count: int = 2000
    dynamic_object_count: int = 2
    gaussians_per_object: int = 150
    object_speed: float = 0.05
    object_velocities: Optional[List[List[float]]] = None
    sinusoid_amplitude: float = 0.0
    sinusoid_period: float = 30.0
    motion_start_frame: int = 0
    trajectory: str = 'orbit'
    orbit_radius: float = 2.0
    orbit_arc: float = 0.5
    room_half_extent: Tuple[float, float, float] = (3.0, 1.5, 3.0)
    static_scale: float = 0.12
    object_radius: float = 0.25
    object_scale: float = 0.04
    pixel_noise: float = 0.5
    outlier_fraction: float = 0.05
    tracks_per_frame: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.static_gaussian_count < 0 or self.dynamic_object_count < 0 or self.gaussians_per_object < 0:
            raise ConfigError('Gaussian 數量不可為負')
        if self.pixel_noise < 0:
            raise ConfigError(f'像素雜訊必須 ≥ 0: {self.pixel_noise}')
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ConfigError(f'離群比例必須在 [0, 1): {self.outlier_fraction}')
        if self.frame_count < 1 or self.fps <= 0:
            raise ConfigError('影格數與影格率必須為正')
        if self.motion_start_frame < 0:
            raise ConfigError(f'motion_start_frame 必須 ≥ 0: {self.motion_start_frame}')
        if self.trajectory not in TRAJECTORY_KINDS:
            raise ConfigError(f'未知的軌跡類型: {self.trajectory}（可用: {", ".join(TRAJECTORY_KINDS)}）')
        if self.object_velocities is not None and len(self.object_velocities) != self.dynamic_object_count:
            raise ConfigError('object_velocities 數量必須等於 dynamic_object_count')
        self.room_half_extent = tuple(float(v) for v in self.room_half_extent)

    @property
    def camera(self) -> Camera:
        cx = self.width / 2.0 if self.cx is None else self.cx
        cy = self.height / 2.0 if self.cy is None else self.cy
        return Camera(self.fx, self.fy, cx, cy, self.width, self.height)

    @property
    def dynamic_gaussian_count(self) -> int:
        return self.dynamic_object_count * self.gaussians_per_object

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['room_half_extent'] = list(self.room_half_extent)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SceneSpec':
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f'未知的場景參數: {", ".join(unknown)}')
        return cls(**data)


@dataclass(frozen=True)
class ObjectMotion:
    """
    剛體物體運動：start + velocity·f + amplitude·sin(2πf / period)

    f 由 start_frame 起算，之前物體靜止。
    """
    start: np.ndarray
    velocity: np.ndarray
    amplitude: np.ndarray
    period: float = 30.0
    start_frame: int = 0

    def displacement(self, frame: int) -> np.ndarray:
        elapsed = max(frame - self.start_frame, 0)
        offset = self.velocity * elapsed
        if np.any(self.amplitude):
            offset = offset + self.amplitude * math.sin(2.0 * math.pi * elapsed / self.period)
        return offset

    def center(self, frame: int) -> np.ndarray:
        return self.start + self.displacement(frame)


@dataclass
class SimScene:
    """
    合成場景

    Attributes:
        spec: 場景規格
        params: 第 0 影格的 Gaussian 參數（labels 即真實標籤）
        object_index: (N,) 所屬物體，靜態為 -1
        motions: 各物體運動
        priority: (N,) 追蹤挑選優先序（固定，跨影格穩定）
    """
    spec: SceneSpec
    params: GaussianParams
    object_index: np.ndarray
    motions: List[ObjectMotion]
    priority: np.ndarray

    @property
    def true_labels(self) -> Dict[int, int]:
        return {int(i): int(l) for i, l in zip(self.params.ids, self.params.labels)}


@dataclass
class SimFrame:
    frame_id: int
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray
    gray: np.ndarray


@dataclass
class GroundTruth:
    """真實位姿、標籤、特徵追蹤與純靜態影像"""
    poses: Trajectory
    labels: Dict[int, int]
    tracks: List[FrameObservations] = field(default_factory=list)
    static_renders: List[np.ndarray] = field(default_factory=list)


@dataclass
class SimulatedSequence:
    spec: SceneSpec
    camera: Camera
    scene: SimScene
    frames: List[SimFrame]
    ground_truth: GroundTruth


# ===== 場景 =====

def _face_samples(rng: np.random.Generator, count: int, half: Sequence[float]) -> np.ndarray:
    """在房間六個面上依面積均勻取樣"""
    hx, hy, hz = half
    faces = [  # (固定軸, 符號, 面積)
        (0, -1, 4 * hy * hz), (0, 1, 4 * hy * hz),
        (1, -1, 4 * hx * hz), (1, 1, 4 * hx * hz),
        (2, -1, 4 * hx * hy), (2, 1, 4 * hx * hy),
    ]
    areas = np.array([f[2] for f in faces])
    choice = rng.choice(len(faces), size=count, p=areas / areas.sum())
    points = rng.uniform(-1.0, 1.0, size=(count, 3)) * np.asarray(half)
    for k, (axis, sign, _) in enumerate(faces):
        points[choice == k, axis] = sign * half[axis]
    return points


def default_object_motions(spec: SceneSpec) -> List[ObjectMotion]:
    """
    物體從房間中心兩側出發，朝中心斜向移動

    第 k 個物體的起點在半徑 0.7 m 的圓上，高度與深度交錯，避免互相穿越。
    """
    motions = []
    for k in range(spec.dynamic_object_count):
        phi = math.pi * k + (2.0 * math.pi * (k // 2)) / max(spec.dynamic_object_count, 1)
        radial = np.array([math.cos(phi), 0.0, math.sin(phi)])
        vertical = -0.3 if k % 2 == 0 else 0.3
        start = 0.7 * radial + np.array([0.0, vertical, 0.4 * (k % 2)])
        if spec.object_velocities is not None:
            velocity = np.asarray(spec.object_velocities[k], dtype=float)
        else:
            direction = -radial + np.array([0.0, -np.sign(vertical) * 0.6, 0.0])
            velocity = spec.object_speed * direction / np.linalg.norm(direction)
        amplitude = np.array([0.0, spec.sinusoid_amplitude, 0.0])
        motions.append(ObjectMotion(start, velocity, amplitude, spec.sinusoid_period,
                                    spec.motion_start_frame))
    return motions


def generate_scene(spec: SceneSpec) -> SimScene:
    """
    產生場景

    靜態 Gaussian 分佈在房間六個面上，顏色為平滑紋理加上隨機擾動；
    每個物體是一團半徑 object_radius 的剛體 Gaussian。
    """
    rng = np.random.default_rng(spec.seed)
    static_n = spec.static_gaussian_count
    dynamic_n = spec.dynamic_gaussian_count
    total = static_n + dynamic_n

    static_pos = _face_samples(rng, static_n, spec.room_half_extent)
    texture = 0.5 + 0.25 * np.sin(3.1 * static_pos[:, [0]] + 1.7 * static_pos[:, [1]] + np.array([0.0, 2.1, 4.2]))
    static_colors = np.clip(texture + rng.uniform(-0.25, 0.25, size=(static_n, 3)), 0.0, 1.0)

    motions = default_object_motions(spec)
    dyn_pos, dyn_colors, object_index = [], [], [np.full(static_n, -1)]
    for k, motion in enumerate(motions):
        m = spec.gaussians_per_object
        direction = rng.normal(size=(m, 3))
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
        radius = spec.object_radius * rng.uniform(0.0, 1.0, size=(m, 1)) ** (1.0 / 3.0)
        dyn_pos.append(motion.start + direction * radius)
        base = np.eye(3)[k % 3] * 0.6 + 0.2
        dyn_colors.append(np.clip(base + rng.uniform(-0.2, 0.2, size=(m, 3)), 0.0, 1.0))
        object_index.append(np.full(m, k))

    positions = np.vstack([static_pos] + dyn_pos) if total else np.zeros((0, 3))
    colors = np.vstack([static_colors] + dyn_colors) if total else np.zeros((0, 3))
    scales = np.concatenate([np.full(static_n, spec.static_scale),
                             np.full(dynamic_n, spec.object_scale)])
    params = GaussianParams(
        ids=np.arange(total, dtype=int),
        positions=positions,
        rotations=np.tile([0.0, 0.0, 0.0, 1.0], (total, 1)),
        scales=np.repeat(scales[:, None], 3, axis=1),
        opacities=np.full(total, 0.9),
        colors=colors,
        labels=np.concatenate([np.full(static_n, STATIC), np.full(dynamic_n, DYNAMIC)]).astype(int),
    )
    priority = rng.permutation(total)
    scene = SimScene(spec, params, np.concatenate(object_index).astype(int), motions, priority)
    logger.info('產生場景：%d 靜態 + %d 動態 Gaussian', static_n, dynamic_n)
    return scene


def gaussians_at(scene: SimScene, frame: int) -> GaussianParams:
    """第 frame 影格的 Gaussian（動態物體依運動平移）"""
    params = scene.params.copy()
    for k, motion in enumerate(scene.motions):
        members = scene.object_index == k
        params.positions[members] += motion.displacement(frame)
    return params


def camera_trajectory(spec: SceneSpec) -> Trajectory:
    """
    相機軌跡（世界 → 相機）

    orbit：半徑 orbit_radius、掃過 orbit_arc 弧度並注視房間中心；
    lissajous：在 z = orbit_radius 平面上做 Lissajous 運動；
    static：固定在起點。
    """
    trajectory = Trajectory()
    target = np.zeros(3)
    span = max(spec.frame_count - 1, 1)
    for f in range(spec.frame_count):
        s = f / span
        timestamp = f / spec.fps
        if spec.trajectory == 'orbit':
            theta = math.pi / 2.0 - spec.orbit_arc / 2.0 + spec.orbit_arc * s
            eye = np.array([spec.orbit_radius * math.cos(theta), 0.0,
                            spec.orbit_radius * math.sin(theta)])
        elif spec.trajectory == 'lissajous':
            eye = np.array([0.4 * math.sin(2.0 * math.pi * s),
                            0.2 * math.sin(4.0 * math.pi * s + 0.5),
                            spec.orbit_radius])
        else:
            eye = np.array([0.0, 0.0, spec.orbit_radius])
        trajectory.append(look_at(eye, target, timestamp=timestamp))
    return trajectory


# ===== 渲染與追蹤 =====

def _to_frame(frame_id: int, timestamp: float, image: RenderedImage) -> SimFrame:
    rgb = np.clip(image.rgb, 0.0, 1.0)
    coverage = image.accumulated_alpha
    depth = np.where(coverage > 0.5, image.normalized_depth(), 0.0)
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    return SimFrame(frame_id, timestamp, rgb, depth, gray)


def render_frames(scene: SimScene, trajectory: Trajectory) -> Tuple[List[SimFrame], List[np.ndarray]]:
    """
    渲染每個影格（含移動後的動態物體）與對應的純靜態影像

    Returns:
        (影格列表, 純靜態 RGB 列表)
    """
    camera = scene.spec.camera
    frames, statics = [], []
    for f, pose in enumerate(trajectory):
        params = gaussians_at(scene, f)
        frames.append(_to_frame(f, pose.timestamp, composite(params, pose, camera)))
        static = composite(params, pose, camera, include=params.labels == STATIC)
        statics.append(np.clip(static.rgb, 0.0, 1.0))
    return frames, statics


def _select_tracks(scene: SimScene, candidates: np.ndarray, pixels: np.ndarray,
                   camera: Camera, quota_total: int, grid: Tuple[int, int] = (8, 6)) -> np.ndarray:
    """依網格分層挑選，格內依固定優先序"""
    if len(candidates) == 0:
        return candidates
    gx, gy = grid
    cell_x = np.clip((pixels[:, 0] * gx / camera.width).astype(int), 0, gx - 1)
    cell_y = np.clip((pixels[:, 1] * gy / camera.height).astype(int), 0, gy - 1)
    cells = cell_y * gx + cell_x
    quota = int(math.ceil(quota_total / (gx * gy)))
    prio = scene.priority[candidates]
    order = np.lexsort((prio, cells))
    ranked_cells = cells[order]
    starts = np.searchsorted(ranked_cells, ranked_cells, side='left')
    within = np.arange(len(order)) - starts
    chosen = order[within < quota]
    if len(chosen) > quota_total:
        chosen = chosen[np.argsort(prio[chosen], kind='stable')[:quota_total]]
    return np.sort(candidates[chosen])


def emit_feature_tracks(scene: SimScene, trajectory: Trajectory,
                        depth_maps: Optional[Sequence[np.ndarray]] = None) -> List[FrameObservations]:
    """
    產生每個影格的特徵觀測

    投影可見（在影像內、未被遮擋）的 Gaussian，分層挑選後加上 N(0, σ²) 像素雜訊，
    並以 outlier_fraction 的比例換成影像內均勻隨機像素（深度保持真值）。

    Args:
        scene: 場景
        trajectory: 相機軌跡
        depth_maps: 各影格渲染深度（遮擋判斷），None 表示不判斷
    """
    spec = scene.spec
    camera = spec.camera
    rng = np.random.default_rng(spec.seed + 1)
    tracks = []
    for f, pose in enumerate(trajectory):
        params = gaussians_at(scene, f)
        pc = pose.transform(params.positions)
        z = pc[:, 2]
        safe_z = np.where(z > 1e-6, z, 1.0)
        pixels = np.stack([camera.fx * pc[:, 0] / safe_z + camera.cx,
                           camera.fy * pc[:, 1] / safe_z + camera.cy], axis=1)
        visible = (z > 0.05) & camera.contains(pixels, TRACK_MARGIN)
        if depth_maps is not None:
            depth = depth_maps[f]
            col = np.clip(np.rint(pixels[:, 0]).astype(int), 0, camera.width - 1)
            row = np.clip(np.rint(pixels[:, 1]).astype(int), 0, camera.height - 1)
            surface = depth[row, col]
            visible &= (surface <= 0) | (z <= surface * 1.1 + 0.05)

        candidates = np.nonzero(visible)[0]
        chosen = _select_tracks(scene, candidates, pixels[candidates], camera, spec.tracks_per_frame)
        observed = pixels[chosen] + rng.normal(0.0, spec.pixel_noise, size=(len(chosen), 2)) \
            if spec.pixel_noise > 0 else pixels[chosen].copy()
        outlier = rng.uniform(size=len(chosen)) < spec.outlier_fraction
        if outlier.any():
            observed[outlier, 0] = rng.uniform(TRACK_MARGIN, camera.width - 1 - TRACK_MARGIN, outlier.sum())
            observed[outlier, 1] = rng.uniform(TRACK_MARGIN, camera.height - 1 - TRACK_MARGIN, outlier.sum())

        items = [Observation(int(params.ids[i]), (float(p[0]), float(p[1])), float(z[i]), True)
                 for i, p in zip(chosen, observed)]
        outliers = frozenset(int(params.ids[i]) for i in chosen[outlier])
        tracks.append(FrameObservations(f, pose.timestamp, items, outliers))
    return tracks


def simulate_sequence(spec: SceneSpec) -> SimulatedSequence:
    """產生完整序列（影格、真實位姿、標籤、特徵追蹤、純靜態影像）"""
    scene = generate_scene(spec)
    trajectory = camera_trajectory(spec)
    frames, statics = render_frames(scene, trajectory)
    tracks = emit_feature_tracks(scene, trajectory, [fr.depth for fr in frames])
    truth = GroundTruth(trajectory, scene.true_labels, tracks, statics)
    logger.info('模擬序列：%d 影格，平均每影格 %.0f 筆觀測',
                len(frames), np.mean([len(t) for t in tracks]) if tracks else 0.0)
    return SimulatedSequence(spec, spec.camera, scene, frames, truth)
