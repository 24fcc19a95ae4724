"""
資料集讀寫

功能：
1. 寫出 TUM RGB-D 目錄格式（rgb/、depth/、rgb.txt、depth.txt、groundtruth.txt）
   以及模擬器附帶的 labels.txt、camera.txt、features.txt、static/
2. 讀取 TUM RGB-D 序列（時間戳記配對 20 ms、深度 1/5000 m）
3. 軌跡讀寫（timestamp tx ty tz qx qy qz qw，相機 → 世界，小數 6 位）
4. 執行報告輸出（文字 + CSV）
5. 地圖存取（.npz）

TUM 檔案存的是相機 → 世界位姿，程式內部一律使用世界 → 相機。
"""

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .errors import DataError
from .gaussian_map import FrameObservations, GaussianMap, MotionStats, Observation, TaggedGaussian
from .geometry import Camera, CameraPose, Trajectory

logger = logging.getLogger(__name__)

DEPTH_SCALE = 5000.0
MAX_TIME_DIFF = 0.02


# ===== 文字檔解析 =====

def _parse_rows(path: Path, min_fields: int) -> List[Tuple[int, List[str]]]:
    """讀取以空白分隔的列，略過空行與 '#' 註解；回傳 (行號, 欄位)"""
    path = Path(path)
    if not path.exists():
        raise DataError('找不到檔案', str(path))
    rows = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            text = line.strip()
            if not text or text.startswith('#'):
                continue
            fields = text.split()
            if len(fields) < min_fields:
                raise DataError(f'欄位不足（需要 {min_fields} 欄）: {text!r}', str(path), lineno)
            rows.append((lineno, fields))
    return rows


def _to_float(value: str, path: Path, lineno: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f'無法解析數值: {value!r}', str(path), lineno) from None


def read_file_list(path: Path) -> List[Tuple[float, str]]:
    """rgb.txt / depth.txt：'timestamp filename'"""
    return [(_to_float(fields[0], path, lineno), fields[1])
            for lineno, fields in _parse_rows(path, 2)]


def associate(first: Sequence[float], second: Sequence[float],
              max_dt: float = MAX_TIME_DIFF) -> List[Tuple[int, int]]:
    """
    依最近時間戳記配對（每個元素最多使用一次）

    Returns:
        (first 索引, second 索引) 列表，依 first 排序
    """
    second = np.asarray(second, dtype=float)
    pairs, used = [], set()
    if len(second) == 0:
        return pairs
    for i, t in enumerate(first):
        j = int(np.argmin(np.abs(second - t)))
        if abs(second[j] - t) <= max_dt and j not in used:
            used.add(j)
            pairs.append((i, j))
    return pairs


# ===== 軌跡 =====

def read_trajectory(path: Path) -> Trajectory:
    """讀取 TUM 軌跡（相機 → 世界），轉成世界 → 相機位姿"""
    poses = []
    for lineno, fields in _parse_rows(path, 8):
        values = [_to_float(v, path, lineno) for v in fields[:8]]
        try:
            c2w = CameraPose(np.array(values[4:8]), np.array(values[1:4]), values[0])
        except Exception as e:
            raise DataError(f'位姿不合法: {e}', str(path), lineno) from None
        poses.append(c2w.inverse())
    poses.sort(key=lambda p: p.timestamp)
    try:
        return Trajectory(poses)
    except Exception as e:
        raise DataError(str(e), str(path)) from None


def write_trajectory(trajectory: Trajectory, path: Path):
    """寫出 TUM 軌跡，小數 6 位"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for pose in trajectory:
            c2w = pose.inverse()
            t, q = c2w.translation, c2w.rotation
            f.write(f'{pose.timestamp:.6f} {t[0]:.6f} {t[1]:.6f} {t[2]:.6f} '
                    f'{q[0]:.6f} {q[1]:.6f} {q[2]:.6f} {q[3]:.6f}\n')


# ===== 序列 =====

@dataclass
class FrameRecord:
    """單一配對好的 RGB-D 影格（影像延遲載入）"""
    index: int
    timestamp: float
    rgb_path: Path
    depth_path: Path
    depth_scale: float = DEPTH_SCALE

    def load_rgb(self) -> np.ndarray:
        data = cv2.imread(str(self.rgb_path), cv2.IMREAD_COLOR)
        if data is None:
            raise DataError('無法讀取影像', str(self.rgb_path))
        return cv2.cvtColor(data, cv2.COLOR_BGR2RGB).astype(float) / 255.0

    def load_depth(self) -> np.ndarray:
        data = cv2.imread(str(self.depth_path), cv2.IMREAD_UNCHANGED)
        if data is None:
            raise DataError('無法讀取深度影像', str(self.depth_path))
        return data.astype(float) / self.depth_scale


@dataclass
class TumSequence:
    """
    TUM RGB-D 序列

    Attributes:
        root: 序列目錄
        camera: 相機內參（camera.txt）
        frames: 配對好的影格
        ground_truth: groundtruth.txt 的軌跡（可能為 None）
        features: 每個影格的特徵觀測（與 frames 對齊）
        labels: 真實標籤（labels.txt，可能為 None）
        static_paths: 純靜態影像路徑（模擬序列才有）
    """
    root: Path
    camera: Camera
    frames: List[FrameRecord]
    ground_truth: Optional[Trajectory] = None
    features: List[FrameObservations] = field(default_factory=list)
    labels: Optional[Dict[int, int]] = None
    static_paths: List[Optional[Path]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)


def read_camera(path: Path) -> Camera:
    """camera.txt：'fx fy cx cy width height'"""
    rows = _parse_rows(path, 6)
    if not rows:
        raise DataError('相機檔案是空的', str(path))
    lineno, fields = rows[0]
    values = [_to_float(v, path, lineno) for v in fields[:6]]
    try:
        return Camera(values[0], values[1], values[2], values[3], int(values[4]), int(values[5]))
    except Exception as e:
        raise DataError(f'相機參數不合法: {e}', str(path), lineno) from None


def write_camera(camera: Camera, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write('# fx fy cx cy width height\n')
        f.write(f'{camera.fx:.6f} {camera.fy:.6f} {camera.cx:.6f} {camera.cy:.6f} '
                f'{camera.width} {camera.height}\n')


def read_labels(path: Path) -> Dict[int, int]:
    labels = {}
    for lineno, fields in _parse_rows(path, 2):
        try:
            labels[int(fields[0])] = int(fields[1])
        except ValueError:
            raise DataError(f'無法解析標籤: {" ".join(fields)}', str(path), lineno) from None
    return labels


def read_features(path: Path, frame_id: int, timestamp: float) -> FrameObservations:
    """每行 'gaussian_id u v depth valid'"""
    items = []
    for lineno, fields in _parse_rows(path, 5):
        try:
            gid = int(fields[0])
            valid = bool(int(fields[4]))
        except ValueError:
            raise DataError(f'無法解析特徵: {" ".join(fields)}', str(path), lineno) from None
        u, v, depth = (_to_float(x, path, lineno) for x in fields[1:4])
        items.append(Observation(gid, (u, v), depth, valid))
    return FrameObservations(frame_id, timestamp, items)


def load_tum_sequence(path: Path, max_dt: float = MAX_TIME_DIFF,
                      depth_scale: float = DEPTH_SCALE) -> TumSequence:
    """
    讀取 TUM RGB-D 序列

    rgb/depth 依最近時間戳記配對（max_dt 內）；groundtruth.txt、labels.txt 可省略。
    沒有 features.txt 的序列會被拒絕（本管線不含 ORB 前端）。

    Raises:
        DataError: 缺檔或格式錯誤（訊息含行號）
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError('序列目錄不存在', str(root))
    rgb_list = read_file_list(root / 'rgb.txt')
    depth_list = read_file_list(root / 'depth.txt')
    camera = read_camera(root / 'camera.txt')

    pairs = associate([t for t, _ in rgb_list], [t for t, _ in depth_list], max_dt)
    frames = [FrameRecord(k, rgb_list[i][0], root / rgb_list[i][1], root / depth_list[j][1], depth_scale)
              for k, (i, j) in enumerate(pairs)]
    if not frames:
        raise DataError('rgb 與 depth 沒有可配對的時間戳記', str(root))

    ground_truth = None
    if (root / 'groundtruth.txt').exists():
        ground_truth = read_trajectory(root / 'groundtruth.txt')

    features_index = root / 'features.txt'
    if not features_index.exists():
        raise DataError('缺少 features.txt（需要特徵追蹤）', str(features_index))
    feature_rows = [(_to_float(fields[1], features_index, lineno), fields[2])
                    for lineno, fields in _parse_rows(features_index, 3)]
    feature_pairs = dict(associate([f.timestamp for f in frames], [t for t, _ in feature_rows], max_dt))
    features = []
    for frame in frames:
        if frame.index not in feature_pairs:
            raise DataError(f'影格 {frame.timestamp:.6f} 沒有對應的特徵檔', str(features_index))
        _, rel = feature_rows[feature_pairs[frame.index]]
        features.append(read_features(root / rel, frame.index, frame.timestamp))

    labels = read_labels(root / 'labels.txt') if (root / 'labels.txt').exists() else None

    static_paths: List[Optional[Path]] = []
    if (root / 'static.txt').exists():
        static_list = read_file_list(root / 'static.txt')
        static_pairs = dict(associate([f.timestamp for f in frames], [t for t, _ in static_list], max_dt))
        static_paths = [root / static_list[static_pairs[f.index]][1] if f.index in static_pairs else None
                        for f in frames]

    logger.info('讀取序列 %s：%d 影格', root, len(frames))
    return TumSequence(root, camera, frames, ground_truth, features, labels, static_paths)


def _write_rgb(path: Path, rgb: np.ndarray):
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(data, cv2.COLOR_RGB2BGR)):
        raise DataError('無法寫入影像', str(path))


def write_sequence(sequence, out_dir: Path, depth_scale: float = DEPTH_SCALE) -> Path:
    """
    以 TUM RGB-D 目錄格式寫出模擬序列

    Args:
        sequence: scene_sim.SimulatedSequence
        out_dir: 輸出目錄

    Returns:
        輸出目錄
    """
    root = Path(out_dir)
    for sub in ('rgb', 'depth', 'static', 'features'):
        (root / sub).mkdir(parents=True, exist_ok=True)

    rgb_lines, depth_lines, static_lines, feature_lines = [], [], [], []
    for frame, static, obs in zip(sequence.frames, sequence.ground_truth.static_renders,
                                  sequence.ground_truth.tracks):
        name = f'{frame.timestamp:.6f}.png'
        _write_rgb(root / 'rgb' / name, frame.rgb)
        _write_rgb(root / 'static' / name, static)
        depth = np.clip(np.rint(frame.depth * depth_scale), 0, 65535).astype(np.uint16)
        if not cv2.imwrite(str(root / 'depth' / name), depth):
            raise DataError('無法寫入深度影像', str(root / 'depth' / name))
        rgb_lines.append(f'{frame.timestamp:.6f} rgb/{name}')
        depth_lines.append(f'{frame.timestamp:.6f} depth/{name}')
        static_lines.append(f'{frame.timestamp:.6f} static/{name}')

        feature_name = f'features/{frame.frame_id:06d}.txt'
        with open(root / feature_name, 'w', encoding='utf-8') as f:
            for item in obs.items:
                f.write(f'{item.gaussian_id} {item.pixel[0]:.6f} {item.pixel[1]:.6f} '
                        f'{item.depth:.6f} {int(item.valid)}\n')
        feature_lines.append(f'{frame.frame_id} {frame.timestamp:.6f} {feature_name}')

    def write_list(name: str, header: str, lines: List[str]):
        with open(root / name, 'w', encoding='utf-8') as f:
            f.write(f'# {header}\n')
            f.write('\n'.join(lines) + ('\n' if lines else ''))

    write_list('rgb.txt', 'color images\n# timestamp filename', rgb_lines)
    write_list('depth.txt', 'depth maps\n# timestamp filename', depth_lines)
    write_list('static.txt', 'static-only renders\n# timestamp filename', static_lines)
    write_list('features.txt', 'feature tracks\n# frame_id timestamp filename', feature_lines)
    write_list('labels.txt', 'gaussian_id true_label',
               [f'{gid} {label}' for gid, label in sorted(sequence.ground_truth.labels.items())])

    write_camera(sequence.camera, root / 'camera.txt')

    write_trajectory(sequence.ground_truth.poses, root / 'groundtruth.txt')
    with open(root / 'scene_spec.json', 'w', encoding='utf-8') as f:
        json.dump(sequence.spec.to_dict(), f, ensure_ascii=False, indent=2)
    logger.info('寫出序列 %s（%d 影格）', root, len(sequence.frames))
    return root


# ===== 報告 =====

def write_report(report: Dict[str, object], path: Path) -> Tuple[Path, Path]:
    """
    寫出報告：可讀文字（.txt）與 CSV（key,value）

    Args:
        report: 扁平的報告字典
        path: 輸出路徑（副檔名會被替換）

    Returns:
        (文字檔路徑, CSV 路徑)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    txt_path, csv_path = path.with_suffix('.txt'), path.with_suffix('.csv')
    width = max((len(k) for k in report), default=0)

    def fmt(value):
        if isinstance(value, float):
            return f'{value:.6f}'
        return str(value)

    with open(txt_path, 'w', encoding='utf-8') as f:
        f.write('=' * 60 + '\n')
        f.write('執行報告\n')
        f.write('=' * 60 + '\n')
        for key, value in report.items():
            f.write(f'{key.ljust(width)} : {fmt(value)}\n')
    with open(csv_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['key', 'value'])
        for key, value in report.items():
            writer.writerow([key, fmt(value)])
    return txt_path, csv_path


# ===== 地圖 =====

_STAT_FIELDS = ('mean_reproj_error', 'depth_variation', 'observation_count', 'mean_epipolar_distance',
                'depth_mean', 'depth_m2', 'epipolar_count', 'gated_count')


def save_map(gmap: GaussianMap, path: Path):
    """將地圖存成 .npz"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = gmap.ids()
    gs = [gmap.get(gid) for gid in ids]
    cap = gmap.window_size + 1
    history = np.full((len(gs), cap), -1, dtype=int)
    for row, g in enumerate(gs):
        entries = list(g.label_history)
        history[row, :len(entries)] = entries
    np.savez(
        path,
        ids=np.array(ids, dtype=int),
        positions=np.array([g.position for g in gs]).reshape(-1, 3),
        rotations=np.array([g.rotation for g in gs]).reshape(-1, 4),
        scales=np.array([g.scale for g in gs]).reshape(-1, 3),
        opacities=np.array([g.opacity for g in gs], dtype=float),
        colors=np.array([g.color for g in gs]).reshape(-1, 3),
        sh_rest=np.array([np.zeros((3, 3)) if g.sh_rest is None else g.sh_rest for g in gs]).reshape(-1, 3, 3),
        labels=np.array([g.label for g in gs], dtype=int),
        history=history,
        stats=np.array([[getattr(g.stats, k) for k in _STAT_FIELDS] for g in gs], dtype=float).reshape(-1, 8),
        last_pixel=np.array([g.last_pixel if g.last_pixel is not None else (np.nan, np.nan)
                             for g in gs], dtype=float).reshape(-1, 2),
        deleted=np.array(sorted(gmap.deleted_ids), dtype=int),
        window_size=np.array(gmap.window_size),
    )


def load_map(path: Path) -> GaussianMap:
    """讀取 save_map 寫出的 .npz"""
    path = Path(path)
    if not path.exists():
        raise DataError('找不到地圖檔', str(path))
    try:
        data = np.load(path)
        gmap = GaussianMap(window_size=int(data['window_size']))
        for i, gid in enumerate(data['ids']):
            stats = MotionStats(**{k: (int(v) if k in ('observation_count', 'epipolar_count', 'gated_count')
                                       else float(v)) for k, v in zip(_STAT_FIELDS, data['stats'][i])})
            last_pixel = data['last_pixel'][i]
            sh_rest = data['sh_rest'][i]
            gmap.add(TaggedGaussian(
                id=int(gid),
                position=data['positions'][i].copy(),
                rotation=data['rotations'][i].copy(),
                scale=data['scales'][i].copy(),
                opacity=float(data['opacities'][i]),
                color=data['colors'][i].copy(),
                sh_rest=sh_rest.copy() if np.any(sh_rest) else None,
                label=int(data['labels'][i]),
                label_history=deque(int(x) for x in data['history'][i] if x >= 0),
                stats=stats,
                last_pixel=None if np.any(np.isnan(last_pixel)) else last_pixel.copy(),
            ))
        gmap.mark_deleted(int(x) for x in data['deleted'])
    except KeyError as e:
        raise DataError(f'地圖檔缺少欄位 {e}', str(path)) from None
    return gmap
