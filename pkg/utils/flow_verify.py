"""
光流驗證與動態 Gaussian 恢復

功能：
1. 關鍵影格之間的稀疏金字塔 LK 光流（cv2.calcOpticalFlowPyrLK）
2. 以靜態點光流擬合二維 Gaussian 模型（平均值 + 樣本共變異數）
3. 卡方檢定（2 自由度，顯著水準 0.05 → 5.991）
4. 通過檢定的動態候選重新標記為靜態，並清除刪除倒數
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence

import cv2
import numpy as np
from scipy.stats import chi2 as chi2_dist

from .errors import DimensionError, InsufficientDataError
from .gaussian_map import DYNAMIC, STATIC, GaussianMap

logger = logging.getLogger(__name__)

CHI2_THRESHOLD_2DOF = 5.991
COVARIANCE_FLOOR = 1e-4
MIN_FLOW_SAMPLES = 3


@dataclass(frozen=True)
class FlowModel:
    """
    靜態光流模型

    Attributes:
        mean: 平均光流 μ（像素/影格）
        covariance: 共變異數 Σ（已加下限）
        sample_count: 樣本數 n
    """
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError('共變異數必須是對稱 2x2 矩陣')
        if self.sample_count < MIN_FLOW_SAMPLES:
            raise ValueError(f'樣本數至少 {MIN_FLOW_SAMPLES}')
        object.__setattr__(self, 'mean', np.asarray(self.mean, dtype=float).reshape(2))
        object.__setattr__(self, 'covariance', cov)

    @property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.covariance)


class FlowResult(NamedTuple):
    """LK 光流結果：flows (N, 2)，valid (N,)"""
    flows: np.ndarray
    valid: np.ndarray


@dataclass
class RecoveryResult:
    """光流恢復結果"""
    recovered: List[int] = field(default_factory=list)
    rejected: List[int] = field(default_factory=list)
    no_flow: List[int] = field(default_factory=list)
    chi2: Dict[int, float] = field(default_factory=dict)
    model: Optional[FlowModel] = None


def _to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3:
        image = image.mean(axis=2)
    if image.dtype == np.uint8:
        return image
    # 浮點影像視為 [0, 1]
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def lk_flow(img_prev: np.ndarray, img_cur: np.ndarray, points: np.ndarray,
            window: int = 15, levels: int = 3, max_iterations: int = 30,
            epsilon: float = 0.01, min_eig_threshold: float = 1e-4) -> FlowResult:
    """
    稀疏金字塔 Lucas-Kanade 光流

    Args:
        img_prev: 前一張灰階影像（uint8 或 [0, 1] 浮點）
        img_cur: 目前灰階影像
        points: (N, 2) 前一張影像的像素
        window: 視窗邊長
        levels: 金字塔層數
        max_iterations: 每層最多迭代次數
        epsilon: 收斂門檻（像素）
        min_eig_threshold: 結構張量最小特徵值門檻

    Returns:
        FlowResult；結構張量接近奇異、超出邊界或起點太靠近邊緣的點 valid=False

    Raises:
        DimensionError: 兩張影像尺寸不同
    """
    prev = _to_uint8(img_prev)
    cur = _to_uint8(img_cur)
    if prev.shape != cur.shape:
        raise DimensionError(f'影像尺寸不一致: {prev.shape} vs {cur.shape}')

    points = np.asarray(points, dtype=np.float32).reshape(-1, 2)
    if len(points) == 0:
        return FlowResult(np.zeros((0, 2)), np.zeros(0, dtype=bool))

    height, width = prev.shape[:2]
    half = window / 2.0
    inside = ((points[:, 0] >= half) & (points[:, 0] <= width - 1 - half) &
              (points[:, 1] >= half) & (points[:, 1] <= height - 1 - half))

    lk_params = dict(
        winSize=(window, window),
        maxLevel=max(levels - 1, 0),
        criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, max_iterations, epsilon),
        minEigThreshold=min_eig_threshold,
    )
    p0 = points.reshape(-1, 1, 2)
    p1, status, _ = cv2.calcOpticalFlowPyrLK(prev, cur, p0, None, **lk_params)
    p1 = p1.reshape(-1, 2)

    flows = (p1 - points).astype(float)
    in_bounds = ((p1[:, 0] >= 0) & (p1[:, 0] <= width - 1) &
                 (p1[:, 1] >= 0) & (p1[:, 1] <= height - 1))
    valid = inside & (status.reshape(-1) == 1) & in_bounds & np.all(np.isfinite(flows), axis=1)
    flows[~valid] = 0.0
    return FlowResult(flows, valid)


def fit_flow_model(static_flows: Iterable[Sequence[float]],
                   floor: float = COVARIANCE_FLOOR) -> FlowModel:
    """
    擬合靜態光流模型

    Σ 使用 n-1 分母，之後一律加上 floor·I。

    Raises:
        InsufficientDataError: 樣本少於 3 筆
    """
    flows = np.asarray(list(static_flows), dtype=float).reshape(-1, 2)
    if len(flows) < MIN_FLOW_SAMPLES:
        raise InsufficientDataError(
            f'靜態光流樣本不足: 需要至少 {MIN_FLOW_SAMPLES} 筆，只有 {len(flows)} 筆')
    mean = flows.mean(axis=0)
    centered = flows - mean
    cov = centered.T @ centered / (len(flows) - 1)
    cov = 0.5 * (cov + cov.T)
    if np.linalg.matrix_rank(cov) < 2:
        logger.warning('靜態光流共變異數秩不足（n=%d），套用下限 %.1e', len(flows), floor)
    cov = cov + floor * np.eye(2)
    return FlowModel(mean, cov, len(flows))


def chi_square(flow: Sequence[float], model: FlowModel) -> float:
    """(V-μ)^T Σ^-1 (V-μ)"""
    d = np.asarray(flow, dtype=float).reshape(2) - model.mean
    return float(max(d @ np.linalg.solve(model.covariance, d), 0.0))


def chi2_threshold(significance: float = 0.05, dof: int = 2) -> float:
    """卡方分佈上尾門檻"""
    return float(chi2_dist.ppf(1.0 - significance, dof))


def select_static_points(gmap: GaussianMap, pixels: Mapping[int, np.ndarray],
                         width: int, height: int, max_points: int = 200,
                         grid: int = 4) -> List[int]:
    """
    挑選用來擬合光流模型的靜態點

    依 grid x grid 網格分桶後輪流取點，使樣本在影像上分散。

    Args:
        gmap: 地圖
        pixels: 前一關鍵影格中各 Gaussian 的追蹤像素
        width, height: 影像尺寸
        max_points: 最多點數

    Returns:
        Gaussian id（依挑選順序）
    """
    buckets: Dict[int, List[int]] = {}
    for gid in gmap.ids(STATIC):
        if gid not in pixels:
            continue
        u, v = pixels[gid]
        cx = min(max(int(u * grid / width), 0), grid - 1)
        cy = min(max(int(v * grid / height), 0), grid - 1)
        buckets.setdefault(cy * grid + cx, []).append(gid)

    chosen: List[int] = []
    queues = [buckets[k] for k in sorted(buckets)]
    depth = 0
    while len(chosen) < max_points and any(depth < len(q) for q in queues):
        for q in queues:
            if depth < len(q) and len(chosen) < max_points:
                chosen.append(q[depth])
        depth += 1
    return chosen


def verify_and_recover(gmap: GaussianMap, candidates: Iterable[int],
                       pixels_prev: Mapping[int, np.ndarray],
                       img_prev: np.ndarray, img_cur: np.ndarray,
                       model: Optional[FlowModel] = None,
                       threshold: float = CHI2_THRESHOLD_2DOF,
                       window: int = 15, levels: int = 3,
                       max_iterations: int = 30, epsilon: float = 0.01,
                       max_static_points: int = 200,
                       floor: float = COVARIANCE_FLOOR) -> RecoveryResult:
    """
    以光流恢復誤判為動態的 Gaussian

    model 為 None 時，先以靜態點在同一對影像上的光流擬合模型。
    χ² ≤ threshold 的候選改為靜態，標籤歷史重設為單一靜態項目。

    Args:
        gmap: 地圖（會被修改）
        candidates: 動態候選 id
        pixels_prev: 前一關鍵影格中各 Gaussian 的追蹤像素
        img_prev, img_cur: 前一 / 目前關鍵影格灰階影像
        model: 靜態光流模型
        threshold: 卡方門檻
        window, levels, max_iterations, epsilon: LK 參數（見 lk_flow）

    Returns:
        RecoveryResult

    Raises:
        InsufficientDataError: 需要自行擬合模型但有效靜態光流少於 3 筆
    """
    height, width = np.asarray(img_prev).shape[:2]
    result = RecoveryResult()

    if model is None:
        static_ids = select_static_points(gmap, pixels_prev, width, height, max_static_points)
        static_pts = np.array([pixels_prev[g] for g in static_ids]).reshape(-1, 2)
        static_flow = lk_flow(img_prev, img_cur, static_pts, window, levels, max_iterations, epsilon)
        model = fit_flow_model(static_flow.flows[static_flow.valid], floor)
    result.model = model

    ids = [gid for gid in candidates
           if gid in gmap and gmap.get(gid).label == DYNAMIC]
    tracked = [gid for gid in ids if gid in pixels_prev]
    result.no_flow.extend(gid for gid in ids if gid not in pixels_prev)
    if not tracked:
        return result

    pts = np.array([pixels_prev[gid] for gid in tracked]).reshape(-1, 2)
    flow = lk_flow(img_prev, img_cur, pts, window, levels, max_iterations, epsilon)
    for gid, vec, ok in zip(tracked, flow.flows, flow.valid):
        if not ok:
            result.no_flow.append(gid)
            continue
        value = chi_square(vec, model)
        result.chi2[gid] = value
        if value <= threshold:
            gmap.reset_history(gid, STATIC)
            result.recovered.append(gid)
        else:
            result.rejected.append(gid)

    if result.no_flow:
        logger.debug('%d 個動態候選沒有有效光流', len(result.no_flow))
    logger.info('光流恢復 %d / %d 個動態候選', len(result.recovered), len(ids))
    return result
