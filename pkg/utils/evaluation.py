"""
評估指標

功能：
1. ATE：時間戳記配對 + Umeyama 剛體對齊（無尺度），RMSE 與 STD
2. 渲染品質：PSNR、SSIM
3. 動態標籤的 precision / recall
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Tuple

import numpy as np

from .dataset_io import MAX_TIME_DIFF, associate
from .errors import DimensionError, InsufficientDataError
from .gaussian_map import DYNAMIC
from .geometry import Trajectory
from .splat_render import ssim

logger = logging.getLogger(__name__)

MIN_ATE_PAIRS = 3


@dataclass
class AteResult:
    """ATE 結果（公尺）"""
    rmse: float
    std: float
    mean: float
    pair_count: int
    errors: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray


def umeyama_alignment(source: np.ndarray, target: np.ndarray,
                      with_scale: bool = False) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    求 target ≈ s·R·source + t 的最小平方解

    Args:
        source: (N, 3)
        target: (N, 3)
        with_scale: 是否估計尺度（RGB-D 預設不估計）

    Returns:
        (R, t, s)
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.shape != target.shape:
        raise DimensionError(f'點集尺寸不一致: {source.shape} vs {target.shape}')
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    src, dst = source - mu_s, target - mu_t
    cov = dst.T @ src / len(source)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = 1.0
    if with_scale:
        var_s = np.mean(np.sum(src ** 2, axis=1))
        scale = float(np.trace(np.diag(D) @ S) / var_s) if var_s > 0 else 1.0
    t = mu_t - scale * R @ mu_s
    return R, t, scale


def evaluate_ate(estimated: Trajectory, ground_truth: Trajectory,
                 max_dt: float = MAX_TIME_DIFF) -> AteResult:
    """
    絕對軌跡誤差

    以相機中心計算；先依時間戳記配對，再做無尺度的 Umeyama 對齊。

    Raises:
        InsufficientDataError: 可配對的位姿少於 3 組
    """
    pairs = associate(estimated.timestamps, ground_truth.timestamps, max_dt)
    if len(pairs) < MIN_ATE_PAIRS:
        raise InsufficientDataError(
            f'ATE 可配對位姿不足: 需要至少 {MIN_ATE_PAIRS} 組，只有 {len(pairs)} 組')
    est = np.stack([estimated[i].center() for i, _ in pairs])
    gt = np.stack([ground_truth[j].center() for _, j in pairs])
    R, t, _ = umeyama_alignment(est, gt)
    aligned = est @ R.T + t
    errors = np.linalg.norm(aligned - gt, axis=1)
    return AteResult(
        rmse=float(np.sqrt(np.mean(errors ** 2))),
        std=float(np.std(errors)),
        mean=float(np.mean(errors)),
        pair_count=len(pairs),
        errors=errors,
        rotation=R,
        translation=t,
    )


def psnr(rendered: np.ndarray, target: np.ndarray, max_value: float = 1.0) -> float:
    if np.shape(rendered) != np.shape(target):
        raise DimensionError(f'影像尺寸不一致: {np.shape(rendered)} vs {np.shape(target)}')
    mse = float(np.mean((np.asarray(rendered, dtype=float) - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse)


def render_quality(pairs: Iterable[Tuple[np.ndarray, np.ndarray]]) -> Tuple[float, float]:
    """多張影像的平均 (PSNR, SSIM)；PSNR 為無限大時以 100 dB 計"""
    psnrs, ssims = [], []
    for rendered, target in pairs:
        psnrs.append(min(psnr(rendered, target), 100.0))
        ssims.append(ssim(rendered, target))
    if not psnrs:
        return 0.0, 0.0
    return float(np.mean(psnrs)), float(np.mean(ssims))


@dataclass
class LabelMetrics:
    """動態標籤評估（已刪除的 Gaussian 視為預測為動態）"""
    precision: float
    recall: float
    true_positive: int
    false_positive: int
    false_negative: int
    true_negative: int

    @property
    def false_dynamic(self) -> int:
        return self.false_positive


def label_metrics(predicted: Dict[int, int], truth: Dict[int, int],
                  deleted: Iterable[int] = ()) -> LabelMetrics:
    """
    以真實標籤評估動態預測

    只評估有真實標籤且出現在地圖（或已刪除）的 Gaussian；
    deleted 只放因動態標籤被刪除的 id，修剪掉的靜態 Gaussian 不應列入。
    分母為 0 時 precision / recall 記為 1。
    """
    merged = dict(predicted)
    for gid in deleted:
        merged[gid] = DYNAMIC
    tp = fp = fn = tn = 0
    for gid, label in merged.items():
        if gid not in truth:
            continue
        actual = truth[gid]
        if label == DYNAMIC and actual == DYNAMIC:
            tp += 1
        elif label == DYNAMIC:
            fp += 1
        elif actual == DYNAMIC:
            fn += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return LabelMetrics(precision, recall, tp, fp, fn, tn)
