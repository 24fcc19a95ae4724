"""
靜態族群統計模型

功能：
1. 以自舉階段的 Gaussian 統計擬合四個一維 Gaussian（重投影、深度、觀測次數、極線）
2. 計算 GMM 靜態機率 P_static
3. 計算一元勢能 ψ_u（靜態 / 動態）
4. 依關鍵影格間隔重新擬合

每個元件在 Gaussian 自己對應的統計量上評估，並以峰值正規化，
使 P_static 落在 (0, 1]。
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np

from .errors import InsufficientDataError
from .gaussian_map import STATIC, GaussianMap, MotionStats

logger = logging.getLogger(__name__)

STAT_KINDS = ('reproj', 'depth', 'obs_count', 'epipolar')
DEFAULT_WEIGHTS = (0.25, 0.25, 0.25, 0.25)
VARIANCE_FLOOR = 1e-6
UNARY_EPSILON = 1e-6
MIN_SAMPLES = 8


class StatComponent(NamedTuple):
    """單一統計量的 Gaussian（平均值、變異數）"""
    mean: float
    variance: float


@dataclass(frozen=True)
class StaticStatModel:
    """
    靜態族群模型

    Attributes:
        components: 四個元件，依 STAT_KINDS 排列
        weights: 混合權重 π_k（總和為 1）
        sample_count: 擬合樣本數
    """
    components: Tuple[StatComponent, ...]
    weights: Tuple[float, ...] = DEFAULT_WEIGHTS
    sample_count: int = 0

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.components])

    @property
    def variances(self) -> np.ndarray:
        return np.array([c.variance for c in self.components])

    def to_dict(self) -> Dict[str, float]:
        """報表用的鍵值表示"""
        out = {'model_samples': self.sample_count}
        for kind, comp, weight in zip(STAT_KINDS, self.components, self.weights):
            out[f'model_{kind}_mean'] = comp.mean
            out[f'model_{kind}_variance'] = comp.variance
            out[f'model_{kind}_weight'] = weight
        return out


def normalize_weights(weights: Sequence[float]) -> Tuple[float, ...]:
    w = np.asarray(weights, dtype=float)
    if w.shape != (4,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError(f'混合權重必須是 4 個非負數: {weights}')
    w = w / w.sum()
    return tuple(float(x) for x in w)


def fit_static_model(stats: Iterable[MotionStats],
                     weights: Sequence[float] = DEFAULT_WEIGHTS,
                     variance_floor: float = VARIANCE_FLOOR,
                     min_samples: int = MIN_SAMPLES) -> StaticStatModel:
    """
    以動差匹配擬合靜態模型

    Args:
        stats: 靜態族群的運動統計
        weights: 混合權重（預設均勻 1/4）
        variance_floor: 變異數下限
        min_samples: 最少樣本數

    Returns:
        StaticStatModel

    Raises:
        InsufficientDataError: 樣本少於 min_samples
    """
    samples = np.array([s.as_vector() for s in stats], dtype=float).reshape(-1, 4)
    if len(samples) < min_samples:
        raise InsufficientDataError(
            f'自舉樣本不足: 需要至少 {min_samples} 筆，只有 {len(samples)} 筆')

    means = samples.mean(axis=0)
    variances = samples.var(axis=0, ddof=1)
    components = []
    for kind, mu, var in zip(STAT_KINDS, means, variances):
        if var < variance_floor:
            logger.warning('統計量 %s 的變異數 %.3g 低於下限，改用 %.3g', kind, var, variance_floor)
            var = variance_floor
        components.append(StatComponent(float(mu), float(var)))
    return StaticStatModel(tuple(components), normalize_weights(weights), len(samples))


def component_density(x: float, k: int, model: StaticStatModel) -> float:
    """
    第 k 個元件的峰值正規化密度 exp(-(x-μ)²/(2σ²))，值域 (0, 1]
    """
    comp = model.components[k]
    return math.exp(-(x - comp.mean) ** 2 / (2.0 * comp.variance))


def static_probability(stats: MotionStats, model: StaticStatModel) -> float:
    """P_static = Σ π_k · N_k(x_k)"""
    x = stats.as_vector()
    return float(sum(w * component_density(x[k], k, model)
                     for k, w in enumerate(model.weights)))


def static_probability_batch(values: np.ndarray, model: StaticStatModel) -> np.ndarray:
    """批次版本，values 為 (N, 4) 統計量"""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    z2 = (values - model.means) ** 2 / (2.0 * model.variances)
    return np.exp(-z2) @ np.asarray(model.weights)


def unary_from_probability(p_static, epsilon: float = UNARY_EPSILON) -> np.ndarray:
    """
    由 P_static 計算一元勢能

    Returns:
        (..., 2)：[ψ_u(靜態), ψ_u(動態)]
    """
    p = np.asarray(p_static, dtype=float)
    psi_static = -np.log(p)
    psi_dynamic = -np.log(1.0 - p + epsilon)
    return np.stack([psi_static, psi_dynamic], axis=-1)


def unary_potential(stats: MotionStats, model: StaticStatModel,
                    epsilon: float = UNARY_EPSILON) -> np.ndarray:
    """ψ_u(static) = -log P，ψ_u(dynamic) = -log(1 - P + ε)"""
    return unary_from_probability(static_probability(stats, model), epsilon)


def refit_static_model(gmap: GaussianMap, previous: StaticStatModel,
                       min_observations: int = 2,
                       variance_floor: float = VARIANCE_FLOOR,
                       min_samples: int = MIN_SAMPLES) -> StaticStatModel:
    """
    以目前靜態標籤的 Gaussian 重新擬合；樣本不足時沿用舊模型
    """
    stats = [gmap.get(gid).stats for gid in gmap.ids(STATIC)
             if gmap.get(gid).stats.observation_count >= min_observations]
    try:
        return fit_static_model(stats, previous.weights, variance_floor, min_samples)
    except InsufficientDataError:
        logger.info('重新擬合樣本不足（%d 筆），沿用原模型', len(stats))
        return previous


def collect_bootstrap_stats(gmap: GaussianMap, min_observations: int = 2) -> List[MotionStats]:
    """取出觀測次數足夠的 Gaussian 統計"""
    return [gmap.get(gid).stats for gid in gmap.ids()
            if gmap.get(gid).stats.observation_count >= min_observations]
