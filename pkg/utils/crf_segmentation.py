"""
全連接 CRF 動態分割

功能：
1. Potts 模型與兩種核函數（外觀：重投影誤差 + 觀測次數；位置：3D 位置 + 像素）
2. Gibbs 能量（O(N²) 精確加總）
3. 平均場推論（逐節點依序更新，自由能單調不增）
4. 時間視窗保留策略（動態比例達門檻且視窗填滿才刪除）
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .gaussian_map import DYNAMIC, GaussianMap
from .motion_stats import StaticStatModel, static_probability_batch, unary_from_probability

logger = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 5
CONVERGENCE_TOLERANCE = 1e-6


class CrfFeatures(NamedTuple):
    """節點特徵 f_i = (α_i, γ_i, P_i, p_i)"""
    alpha: float
    gamma: float
    position: np.ndarray
    pixel: np.ndarray


@dataclass(frozen=True)
class CrfProblem:
    """
    CRF 問題

    Attributes:
        ids: 節點對應的 Gaussian id
        unaries: (N, 2) 一元勢能 [ψ(靜態), ψ(動態)]
        alpha: (N,) 平均重投影誤差
        gamma: (N,) 觀測次數
        positions: (N, 3) 3D 位置
        pixels: (N, 2) 最近觀測像素
        bandwidths: (σ_α, σ_γ, σ_P, σ_p)
        kernel_weights: (ω¹, ω²)
    """
    ids: np.ndarray
    unaries: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    positions: np.ndarray
    pixels: np.ndarray
    bandwidths: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    kernel_weights: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if any(b <= 0 for b in self.bandwidths):
            raise ValueError(f'核頻寬必須為正: {self.bandwidths}')
        unaries = np.asarray(self.unaries, dtype=float)
        if not np.all(np.isfinite(unaries)) or np.any(unaries < 0):
            raise ValueError('一元勢能必須為有限非負值')

    def __len__(self) -> int:
        return len(self.ids)

    def features(self, i: int) -> CrfFeatures:
        return CrfFeatures(float(self.alpha[i]), float(self.gamma[i]),
                           self.positions[i], self.pixels[i])


@dataclass
class MarginalField:
    """每個節點為動態的機率 q_i"""
    q: np.ndarray


@dataclass
class MeanFieldResult:
    """平均場推論結果"""
    marginals: MarginalField
    labels: np.ndarray
    free_energy: List[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


def potts(x_i: int, x_j: int) -> int:
    return 1 if x_i != x_j else 0


def kernel_appearance(f_i: CrfFeatures, f_j: CrfFeatures, sigma_alpha: float,
                      sigma_gamma: float) -> float:
    """外觀核 exp(-|Δα|²/(2σ_α²) - |Δγ|²/(2σ_γ²))"""
    return math.exp(-(f_i.alpha - f_j.alpha) ** 2 / (2.0 * sigma_alpha ** 2)
                    - (f_i.gamma - f_j.gamma) ** 2 / (2.0 * sigma_gamma ** 2))


def kernel_position(f_i: CrfFeatures, f_j: CrfFeatures, sigma_P: float,
                    sigma_p: float) -> float:
    """位置核，距離未平方：exp(-‖ΔP‖/(2σ_P²) - ‖Δp‖/(2σ_p²))"""
    dP = float(np.linalg.norm(np.asarray(f_i.position) - np.asarray(f_j.position)))
    dp = float(np.linalg.norm(np.asarray(f_i.pixel) - np.asarray(f_j.pixel)))
    return math.exp(-dP / (2.0 * sigma_P ** 2) - dp / (2.0 * sigma_p ** 2))


def pairwise_potential(i: int, j: int, labels: Sequence[int], problem: CrfProblem) -> float:
    """ψ_p = μ(x_i, x_j) · (ω¹k¹ + ω²k²)"""
    if not potts(labels[i], labels[j]):
        return 0.0
    s_a, s_g, s_P, s_p = problem.bandwidths
    f_i, f_j = problem.features(i), problem.features(j)
    w1, w2 = problem.kernel_weights
    return w1 * kernel_appearance(f_i, f_j, s_a, s_g) + w2 * kernel_position(f_i, f_j, s_P, s_p)


def kernel_row(problem: CrfProblem, i: int) -> np.ndarray:
    """第 i 列的加權核 Σ_m ω^m k^m(f_i, f_j)，對角為 0"""
    s_a, s_g, s_P, s_p = problem.bandwidths
    w1, w2 = problem.kernel_weights
    appearance = np.exp(-(problem.alpha[i] - problem.alpha) ** 2 / (2.0 * s_a ** 2)
                        - (problem.gamma[i] - problem.gamma) ** 2 / (2.0 * s_g ** 2))
    dP = np.linalg.norm(problem.positions - problem.positions[i], axis=1)
    dp = np.linalg.norm(problem.pixels - problem.pixels[i], axis=1)
    position = np.exp(-dP / (2.0 * s_P ** 2) - dp / (2.0 * s_p ** 2))
    row = w1 * appearance + w2 * position
    row[i] = 0.0
    return row


def gibbs_energy(labels: Sequence[int], problem: CrfProblem) -> float:
    """E(X) = Σ ψ_u(x_i) + Σ_{i<j} ψ_p(x_i, x_j)"""
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    energy = float(problem.unaries[np.arange(n), labels].sum())
    for i in range(n - 1):
        row = kernel_row(problem, i)[i + 1:]
        differ = labels[i + 1:] != labels[i]
        energy += float(row[differ].sum())
    return energy


def _entropy_term(q: np.ndarray) -> float:
    """Σ [q log q + (1-q) log(1-q)]，0 log 0 = 0"""
    with np.errstate(divide='ignore', invalid='ignore'):
        a = np.where(q > 0, q * np.log(q), 0.0)
        b = np.where(q < 1, (1 - q) * np.log(1 - q), 0.0)
    return float(a.sum() + b.sum())


def free_energy(q: np.ndarray, problem: CrfProblem) -> float:
    """
    平均場自由能 F(q) = E_q[E] - H(q)

    成對期望 P(x_i ≠ x_j) = q_i(1-q_j) + (1-q_i)q_j，以 O(N²) 精確加總。
    """
    q = np.asarray(q, dtype=float)
    expected = float(np.sum((1 - q) * problem.unaries[:, 0] + q * problem.unaries[:, 1]))
    for i in range(len(q) - 1):
        row = kernel_row(problem, i)[i + 1:]
        qj = q[i + 1:]
        expected += float(np.sum(row * (q[i] * (1 - qj) + (1 - q[i]) * qj)))
    return expected + _entropy_term(q)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def mean_field_infer(problem: CrfProblem, iterations: int = DEFAULT_ITERATIONS,
                     tolerance: float = CONVERGENCE_TOLERANCE) -> MeanFieldResult:
    """
    平均場推論

    q_i 由一元勢能的 softmax 初始化，之後依固定順序逐節點更新：
    q_i = σ(-(ψ_i(1) - ψ_i(0) + Σ_j k_ij (1 - 2 q_j)))

    Args:
        problem: CRF 問題
        iterations: 最大迭代次數（≥ 1）
        tolerance: max|Δq| 小於此值視為收斂

    Returns:
        MeanFieldResult（邊際機率、硬標籤、每次迭代的自由能）
    """
    if iterations < 1:
        raise ValueError('iterations 必須 ≥ 1')
    n = len(problem)
    unary_gap = problem.unaries[:, 1] - problem.unaries[:, 0]
    q = np.array([_sigmoid(-g) for g in unary_gap], dtype=float)
    energies = [free_energy(q, problem)]
    converged = False
    done = 0

    for _ in range(iterations):
        max_change = 0.0
        for i in range(n):
            row = kernel_row(problem, i)
            message = float(np.dot(row, 1.0 - 2.0 * q))
            new_q = _sigmoid(-(unary_gap[i] + message))
            max_change = max(max_change, abs(new_q - q[i]))
            q[i] = new_q
        done += 1
        energies.append(free_energy(q, problem))
        if max_change < tolerance:
            converged = True
            break

    if not converged:
        logger.debug('平均場在 %d 次迭代內未收斂', iterations)
    # q = 0.5 時判為靜態
    labels = (q > 0.5).astype(int)
    return MeanFieldResult(MarginalField(q.copy()), labels, energies, converged, done)


# ===== 時間視窗保留 =====

def window_score(history: Iterable[int], n: int) -> float:
    """
    最近 min(n+1, |history|) 筆中動態標籤的比例

    Raises:
        ValueError: history 為空
    """
    entries = list(history)
    if not entries:
        raise ValueError('標籤歷史為空')
    recent = entries[-(n + 1):]
    return sum(1 for x in recent if x == DYNAMIC) / len(recent)


def apply_retention(gmap: GaussianMap, n: int, delete_threshold: float) -> List[int]:
    """
    刪除視窗填滿且動態比例 ≥ 門檻的 Gaussian，其餘動態 Gaussian 保留

    Returns:
        被刪除的 id
    """
    doomed = []
    for gid in gmap.ids(DYNAMIC):
        history = gmap.get(gid).label_history
        if len(history) < n + 1:
            continue
        if window_score(history, n) >= delete_threshold:
            doomed.append(gid)
    deleted = gmap.remove(doomed)
    if deleted:
        logger.info('時間視窗刪除 %d 個動態 Gaussian', len(deleted))
    return deleted


# ===== 由地圖建立問題 =====

def data_driven_bandwidths(alpha: np.ndarray, gamma: np.ndarray, positions: np.ndarray,
                           pixels: np.ndarray) -> Tuple[float, float, float, float]:
    """以目前地圖各量的標準差作為核頻寬，退化時改用 1"""
    def _std(values: np.ndarray) -> float:
        if values.ndim > 1:
            value = float(np.sqrt(np.mean(np.var(values, axis=0))))
        else:
            value = float(np.std(values))
        return value if value > 1e-6 else 1.0
    return (_std(alpha), _std(gamma), _std(positions), _std(pixels))


def build_problem(gmap: GaussianMap, model: StaticStatModel,
                  kernel_weights: Tuple[float, float] = (1.0, 1.0),
                  bandwidths: Optional[Tuple[float, float, float, float]] = None,
                  normalization: str = 'node_count',
                  min_observations: int = 2,
                  epsilon: float = 1e-6) -> CrfProblem:
    """
    由地圖建立 CRF 問題

    只納入觀測次數 ≥ min_observations 且有觀測像素的 Gaussian。
    normalization='node_count' 時核權重除以 (N-1)。
    """
    ids = [gid for gid in gmap.ids()
           if gmap.get(gid).stats.observation_count >= min_observations
           and gmap.get(gid).last_pixel is not None]
    gaussians = [gmap.get(gid) for gid in ids]
    stats = np.array([g.stats.as_vector() for g in gaussians]).reshape(-1, 4)
    alpha = stats[:, 0].copy()
    gamma = stats[:, 2].copy()
    positions = np.array([g.position for g in gaussians]).reshape(-1, 3)
    pixels = np.array([g.last_pixel for g in gaussians]).reshape(-1, 2)
    unaries = unary_from_probability(static_probability_batch(stats, model), epsilon)
    unaries = unaries.reshape(-1, 2)

    if bandwidths is None:
        bandwidths = data_driven_bandwidths(alpha, gamma, positions, pixels)
    weights = tuple(float(w) for w in kernel_weights)
    if normalization == 'node_count' and len(ids) > 1:
        weights = tuple(w / (len(ids) - 1) for w in weights)
    elif normalization not in ('node_count', 'none'):
        raise ValueError(f'未知的正規化方式: {normalization}')

    return CrfProblem(np.array(ids, dtype=int), unaries, alpha, gamma, positions, pixels,
                      tuple(float(b) for b in bandwidths), weights)


def apply_labels(gmap: GaussianMap, problem: CrfProblem, result: MeanFieldResult,
                 all_ids: Optional[Iterable[int]] = None) -> Tuple[int, int]:
    """
    將推論結果寫回地圖並記錄標籤歷史；未納入問題的 Gaussian 沿用舊標籤

    Returns:
        (動態數, 靜態數)
    """
    labelled = dict(zip(problem.ids.tolist(), result.labels.tolist()))
    for gid in (all_ids if all_ids is not None else gmap.ids()):
        label = labelled.get(gid, gmap.get(gid).label)
        gmap.set_label(gid, label)
    dynamic = sum(1 for x in labelled.values() if x == DYNAMIC)
    return dynamic, len(labelled) - dynamic


def write_label_dump(path: Path, problem: CrfProblem, result: MeanFieldResult):
    """每行 'id label q_dynamic'"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for gid, label, q in zip(problem.ids, result.labels, result.marginals.q):
            f.write(f'{int(gid)} {int(label)} {q:.6f}\n')
