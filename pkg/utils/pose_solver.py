"""
穩健位姿求解

功能：
1. 以靜態 Gaussian 的 3D 位置與 2D 觀測，用 Levenberg-Marquardt 求相機位姿
2. SE(3) 左擾動參數化（ω, v），解析 Jacobian
3. Huber 穩健核（IRLS），作用在 Mahalanobis 範數上
4. 多輪離群剔除（每輪後排除 χ² 超過門檻的點再重解）
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InsufficientDataError
from .geometry import Camera, CameraPose, MIN_DEPTH

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 6
INLIER_GATE_2DOF = 5.991


@dataclass(frozen=True)
class Correspondence:
    """3D-2D 對應（世界座標點、觀測像素、像素共變異數）"""
    world_point: np.ndarray
    pixel: np.ndarray
    pixel_cov: np.ndarray = None

    def __post_init__(self):
        cov = np.eye(2) if self.pixel_cov is None else np.asarray(self.pixel_cov, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
            raise ValueError('像素共變異數必須是對稱 2x2 矩陣')
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError('像素共變異數必須正定')
        object.__setattr__(self, 'world_point', np.asarray(self.world_point, dtype=float).reshape(3))
        object.__setattr__(self, 'pixel', np.asarray(self.pixel, dtype=float).reshape(2))
        object.__setattr__(self, 'pixel_cov', cov)


@dataclass(frozen=True)
class SolverOptions:
    """LM 參數"""
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 10.0
    max_damping: float = 1e10
    max_iterations: int = 20
    update_tolerance: float = 1e-8
    cost_tolerance: float = 1e-10
    robust: bool = True
    huber_delta: float = 1.345
    outlier_rounds: int = 1
    inlier_gate: float = INLIER_GATE_2DOF


@dataclass
class PoseResult:
    """位姿求解結果"""
    pose: CameraPose
    chi2: np.ndarray
    inliers: np.ndarray
    success: bool
    iterations: int
    initial_cost: float
    final_cost: float
    update_norm: float = 0.0


def huber(residual_norm: float, delta: float) -> Tuple[float, float]:
    """
    Huber 核

    Returns:
        (成本, IRLS 權重)；r ≤ δ 時為 (r²/2, 1)，否則 (δ(r - δ/2), δ/r)
    """
    if delta <= 0:
        raise ValueError('delta 必須為正')
    r = abs(residual_norm)
    if r <= delta:
        return 0.5 * r * r, 1.0
    return delta * (r - 0.5 * delta), delta / r


def _huber_batch(norms: np.ndarray, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    small = norms <= delta
    cost = np.where(small, 0.5 * norms ** 2, delta * (norms - 0.5 * delta))
    weight = np.where(small, 1.0, delta / np.maximum(norms, 1e-300))
    return cost, weight


def perturb(pose: CameraPose, delta: np.ndarray) -> CameraPose:
    """左擾動：R' = Exp(ω)R，t' = Exp(ω)t + v，delta = (ω, v)"""
    delta = np.asarray(delta, dtype=float)
    step = Rotation.from_rotvec(delta[:3])
    rotation = step * Rotation.from_quat(pose.rotation)
    translation = step.apply(pose.translation) + delta[3:]
    return CameraPose(rotation.as_quat(), translation, pose.timestamp)


def residual_jacobian(pose: CameraPose, camera: Camera, world_points: np.ndarray,
                      pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    殘差 r = p - π(R·P + t) 與其對 (ω, v) 的 Jacobian

    Args:
        world_points: (N, 3)
        pixels: (N, 2)

    Returns:
        (residuals (N, 2), jacobians (N, 2, 6), depth (N,))
    """
    pc = pose.transform(np.atleast_2d(world_points))
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    safe_z = np.where(z > MIN_DEPTH, z, MIN_DEPTH)
    projected = np.stack([camera.fx * x / safe_z + camera.cx,
                          camera.fy * y / safe_z + camera.cy], axis=1)
    residuals = np.atleast_2d(pixels) - projected

    n = len(pc)
    d_proj = np.zeros((n, 2, 3))
    d_proj[:, 0, 0] = camera.fx / safe_z
    d_proj[:, 0, 2] = -camera.fx * x / safe_z ** 2
    d_proj[:, 1, 1] = camera.fy / safe_z
    d_proj[:, 1, 2] = -camera.fy * y / safe_z ** 2

    # ∂Pc/∂ω = -[Pc]x，∂Pc/∂v = I
    d_point = np.zeros((n, 3, 6))
    d_point[:, 0, 1], d_point[:, 0, 2] = z, -y
    d_point[:, 1, 0], d_point[:, 1, 2] = -z, x
    d_point[:, 2, 0], d_point[:, 2, 1] = y, -x
    d_point[:, :, 3:] = np.eye(3)

    jacobians = -np.einsum('nij,njk->nik', d_proj, d_point)
    return residuals, jacobians, z


class _Problem:
    """堆疊好的對應資料"""

    def __init__(self, correspondences: Sequence[Correspondence], camera: Camera,
                 options: SolverOptions):
        self.camera = camera
        self.options = options
        self.points = np.stack([c.world_point for c in correspondences])
        self.pixels = np.stack([c.pixel for c in correspondences])
        info = np.linalg.inv(np.stack([c.pixel_cov for c in correspondences]))
        self.info = 0.5 * (info + np.transpose(info, (0, 2, 1)))
        # Σ^-1 = L L^T，白化殘差 e = L^T r
        self.whiten = np.transpose(np.linalg.cholesky(self.info), (0, 2, 1))

    def chi2(self, pose: CameraPose) -> np.ndarray:
        residuals, _, _ = residual_jacobian(pose, self.camera, self.points, self.pixels)
        return np.einsum('ni,nij,nj->n', residuals, self.info, residuals)

    def cost(self, pose: CameraPose, active: np.ndarray) -> float:
        norms = np.sqrt(np.maximum(self.chi2(pose), 0.0))[active]
        if self.options.robust:
            return float(_huber_batch(norms, self.options.huber_delta)[0].sum())
        return float(0.5 * np.sum(norms ** 2))

    def normal_equations(self, pose: CameraPose, active: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        residuals, jacobians, _ = residual_jacobian(pose, self.camera, self.points, self.pixels)
        e = np.einsum('nij,nj->ni', self.whiten, residuals)[active]
        Je = np.einsum('nij,njk->nik', self.whiten, jacobians)[active]
        if self.options.robust:
            _, w = _huber_batch(np.linalg.norm(e, axis=1), self.options.huber_delta)
        else:
            w = np.ones(len(e))
        H = np.einsum('n,nki,nkj->ij', w, Je, Je)
        g = np.einsum('n,nki,nk->i', w, Je, e)
        return H, g


def _levenberg_marquardt(problem: _Problem, initial: CameraPose,
                         active: np.ndarray) -> Tuple[CameraPose, bool, int, float, float, float]:
    opts = problem.options
    pose = initial
    cost = initial_cost = problem.cost(pose, active)
    lam = opts.initial_damping
    update_norm = 0.0
    iterations = 0

    for iterations in range(1, opts.max_iterations + 1):
        H, g = problem.normal_equations(pose, active)
        scaling = np.maximum(np.diag(H), 1e-12)
        while True:
            try:
                delta = np.linalg.solve(H + lam * np.diag(scaling), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                update_norm = float(np.linalg.norm(delta))
                if update_norm < opts.update_tolerance:
                    return pose, True, iterations, initial_cost, cost, update_norm
                candidate = perturb(pose, delta)
                candidate_cost = problem.cost(candidate, active)
                if candidate_cost < cost:
                    relative = (cost - candidate_cost) / max(cost, 1e-300)
                    pose, cost = candidate, candidate_cost
                    lam = max(lam / opts.damping_down, 1e-12)
                    break
            lam *= opts.damping_up
            if lam > opts.max_damping:
                # 任何阻尼都無法再降低成本：目前位姿即為極小值
                return pose, bool(np.isfinite(cost)), iterations, initial_cost, cost, update_norm
        if relative < opts.cost_tolerance:
            return pose, True, iterations, initial_cost, cost, update_norm

    return pose, True, iterations, initial_cost, cost, update_norm


def solve_pose(correspondences: Sequence[Correspondence], initial_pose: CameraPose,
               camera: Camera, options: SolverOptions = SolverOptions()) -> PoseResult:
    """
    以 LM 最小化 Σ ρ(‖p - π(R·P + t)‖²_Σ)

    Args:
        correspondences: 3D-2D 對應（至少 6 筆）
        initial_pose: 初始位姿
        camera: 相機內參
        options: 求解參數

    Returns:
        PoseResult；發散時回傳初始位姿且 success=False

    Raises:
        InsufficientDataError: 對應少於 6 筆
    """
    if len(correspondences) < MIN_CORRESPONDENCES:
        raise InsufficientDataError(
            f'對應點不足: 需要至少 {MIN_CORRESPONDENCES} 筆，只有 {len(correspondences)} 筆')

    problem = _Problem(correspondences, camera, options)
    active = np.ones(len(correspondences), dtype=bool)
    pose = initial_pose
    total_iterations = 0
    first_cost = None
    final_cost = 0.0
    update_norm = 0.0

    for round_index in range(max(options.outlier_rounds, 1)):
        solved, ok, iterations, start_cost, end_cost, update_norm = _levenberg_marquardt(
            problem, pose, active)
        total_iterations += iterations
        if first_cost is None:
            first_cost = start_cost
        if not ok:
            logger.warning('位姿求解發散，沿用初始位姿')
            chi2 = problem.chi2(initial_pose)
            return PoseResult(initial_pose, chi2, chi2 <= options.inlier_gate, False,
                              total_iterations, first_cost, first_cost, update_norm)
        pose, final_cost = solved, end_cost
        if round_index + 1 == options.outlier_rounds:
            break
        next_active = problem.chi2(pose) <= options.inlier_gate
        if next_active.sum() < MIN_CORRESPONDENCES or np.array_equal(next_active, active):
            break
        active = next_active

    chi2 = problem.chi2(pose)
    inliers = chi2 <= options.inlier_gate
    logger.debug('位姿求解完成：%d 次迭代，內點 %d / %d',
                 total_iterations, int(inliers.sum()), len(inliers))
    return PoseResult(pose, chi2, inliers, True, total_iterations, first_cost,
                      final_cost, update_norm)


def correspondences_from_arrays(world_points: np.ndarray, pixels: np.ndarray,
                                pixel_sigma: float = 1.0) -> List[Correspondence]:
    cov = (pixel_sigma ** 2) * np.eye(2)
    return [Correspondence(p, q, cov) for p, q in zip(np.atleast_2d(world_points),
                                                      np.atleast_2d(pixels))]
