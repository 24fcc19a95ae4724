"""
CPU 3D Gaussian Splatting

功能：
1. Gaussian 投影（EWA，螢幕共變異數 +0.3 px²）
2. 前到後 alpha 合成（依深度排序，透射率 < 1e-4 提前終止）
3. 損失：L1 + SSIM 光度損失，動態 Gaussian 不透明度懲罰
4. 解析反向傳播（顏色、不透明度、位置、尺度、旋轉、一階 SH）
5. 高斯金字塔由粗到細最佳化（SGD，可選 Adam；不透明度 logit、尺度 log 空間）
6. 修剪與加密、動態遮罩渲染、影像與損失紀錄輸出

影像一律為 (H, W, 3) 的 [0, 1] 浮點陣列，像素中心在整數座標。
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy.signal import convolve2d
from scipy.special import expit, logit

from .errors import DimensionError
from .gaussian_map import DYNAMIC, STATIC, FrameObservations, GaussianMap
from .geometry import Camera, CameraPose, quaternion_to_matrix

logger = logging.getLogger(__name__)

NEAR_PLANE = 0.01
OPACITY_EPSILON = 1e-6
FRUSTUM_MARGIN = 1.3
COVARIANCE_DILATION = 0.3
TRANSMITTANCE_EPSILON = 1e-4
SH_C1 = 0.4886025119029199
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# ===== 參數 =====

@dataclass
class GaussianParams:
    """
    堆疊好的 Gaussian 參數

    Attributes:
        ids: (N,) Gaussian id
        positions: (N, 3)
        rotations: (N, 4) 四元數 (x, y, z, w)
        scales: (N, 3)
        opacities: (N,)
        colors: (N, 3) SH 0 階（直接 RGB）
        labels: (N,) 靜態 / 動態
        sh_rest: (N, 3, 3) 一階 SH 係數（None 表示 0 階）
    """
    ids: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    labels: np.ndarray
    sh_rest: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.ids)

    def copy(self) -> 'GaussianParams':
        return GaussianParams(
            self.ids.copy(), self.positions.copy(), self.rotations.copy(),
            self.scales.copy(), self.opacities.copy(), self.colors.copy(),
            self.labels.copy(), None if self.sh_rest is None else self.sh_rest.copy())

    def subset(self, mask: np.ndarray) -> 'GaussianParams':
        return GaussianParams(
            self.ids[mask], self.positions[mask], self.rotations[mask], self.scales[mask],
            self.opacities[mask], self.colors[mask], self.labels[mask],
            None if self.sh_rest is None else self.sh_rest[mask])

    @classmethod
    def empty(cls) -> 'GaussianParams':
        return cls(np.zeros(0, dtype=int), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=int))


def params_from_gaussians(gaussians: Iterable, sh_degree: int = 0) -> GaussianParams:
    """由 TaggedGaussian / GaussianView 序列建立參數陣列"""
    items = list(gaussians)
    if not items:
        params = GaussianParams.empty()
        if sh_degree >= 1:
            params.sh_rest = np.zeros((0, 3, 3))
        return params
    sh_rest = None
    if sh_degree >= 1:
        sh_rest = np.stack([np.zeros((3, 3)) if getattr(g, 'sh_rest', None) is None
                            else np.asarray(g.sh_rest, dtype=float) for g in items])
    return GaussianParams(
        ids=np.array([g.id for g in items], dtype=int),
        positions=np.stack([np.asarray(g.position, dtype=float) for g in items]),
        rotations=np.stack([np.asarray(g.rotation, dtype=float) for g in items]),
        scales=np.stack([np.asarray(g.scale, dtype=float) for g in items]),
        opacities=np.array([g.opacity for g in items], dtype=float),
        colors=np.stack([np.asarray(g.color, dtype=float) for g in items]),
        labels=np.array([g.label for g in items], dtype=int),
        sh_rest=sh_rest,
    )


def params_from_map(gmap: GaussianMap, sh_degree: int = 0) -> GaussianParams:
    return params_from_gaussians((gmap.get(gid) for gid in gmap.ids()), sh_degree)


def apply_params(gmap: GaussianMap, params: GaussianParams):
    """將最佳化後的參數寫回地圖（已刪除的 id 略過）"""
    for i, gid in enumerate(params.ids):
        if gid not in gmap:
            continue
        g = gmap.get(int(gid))
        g.position = params.positions[i].copy()
        g.rotation = params.rotations[i].copy()
        g.scale = params.scales[i].copy()
        g.opacity = float(params.opacities[i])
        g.color = params.colors[i].copy()
        if params.sh_rest is not None:
            g.sh_rest = params.sh_rest[i].copy()


# ===== 投影 =====

@dataclass
class Projection:
    """批次投影結果（反向傳播需要的中間量）"""
    pc: np.ndarray
    means2d: np.ndarray
    J: np.ndarray
    T: np.ndarray
    Rg: np.ndarray
    M: np.ndarray
    cov3: np.ndarray
    cov2: np.ndarray
    conic: np.ndarray
    radius: np.ndarray
    colors: np.ndarray
    view_dirs: Optional[np.ndarray]
    view_norms: Optional[np.ndarray]
    visible: np.ndarray


class ProjectedGaussian(NamedTuple):
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    culled: bool


def _sh_basis(dirs: np.ndarray) -> np.ndarray:
    """一階 SH 基底 C1·(-y, z, -x)，(N, 3)"""
    return SH_C1 * np.stack([-dirs[:, 1], dirs[:, 2], -dirs[:, 0]], axis=1)


def project_gaussians(params: GaussianParams, pose: CameraPose, camera: Camera,
                      near: float = NEAR_PLANE) -> Projection:
    """
    投影所有 Gaussian

    Σ3 = (R_g S)(R_g S)^T，Σ2 = J W Σ3 W^T J^T + 0.3·I；
    z ≤ near、中心超出 1.3 倍視野 (|x/z|, |y/z|)，或 3σ 範圍完全落在影像外的 Gaussian 視為剔除。
    近平面附近的離軸 Gaussian 的 Jacobian 會爆大，必須先以視錐剔除。
    """
    n = len(params)
    R = pose.R
    pc = params.positions @ R.T + pose.t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    visible = z > near
    zs = np.where(visible, z, 1.0)
    limit_x = FRUSTUM_MARGIN * max(camera.cx + 0.5, camera.width - 0.5 - camera.cx) / camera.fx
    limit_y = FRUSTUM_MARGIN * max(camera.cy + 0.5, camera.height - 0.5 - camera.cy) / camera.fy
    visible &= (np.abs(x / zs) <= limit_x) & (np.abs(y / zs) <= limit_y)

    means2d = np.stack([camera.fx * x / zs + camera.cx, camera.fy * y / zs + camera.cy], axis=1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / zs
    J[:, 0, 2] = -camera.fx * x / zs ** 2
    J[:, 1, 1] = camera.fy / zs
    J[:, 1, 2] = -camera.fy * y / zs ** 2

    Rg = quaternion_to_matrix(params.rotations) if n else np.zeros((0, 3, 3))
    M = Rg * params.scales[:, None, :]
    cov3 = M @ np.transpose(M, (0, 2, 1))
    T = J @ R
    cov2 = T @ cov3 @ np.transpose(T, (0, 2, 1)) + COVARIANCE_DILATION * np.eye(2)

    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lambda_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(3.0 * np.sqrt(lambda_max))

    visible &= ((means2d[:, 0] + radius >= 0) & (means2d[:, 0] - radius <= camera.width - 1) &
                (means2d[:, 1] + radius >= 0) & (means2d[:, 1] - radius <= camera.height - 1))

    colors = params.colors.copy()
    view_dirs = view_norms = None
    if params.sh_rest is not None:
        offset = params.positions - pose.center()
        view_norms = np.maximum(np.linalg.norm(offset, axis=1), 1e-12)
        view_dirs = offset / view_norms[:, None]
        colors = colors + np.einsum('nk,nkc->nc', _sh_basis(view_dirs), params.sh_rest)

    return Projection(pc, means2d, J, T, Rg, M, cov3, cov2, conic, radius, colors,
                      view_dirs, view_norms, visible)


def project_gaussian(g, pose: CameraPose, camera: Camera) -> ProjectedGaussian:
    """單一 Gaussian 的 2D 平均值、螢幕共變異數與深度（在相機後方或視錐外即標記剔除）"""
    proj = project_gaussians(params_from_gaussians([g]), pose, camera)
    return ProjectedGaussian(proj.means2d[0], proj.cov2[0], float(proj.pc[0, 2]),
                             not bool(proj.visible[0]))


# ===== 合成 =====

@dataclass
class RenderedImage:
    """渲染結果：rgb (H, W, 3)、depth (H, W)、final_transmittance (H, W)"""
    rgb: np.ndarray
    depth: np.ndarray
    final_transmittance: np.ndarray

    @property
    def accumulated_alpha(self) -> np.ndarray:
        return 1.0 - self.final_transmittance

    def normalized_depth(self, eps: float = 1e-6) -> np.ndarray:
        """以累積不透明度正規化的深度，無覆蓋處為 0"""
        acc = self.accumulated_alpha
        return np.where(acc > eps, self.depth / np.maximum(acc, eps), 0.0)


@dataclass
class _Fragments:
    """依 (像素, 深度, id) 排序並補齊成 (P, K) 的片段"""
    gauss: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    power: np.ndarray
    alpha: np.ndarray
    row: np.ndarray
    rank: np.ndarray
    pixels: np.ndarray
    include: np.ndarray
    t_before: np.ndarray
    alpha_dense: np.ndarray
    color_dense: np.ndarray


@dataclass
class RenderCache:
    params: GaussianParams
    pose: CameraPose
    camera: Camera
    projection: Projection
    fragments: Optional[_Fragments]


def _build_fragments(params: GaussianParams, proj: Projection, camera: Camera,
                     include: np.ndarray):
    width, height = camera.width, camera.height
    idx = np.nonzero(proj.visible & include)[0]
    if len(idx) == 0:
        return None
    u, v = proj.means2d[idx, 0], proj.means2d[idx, 1]
    r = proj.radius[idx]
    x0 = np.clip(np.floor(u - r), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.ceil(u + r), 0, width - 1).astype(np.int64)
    y0 = np.clip(np.floor(v - r), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.ceil(v + r), 0, height - 1).astype(np.int64)
    wx = x1 - x0 + 1
    counts = wx * (y1 - y0 + 1)
    total = int(counts.sum())
    if total == 0:
        return None

    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = x0[owner] + local % wx[owner]
    py = y0[owner] + local // wx[owner]
    gauss = idx[owner]

    dx = px - proj.means2d[gauss, 0]
    dy = py - proj.means2d[gauss, 1]
    ca, cb, cc = proj.conic[gauss, 0], proj.conic[gauss, 1], proj.conic[gauss, 2]
    power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
    alpha = params.opacities[gauss] * np.exp(power)
    pixel = py * width + px

    order = np.lexsort((params.ids[gauss], proj.pc[gauss, 2], pixel))
    gauss, dx, dy, power, alpha, pixel = (gauss[order], dx[order], dy[order],
                                          power[order], alpha[order], pixel[order])

    pixels, starts, per_pixel = np.unique(pixel, return_index=True, return_counts=True)
    row = np.repeat(np.arange(len(pixels)), per_pixel)
    rank = np.arange(len(pixel)) - np.repeat(starts, per_pixel)
    k = int(per_pixel.max())

    alpha_dense = np.zeros((len(pixels), k))
    alpha_dense[row, rank] = alpha
    t_all = np.cumprod(1.0 - alpha_dense, axis=1)
    t_before = np.hstack([np.ones((len(pixels), 1)), t_all[:, :-1]])
    include_dense = t_before >= TRANSMITTANCE_EPSILON
    alpha_dense = np.where(include_dense, alpha_dense, 0.0)
    t_all = np.cumprod(1.0 - alpha_dense, axis=1)
    t_before = np.hstack([np.ones((len(pixels), 1)), t_all[:, :-1]])

    color_dense = np.zeros((len(pixels), k, 3))
    color_dense[row, rank] = proj.colors[gauss]
    return _Fragments(gauss, dx, dy, power, alpha, row, rank, pixels, include_dense,
                      t_before, alpha_dense, color_dense), t_all[:, -1], proj.pc[gauss, 2]


def composite(params: GaussianParams, pose: CameraPose, camera: Camera,
              include: Optional[np.ndarray] = None, return_cache: bool = False):
    """
    前到後 alpha 合成

    C = Σ c_i α'_i Π_{j<i}(1 - α'_j)，α'_i = opacity · exp(-½ dᵀ Σ2⁻¹ d)。
    深度以相同權重合成；透射率低於 1e-4 後的片段不再計入。

    Args:
        params: Gaussian 參數
        pose: 相機位姿
        camera: 相機內參（決定輸出尺寸）
        include: (N,) 布林遮罩，None 表示全部
        return_cache: 是否一併回傳反向傳播用的快取

    Returns:
        RenderedImage，或 (RenderedImage, RenderCache)
    """
    height, width = camera.height, camera.width
    include = np.ones(len(params), dtype=bool) if include is None else np.asarray(include, dtype=bool)
    proj = project_gaussians(params, pose, camera)
    built = _build_fragments(params, proj, camera, include)

    rgb = np.zeros((height * width, 3))
    depth = np.zeros(height * width)
    transmittance = np.ones(height * width)
    fragments = None
    if built is not None:
        fragments, final_t, z_sorted = built
        weights = fragments.alpha_dense * fragments.t_before
        rgb[fragments.pixels] = np.einsum('pk,pkc->pc', weights, fragments.color_dense)
        z_dense = np.zeros_like(weights)
        z_dense[fragments.row, fragments.rank] = z_sorted
        depth[fragments.pixels] = np.sum(weights * z_dense, axis=1)
        transmittance[fragments.pixels] = final_t

    image = RenderedImage(rgb.reshape(height, width, 3), depth.reshape(height, width),
                          transmittance.reshape(height, width))
    if return_cache:
        return image, RenderCache(params, pose, camera, proj, fragments)
    return image


def render_label_mask(params: GaussianParams, pose: CameraPose, camera: Camera,
                      label: int = DYNAMIC) -> np.ndarray:
    """指定標籤的 Gaussian 在影像上的累積不透明度（0~1）"""
    image = composite(params, pose, camera, include=params.labels == label)
    return image.accumulated_alpha


# ===== SSIM =====

def _gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    return g / g.sum()


def _window_size(shape: Tuple[int, ...], size: int = 11) -> int:
    size = min(size, shape[0], shape[1])
    return size if size % 2 == 1 else size - 1


def _filter(image: np.ndarray, g: np.ndarray) -> np.ndarray:
    return convolve2d(convolve2d(image, g[None, :], mode='valid'), g[:, None], mode='valid')


def _filter_adjoint(grad: np.ndarray, g: np.ndarray) -> np.ndarray:
    return convolve2d(convolve2d(grad, g[:, None], mode='full'), g[None, :], mode='full')


def _as_channels(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    return image[:, :, None] if image.ndim == 2 else image


def ssim_with_grad(a: np.ndarray, b: np.ndarray, window: int = 11,
                   sigma: float = 1.5) -> Tuple[float, np.ndarray]:
    """
    SSIM 及其對 a 的梯度

    11x11 Gaussian 視窗（σ=1.5），影像小於視窗時縮成不超過短邊的最大奇數；
    對所有視窗與通道取平均。

    Raises:
        DimensionError: 尺寸不一致
    """
    if np.shape(a) != np.shape(b):
        raise DimensionError(f'SSIM 影像尺寸不一致: {np.shape(a)} vs {np.shape(b)}')
    x, y = _as_channels(a), _as_channels(b)
    g = _gaussian_window(_window_size(x.shape, window), sigma)
    grad = np.zeros_like(x)
    total = 0.0
    channels = x.shape[2]

    for ch in range(channels):
        xc, yc = x[:, :, ch], y[:, :, ch]
        mu_x, mu_y = _filter(xc, g), _filter(yc, g)
        sxx = _filter(xc * xc, g) - mu_x * mu_x
        syy = _filter(yc * yc, g) - mu_y * mu_y
        sxy = _filter(xc * yc, g) - mu_x * mu_y
        a1 = 2.0 * mu_x * mu_y + SSIM_C1
        a2 = 2.0 * sxy + SSIM_C2
        b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
        b2 = sxx + syy + SSIM_C2
        s = (a1 * a2) / (b1 * b2)
        count = s.size
        total += float(s.mean())

        scale = 1.0 / (count * channels)
        d_mu = scale * s * (2.0 * mu_y / a1 - 2.0 * mu_y / a2 - 2.0 * mu_x / b1 + 2.0 * mu_x / b2)
        d_m2 = scale * (-s / b2)
        d_mxy = scale * (2.0 * s / a2)
        grad[:, :, ch] = (_filter_adjoint(d_mu, g) + 2.0 * xc * _filter_adjoint(d_m2, g)
                          + yc * _filter_adjoint(d_mxy, g))

    grad = grad.reshape(np.shape(a))
    return total / channels, grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return ssim_with_grad(a, b)[0]


# ===== 損失 =====

@dataclass(frozen=True)
class LossWeights:
    """L = photometric·[(1-λ)L1 + λ(1-SSIM)] + dynamic·Σ α²"""
    photometric: float = 0.8
    dynamic: float = 0.2
    ssim_lambda: float = 0.2


@dataclass
class LossValue:
    total: float
    photometric: float
    dynamic: float
    grad_image: np.ndarray
    grad_dynamic_opacity: np.ndarray


def _check_lambda(lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f'λ 必須在 [0, 1]: {lam}')


def photometric_ssim_loss(rendered: np.ndarray, target: np.ndarray, lam: float = 0.2) -> float:
    """(1-λ)·mean|I_r - I_gt| + λ·(1 - SSIM)"""
    _check_lambda(lam)
    if np.shape(rendered) != np.shape(target):
        raise DimensionError(f'影像尺寸不一致: {np.shape(rendered)} vs {np.shape(target)}')
    l1 = float(np.mean(np.abs(np.asarray(rendered, dtype=float) - target)))
    if lam == 0.0:
        return l1
    return (1.0 - lam) * l1 + lam * (1.0 - ssim(rendered, target))


def total_loss(rendered: np.ndarray, target: np.ndarray, dynamic_opacities: np.ndarray,
               weights: LossWeights = LossWeights()) -> LossValue:
    """
    總損失與梯度

    Returns:
        LossValue（對影像的梯度、對動態 Gaussian 不透明度的梯度 2·λ_dyn·α）
    """
    _check_lambda(weights.ssim_lambda)
    if np.shape(rendered) != np.shape(target):
        raise DimensionError(f'影像尺寸不一致: {np.shape(rendered)} vs {np.shape(target)}')
    rendered = np.asarray(rendered, dtype=float)
    diff = rendered - target
    lam = weights.ssim_lambda
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lam) * np.sign(diff) / diff.size
    photometric = (1.0 - lam) * l1
    if lam > 0.0:
        value, ssim_grad = ssim_with_grad(rendered, target)
        photometric += lam * (1.0 - value)
        grad = grad - lam * ssim_grad

    opacities = np.asarray(dynamic_opacities, dtype=float)
    dynamic = float(np.sum(opacities ** 2))
    total = weights.photometric * photometric + weights.dynamic * dynamic
    return LossValue(total, photometric, dynamic, weights.photometric * grad,
                     2.0 * weights.dynamic * opacities)


# ===== 反向傳播 =====

@dataclass
class GaussianGradients:
    """每個 Gaussian 的梯度，排列與 GaussianParams 相同"""
    colors: np.ndarray
    opacities: np.ndarray
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    sh_rest: Optional[np.ndarray] = None


def _rotation_derivatives(q: np.ndarray) -> np.ndarray:
    """dR/d(x, y, z, w)，(N, 4, 3, 3)"""
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(x)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dx = mat([[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    dy = mat([[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]])
    dz = mat([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]])
    dw = mat([[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]])
    return np.stack([dx, dy, dz, dw], axis=1)


def backward_from_image(cache: RenderCache, grad_image: np.ndarray) -> GaussianGradients:
    """由 ∂L/∂I_r 反向傳播到每個 Gaussian 的參數"""
    params, proj, camera = cache.params, cache.projection, cache.camera
    n = len(params)
    grads = GaussianGradients(
        colors=np.zeros((n, 3)), opacities=np.zeros(n), positions=np.zeros((n, 3)),
        scales=np.zeros((n, 3)), rotations=np.zeros((n, 4)),
        sh_rest=None if params.sh_rest is None else np.zeros_like(params.sh_rest))
    frags = cache.fragments
    if frags is None:
        return grads

    d_pixel = np.asarray(grad_image, dtype=float).reshape(-1, 3)[frags.pixels]
    a_d, c_d, t_b = frags.alpha_dense, frags.color_dense, frags.t_before
    count, k = a_d.shape

    # S_k：第 k 個片段之後的合成顏色
    suffix = np.zeros_like(c_d)
    for j in range(k - 2, -1, -1):
        suffix[:, j] = a_d[:, j + 1, None] * c_d[:, j + 1] + (1.0 - a_d[:, j + 1, None]) * suffix[:, j + 1]
    d_alpha_dense = np.where(frags.include, t_b * np.einsum('pc,pkc->pk', d_pixel, c_d - suffix), 0.0)
    d_color_dense = (a_d * t_b)[:, :, None] * d_pixel[:, None, :]

    d_alpha = d_alpha_dense[frags.row, frags.rank]
    d_color_frag = d_color_dense[frags.row, frags.rank]
    g = frags.gauss

    def reduce(values):
        return np.bincount(g, weights=values, minlength=n)

    grads.opacities = reduce(d_alpha * np.exp(frags.power))
    d_power = d_alpha * frags.alpha
    ca, cb, cc = proj.conic[g, 0], proj.conic[g, 1], proj.conic[g, 2]
    dx, dy = frags.dx, frags.dy
    d_u = reduce(d_power * (ca * dx + cb * dy))
    d_v = reduce(d_power * (cb * dx + cc * dy))
    d_ca = reduce(d_power * (-0.5 * dx * dx))
    d_cb = reduce(d_power * (-dx * dy))
    d_cc = reduce(d_power * (-0.5 * dy * dy))
    d_color = np.stack([reduce(d_color_frag[:, ch]) for ch in range(3)], axis=1)

    touched = np.zeros(n, dtype=bool)
    touched[np.unique(g)] = True

    # 錐線 → Σ2 → Σ3 / J
    G = np.zeros((n, 2, 2))
    G[:, 0, 0], G[:, 0, 1], G[:, 1, 0], G[:, 1, 1] = d_ca, 0.5 * d_cb, 0.5 * d_cb, d_cc
    Q = np.zeros((n, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = (proj.conic[:, 0], proj.conic[:, 1],
                                                      proj.conic[:, 1], proj.conic[:, 2])
    d_cov2 = -Q @ G @ Q
    T_t = np.transpose(proj.T, (0, 2, 1))
    d_cov3 = T_t @ d_cov2 @ proj.T
    d_T = 2.0 * d_cov2 @ proj.T @ proj.cov3
    d_J = d_T @ cache.pose.R.T

    x, y, z = proj.pc[:, 0], proj.pc[:, 1], np.where(touched, proj.pc[:, 2], 1.0)
    fx, fy = camera.fx, camera.fy
    d_pc = np.zeros((n, 3))
    d_pc[:, 0] = d_u * fx / z - d_J[:, 0, 2] * fx / z ** 2
    d_pc[:, 1] = d_v * fy / z - d_J[:, 1, 2] * fy / z ** 2
    d_pc[:, 2] = (-d_u * fx * x / z ** 2 - d_v * fy * y / z ** 2
                  - d_J[:, 0, 0] * fx / z ** 2 + d_J[:, 0, 2] * 2.0 * fx * x / z ** 3
                  - d_J[:, 1, 1] * fy / z ** 2 + d_J[:, 1, 2] * 2.0 * fy * y / z ** 3)
    positions = d_pc @ cache.pose.R

    # Σ3 = M Mᵀ，M = R_g S
    d_M = 2.0 * d_cov3 @ proj.M
    grads.scales = np.where(touched[:, None], np.einsum('nik,nik->nk', proj.Rg, d_M), 0.0)
    d_Rg = d_M * params.scales[:, None, :]
    norms = np.linalg.norm(params.rotations, axis=1)
    q_hat = params.rotations / norms[:, None]
    d_qhat = np.einsum('nij,nkij->nk', d_Rg, _rotation_derivatives(q_hat))
    projector = (np.eye(4)[None] - q_hat[:, :, None] * q_hat[:, None, :]) / norms[:, None, None]
    grads.rotations = np.where(touched[:, None], np.einsum('nij,nj->ni', projector, d_qhat), 0.0)

    grads.colors = d_color
    if params.sh_rest is not None:
        basis = _sh_basis(proj.view_dirs)
        grads.sh_rest = basis[:, :, None] * d_color[:, None, :]
        coeff = np.einsum('nkc,nc->nk', params.sh_rest, d_color) * SH_C1
        d_dir = np.stack([-coeff[:, 2], -coeff[:, 0], coeff[:, 1]], axis=1)
        dirs = proj.view_dirs
        radial = np.einsum('ni,ni->n', dirs, d_dir)
        positions = positions + (d_dir - dirs * radial[:, None]) / proj.view_norms[:, None]

    grads.positions = np.where(touched[:, None], positions, 0.0)
    return grads


def backward_gradients(params: GaussianParams, pose: CameraPose, camera: Camera,
                       target: np.ndarray, weights: LossWeights = LossWeights(),
                       dynamic_mask: Optional[np.ndarray] = None,
                       photometric_scale: float = 1.0) -> Tuple[LossValue, GaussianGradients]:
    """
    渲染靜態影像、計算總損失並回傳每個 Gaussian 的梯度

    動態 Gaussian（dynamic_mask 為 True）不參與合成，只接收不透明度懲罰的梯度。

    Args:
        params: Gaussian 參數
        pose: 相機位姿
        camera: 相機內參（尺寸需與 target 相同）
        target: 目標影像 (H, W, 3)
        weights: 損失權重
        dynamic_mask: (N,) 動態 Gaussian 遮罩，None 時依 params.labels
        photometric_scale: 光度項梯度的倍數（傳入像素數即為逐像素加總的梯度）

    Returns:
        (LossValue, GaussianGradients)
    """
    if dynamic_mask is None:
        dynamic_mask = params.labels == DYNAMIC
    dynamic_mask = np.asarray(dynamic_mask, dtype=bool)
    image, cache = composite(params, pose, camera, include=~dynamic_mask, return_cache=True)
    loss = total_loss(image.rgb, target, params.opacities[dynamic_mask], weights)
    grads = backward_from_image(cache, photometric_scale * loss.grad_image)
    grads.opacities[dynamic_mask] += loss.grad_dynamic_opacity
    return loss, grads


# ===== 金字塔與最佳化 =====

class PyramidLevel(NamedTuple):
    index: int
    image: np.ndarray
    scale: float


def build_pyramid(image: np.ndarray, levels: int = 3) -> List[PyramidLevel]:
    """
    高斯金字塔：5x5 Gaussian（σ=1.0）模糊後 2 倍抽樣，尺寸取 ceil

    影像小於模糊核時提前停止並發出警告。
    """
    if levels < 1:
        raise ValueError('levels 必須 ≥ 1')
    current = np.asarray(image, dtype=float)
    pyramid = [PyramidLevel(0, current, 1.0)]
    for i in range(1, levels):
        if min(current.shape[0], current.shape[1]) < 5:
            logger.warning('影像 %s 小於模糊核，金字塔只建立 %d 層', current.shape[:2], len(pyramid))
            break
        blurred = cv2.GaussianBlur(current, (5, 5), 1.0, borderType=cv2.BORDER_REPLICATE)
        current = blurred[::2, ::2].copy()
        pyramid.append(PyramidLevel(i, current, float(2 ** i)))
    return pyramid


@dataclass(frozen=True)
class LearningRates:
    """
    各參數群組的學習率

    不透明度在 logit 空間、尺度在 log 空間更新；位置學習率乘以場景尺度，
    並在整個最佳化過程中由初值指數衰減到 position_decay 倍。
    """
    color: float = 0.0025
    opacity: float = 0.05
    position: float = 1.6e-4
    scale: float = 0.005
    rotation: float = 0.001
    position_decay: float = 0.01

    def position_at(self, extent: float, step: int, total: int) -> float:
        """第 step 次迭代的位置學習率（log 線性內插）"""
        t = min(max(step / (total - 1), 0.0), 1.0) if total > 1 else 0.0
        return self.position * extent * self.position_decay ** t


class Keyframe(NamedTuple):
    pose: CameraPose
    image: np.ndarray


class TraceEntry(NamedTuple):
    iteration: int
    level: int
    loss: float


@dataclass
class OptimizationTrace:
    entries: List[TraceEntry] = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0
    diverged: bool = False
    level_switch_losses: Dict[int, float] = field(default_factory=dict)


class _Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    def step(self, name: str, value: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        m, v = self.state.get(name, (np.zeros_like(grad), np.zeros_like(grad)))
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.state[name] = (m, v)
        m_hat = m / (1.0 - self.beta1 ** self.step_count)
        v_hat = v / (1.0 - self.beta2 ** self.step_count)
        return value - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _to_free(name: str, value: np.ndarray, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """轉到無約束空間：不透明度 → logit，尺度 → log（梯度依連鎖律換算）"""
    if name == 'opacities':
        clipped = np.clip(value, OPACITY_EPSILON, 1.0 - OPACITY_EPSILON)
        return logit(clipped), grad * clipped * (1.0 - clipped)
    if name == 'scales':
        return np.log(value), grad * value
    return value, grad


def _from_free(name: str, free: np.ndarray) -> np.ndarray:
    if name == 'opacities':
        return expit(free)
    if name == 'scales':
        return np.exp(free)
    return free


def scene_extent(positions: np.ndarray) -> float:
    """點雲到質心的最大距離"""
    positions = np.atleast_2d(positions)
    if len(positions) == 0:
        return 1.0
    extent = float(np.max(np.linalg.norm(positions - positions.mean(axis=0), axis=1)))
    return extent if extent > 1e-6 else 1.0


def _loss_at(params: GaussianParams, keyframe: Keyframe, camera: Camera,
             weights: LossWeights, dynamic_mask: np.ndarray) -> float:
    image = composite(params, keyframe.pose, camera, include=~dynamic_mask)
    return total_loss(image.rgb, keyframe.image, params.opacities[dynamic_mask], weights).total


def optimize_coarse_to_fine(params: GaussianParams, keyframes: Sequence[Keyframe], camera: Camera,
                            levels: int = 3, iterations: Sequence[int] = (30, 30, 40),
                            rates: LearningRates = LearningRates(),
                            weights: LossWeights = LossWeights(),
                            optimizer: str = 'sgd',
                            dynamic_mask: Optional[np.ndarray] = None,
                            extent: Optional[float] = None,
                            divergence_factor: float = 10.0) -> Tuple[GaussianParams, OptimizationTrace]:
    """
    由粗到細最佳化

    從最粗的金字塔層開始，每層以 2^-i 縮放的內參渲染並對 GP^i(I_gt) 最佳化，
    iterations 依由粗到細排列。每次迭代輪流使用一個關鍵影格。

    更新依循逐像素加總的光度損失（加上動態不透明度懲罰）的梯度；
    紀錄的損失仍是逐像素平均。

    Args:
        params: 初始參數（不會被修改）
        keyframes: 關鍵影格（位姿 + 全解析度影像）
        camera: 全解析度內參
        levels: 金字塔層數
        iterations: 每層迭代次數（由粗到細）
        rates: 學習率
        weights: 損失權重
        optimizer: 'sgd' 或 'adam'
        dynamic_mask: 動態 Gaussian 遮罩，None 時依 params.labels
        extent: 場景尺度，None 時由靜態點計算
        divergence_factor: 損失超過初始值的倍數即中止

    Returns:
        (最佳化後的參數, OptimizationTrace)；發散時回傳原始參數
    """
    if not keyframes:
        raise ValueError('至少需要一個關鍵影格')
    if optimizer not in ('adam', 'sgd'):
        raise ValueError(f'未知的最佳化器: {optimizer}')
    if dynamic_mask is None:
        dynamic_mask = params.labels == DYNAMIC
    dynamic_mask = np.asarray(dynamic_mask, dtype=bool)
    if extent is None:
        extent = scene_extent(params.positions[~dynamic_mask])

    if len(iterations) != levels:
        raise ValueError(f'iterations 需要 {levels} 個值: {iterations}')
    pyramids = [build_pyramid(kf.image, levels) for kf in keyframes]
    depth = min(len(p) for p in pyramids)
    # 金字塔提前停止時保留最細的幾層
    schedule = list(iterations)[-depth:]
    total_steps = sum(schedule)

    current = params.copy()
    trace = OptimizationTrace()
    trace.initial_loss = _loss_at(current, keyframes[0], camera, weights, dynamic_mask)
    adam = _Adam()
    lr = {'colors': rates.color, 'sh_rest': rates.color, 'opacities': rates.opacity,
          'scales': rates.scale, 'rotations': rates.rotation}
    first_loss = None
    step = 0

    for offset, level in enumerate(range(depth - 1, -1, -1)):
        level_camera = camera.scaled(level)
        pixel_count = level_camera.width * level_camera.height
        for it in range(schedule[offset]):
            index = step % len(keyframes)
            kf = Keyframe(keyframes[index].pose, pyramids[index][level].image)
            loss, grads = backward_gradients(current, kf.pose, level_camera, kf.image,
                                             weights, dynamic_mask, photometric_scale=pixel_count)
            if it == 0:
                trace.level_switch_losses[level] = loss.total
            trace.entries.append(TraceEntry(step, level, loss.total))
            if first_loss is None:
                first_loss = loss.total
            if not np.isfinite(loss.total) or loss.total > divergence_factor * max(first_loss, 1e-12):
                logger.warning('最佳化發散（第 %d 次迭代，損失 %.4g），中止', step, loss.total)
                trace.diverged = True
                trace.final_loss = trace.initial_loss
                return params.copy(), trace

            lr['positions'] = rates.position_at(extent, step, total_steps)
            step += 1
            adam.step_count = step
            for name in ('colors', 'sh_rest', 'opacities', 'positions', 'scales', 'rotations'):
                value = getattr(current, name)
                grad = getattr(grads, name)
                if value is None or grad is None:
                    continue
                free, free_grad = _to_free(name, value, grad)
                if optimizer == 'adam':
                    free = adam.step(name, free, free_grad, lr[name])
                else:
                    free = free - lr[name] * free_grad
                setattr(current, name, _from_free(name, free))

            current.rotations = current.rotations / np.linalg.norm(current.rotations, axis=1, keepdims=True)

    trace.final_loss = _loss_at(current, keyframes[0], camera, weights, dynamic_mask)
    logger.debug('由粗到細最佳化（%s）：%d 次迭代，損失 %.4g → %.4g',
                 optimizer, step, trace.initial_loss, trace.final_loss)
    return current, trace


# ===== 修剪與加密 =====

def prune_and_densify(gmap: GaussianMap, obs: Optional[FrameObservations] = None,
                      pose: Optional[CameraPose] = None, camera: Optional[Camera] = None,
                      min_opacity: float = 0.005, max_scale_ratio: float = 0.5,
                      extent: Optional[float] = None) -> Tuple[List[int], List[int]]:
    """
    修剪低不透明度或過大的靜態 Gaussian，並由未連結的特徵觀測加密

    動態 Gaussian 不受門檻修剪（只由時間視窗刪除）。

    Returns:
        (被修剪的 id, 新插入的 id)
    """
    static_ids = gmap.ids(STATIC)
    if extent is None:
        positions = np.array([gmap.get(gid).position for gid in static_ids]).reshape(-1, 3)
        extent = scene_extent(positions)
    doomed = [gid for gid in static_ids
              if gmap.get(gid).opacity < min_opacity
              or float(np.max(gmap.get(gid).scale)) > max_scale_ratio * extent]
    pruned = gmap.remove(doomed)

    inserted: List[int] = []
    if obs is not None and pose is not None and camera is not None:
        inserted = gmap.insert_from_features(obs, pose, camera)
    if pruned or inserted:
        logger.debug('修剪 %d 個，加密 %d 個 Gaussian', len(pruned), len(inserted))
    return pruned, inserted


# ===== 輸出 =====

def write_image(path: Path, rgb: np.ndarray):
    """以 PPM（P6）或 PNG 輸出 [0, 1] RGB / 灰階影像"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(np.asarray(rgb, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), data):
        raise OSError(f'無法寫入影像: {path}')


def write_loss_trace(path: Path, trace: OptimizationTrace):
    """CSV：iter,level,loss"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['iter', 'level', 'loss'])
        for entry in trace.entries:
            writer.writerow([entry.iteration, entry.level, f'{entry.loss:.8f}'])
