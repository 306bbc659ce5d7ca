"""
PAT 正问题模块

2D 波动方程（声速归一化为 1，p(x,0)=h，∂_t p(x,0)=0）的解公式：
    p(z,t) = ∂_t ∫_0^t r·m_h(z,r) / √(t²-r²) dr
其中 m_h(z,r) 为 h 在以 z 为圆心、半径 r 的圆上的平均值。

离散化步骤（每一步都是线性映射，伴随为逐步转置）：
1. 圆平均：解析体模取精确弧长占比（细化的半径网格）；图像源用 Nφ 点角度求积 + 双线性插值
2. Abel 型积分：m 在 r 网格上线性插值，在 u = arcsin(r/t) 变量下逐段精确积分，
   端点奇异性因此被消除
3. 时间导数：中心差分，两端单侧差分
"""

import logging
import time
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Union

import numpy as np
from scipy import sparse

from pat_core import (
    ConfigValidationError,
    Geometry,
    Grid,
    Image,
    PressureData,
    ShapeMismatchError,
    detector_positions,
    make_rng,
)
from phantoms import Ellipse, Phantom


logger = logging.getLogger(__name__)


# ==================== 配置 ====================

@dataclass(frozen=True)
class ForwardConfig:
    """正问题离散化配置"""
    n_phi: int = 512               # 圆平均的角度求积点数 Nφ
    n_r: int = 600                 # Abel 积分的半径网格点数 Nr（需 ≥ Nt）
    radial_refine: int = 10        # 解析体模路径的半径网格细化倍数
    interpolation: str = "linear"

    def __post_init__(self):
        if self.n_phi < 64:
            raise ConfigValidationError(f"n_phi 至少为 64: {self.n_phi}")
        if self.n_r < 2:
            raise ConfigValidationError(f"n_r 至少为 2: {self.n_r}")
        if self.radial_refine < 1:
            raise ConfigValidationError(f"radial_refine 必须 ≥ 1: {self.radial_refine}")
        if self.interpolation != "linear":
            raise ConfigValidationError(f"仅支持线性插值: {self.interpolation}")

    def check_geometry(self, geometry: Geometry) -> None:
        if self.n_r < geometry.time_samples:
            raise ConfigValidationError(
                f"n_r={self.n_r} 小于时间采样数 Nt={geometry.time_samples}"
            )

    def refined(self) -> "ForwardConfig":
        """解析体模路径实际使用的配置：Nr 乘以细化倍数"""
        return replace(self, n_r=self.n_r * self.radial_refine, radial_refine=1)


# ==================== 离散化基础 ====================

def radial_grid(geometry: Geometry, config: ForwardConfig) -> np.ndarray:
    """[0, T] 上 Nr 个等距半径"""
    return np.linspace(0.0, geometry.final_time, config.n_r)


def circle_angles(count: int) -> np.ndarray:
    """半格偏移的等距角度 φ_i = 2π(i+0.5)/count"""
    return 2.0 * np.pi * (np.arange(count) + 0.5) / count


def time_derivative_matrix(geometry: Geometry) -> np.ndarray:
    """
    时间导数矩阵 (Nt×Nt)：内部中心差分，两端单侧差分

    正问题与 FBP 滤波共用同一模板。
    """
    n = geometry.time_samples
    dt = geometry.dt
    D = np.zeros((n, n))
    if n == 2:
        D[:, 0], D[:, 1] = -1.0 / dt, 1.0 / dt
        return D
    idx = np.arange(1, n - 1)
    D[idx, idx + 1] = 0.5 / dt
    D[idx, idx - 1] = -0.5 / dt
    D[0, 0], D[0, 1] = -1.0 / dt, 1.0 / dt
    D[-1, -1], D[-1, -2] = 1.0 / dt, -1.0 / dt
    return D


def abel_matrix(geometry: Geometry, config: ForwardConfig) -> np.ndarray:
    """
    Abel 型积分矩阵 K0 (Nt×Nr)：W(t_k) = Σ_j K0[k,j]·m(r_j)

    m 在 r 网格上分段线性；每段 [r_j, min(r_{j+1}, t)] 上
        ∫ r/√(t²-r²) dr   = -√(t²-r²)
        ∫ r²/√(t²-r²) dr  = (t²/2)·arcsin(r/t) - (r/2)·√(t²-r²)
    即在 r = t·sin(u) 代换下精确求积。
    """
    t = geometry.times[:, None]
    r = radial_grid(geometry, config)
    dr = r[1] - r[0]
    a = r[None, :-1]
    b = np.minimum(r[None, 1:], t)
    active = (a < t) & (t > 0)

    safe_t = np.where(t > 0, t, 1.0)
    a_c = np.minimum(a, safe_t)
    b_c = np.clip(b, 0.0, safe_t)
    sa = np.sqrt(np.maximum(safe_t ** 2 - a_c ** 2, 0.0))
    sb = np.sqrt(np.maximum(safe_t ** 2 - b_c ** 2, 0.0))
    j1 = sa - sb
    j2 = (0.5 * safe_t ** 2 * (np.arcsin(b_c / safe_t) - np.arcsin(a_c / safe_t))
          - 0.5 * (b_c * sb - a_c * sa))
    j1 = np.where(active, j1, 0.0)
    j2 = np.where(active, j2, 0.0)

    K0 = np.zeros((geometry.time_samples, config.n_r))
    K0[:, :-1] += (r[None, 1:] * j1 - j2) / dr
    K0[:, 1:] += (j2 - r[None, :-1] * j1) / dr
    return K0


@lru_cache(maxsize=8)
def forward_kernel(geometry: Geometry, config: ForwardConfig) -> np.ndarray:
    """时间域核 K = D·K0 (Nt×Nr)：p[m,:] = K·m_h[m,:]"""
    config.check_geometry(geometry)
    K = time_derivative_matrix(geometry) @ abel_matrix(geometry, config)
    K.setflags(write=False)
    return K


# ==================== 圆平均 ====================

def _trig_roots(alpha: np.ndarray, gamma: np.ndarray, delta: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """
    f(ψ) = α·cos2ψ + γ·cosψ + δ·sinψ + ε 的零点角度

    z = e^{iψ} 代换后 2z²·f = α z⁴ + (γ-iδ) z³ + 2ε z² + (γ+iδ) z + α；
    四次项可忽略时退化为二次方程，全部系数可忽略时 f 为常数、无零点。

    Returns:
        np.ndarray: 形状 (n, 4)，单位圆上的零点升序排列，其余位置填 inf
    """
    n = alpha.size
    c3 = gamma - 1j * delta
    c1 = gamma + 1j * delta
    scale = np.abs(alpha) + np.abs(c3) + 2.0 * np.abs(eps) + 1e-300
    roots = np.zeros((n, 4), dtype=np.complex128)

    quartic = np.abs(alpha) >= 1e-8 * scale
    if np.any(quartic):
        q = np.flatnonzero(quartic)
        companion = np.zeros((q.size, 4, 4), dtype=np.complex128)
        lead = alpha[q]
        companion[:, 0, 0] = -c3[q] / lead
        companion[:, 0, 1] = -2.0 * eps[q] / lead
        companion[:, 0, 2] = -c1[q] / lead
        companion[:, 0, 3] = -1.0
        companion[:, 1, 0] = companion[:, 2, 1] = companion[:, 3, 2] = 1.0
        roots[q] = np.linalg.eigvals(companion)

    quadratic = ~quartic & (np.abs(c3) >= 1e-8 * scale)
    if np.any(quadratic):
        q = np.flatnonzero(quadratic)
        disc = np.sqrt((eps[q] ** 2 - c3[q] * c1[q]).astype(np.complex128))
        roots[q, 0] = (-eps[q] + disc) / c3[q]
        roots[q, 1] = (-eps[q] - disc) / c3[q]

    on_circle = np.abs(np.abs(roots) - 1.0) < 1e-5
    angles = np.where(on_circle, np.mod(np.angle(roots), 2.0 * np.pi), np.inf)
    return np.sort(angles, axis=1)


def ellipse_arc_fraction(ellipse: Ellipse, z, r: np.ndarray) -> np.ndarray:
    """
    以 z 为圆心、半径 r 的圆落在椭圆内部的弧长占比（精确值）

    圆上的椭圆隶属函数是 ψ 的二阶三角多项式，零点把圆周分成若干段，
    每段取中点判断内外后累加弧长。

    Args:
        ellipse: 椭圆
        z: 圆心
        r: 半径数组
    """
    r = np.asarray(r, dtype=np.float64)
    a, b = ellipse.axes
    dx = float(z[0]) - ellipse.center[0]
    dy = float(z[1]) - ellipse.center[1]
    c, s = np.cos(ellipse.angle), np.sin(ellipse.angle)
    w1 = c * dx + s * dy
    w2 = -s * dx + c * dy

    distance = float(np.hypot(dx, dy))
    fraction = np.zeros(r.shape)
    fraction[r <= min(a, b) - distance] = 1.0
    reach = max(a, b)
    candidate = (r > min(a, b) - distance) & (r > distance - reach) & (r < distance + reach)
    if not np.any(candidate):
        return fraction

    rc = r[candidate]
    alpha = 0.5 * rc ** 2 * (1.0 / a ** 2 - 1.0 / b ** 2)
    gamma = 2.0 * w1 * rc / a ** 2
    delta = 2.0 * w2 * rc / b ** 2
    eps = w1 ** 2 / a ** 2 + w2 ** 2 / b ** 2 - 1.0 + 0.5 * rc ** 2 * (1.0 / a ** 2 + 1.0 / b ** 2)
    angles = _trig_roots(alpha, gamma, delta, eps)

    def membership(psi):
        return (w1 + rc * np.cos(psi)) ** 2 / a ** 2 + (w2 + rc * np.sin(psi)) ** 2 / b ** 2 - 1.0

    count = np.sum(np.isfinite(angles), axis=1)
    first = np.where(count > 0, angles[:, 0], 0.0)
    inside = np.where(count == 0, 2.0 * np.pi * (membership(0.0) < 0.0), 0.0)
    for j in range(4):
        valid = j < count
        start = np.where(valid, angles[:, j], 0.0)
        following = angles[:, j + 1] if j < 3 else np.full(rc.size, np.inf)
        end = np.where(j + 1 < count, following, first + 2.0 * np.pi)
        end = np.where(valid, end, 0.0)
        length = end - start
        inside += np.where(valid & (membership(start + 0.5 * length) < 0.0), length, 0.0)
    fraction[candidate] = inside / (2.0 * np.pi)
    return fraction


def circular_means(phantom: Phantom, geometry: Geometry, config: ForwardConfig) -> np.ndarray:
    """
    解析体模的圆平均表 m[m, j]：各椭圆精确弧长占比按强度叠加

    Returns:
        np.ndarray: 形状 (M, Nr)
    """
    z = detector_positions(geometry)
    r = radial_grid(geometry, config)
    means = np.zeros((geometry.detectors, r.size))
    for m in range(geometry.detectors):
        for ellipse in phantom.ellipses:
            means[m] += ellipse.intensity * ellipse_arc_fraction(ellipse, z[m], r)
    return means


def disc_circular_mean(center, radius: float, z, r: np.ndarray) -> np.ndarray:
    """
    单位强度圆盘在以 z 为圆心、半径 r 的圆上的平均值（闭式弧长占比）

    Args:
        center: 圆盘中心
        radius: 圆盘半径 a
        z: 圆心
        r: 半径数组
    """
    r = np.asarray(r, dtype=np.float64)
    delta = float(np.hypot(z[0] - center[0], z[1] - center[1]))
    inside = delta + r <= radius
    outside = (r >= delta + radius) | (r <= delta - radius)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos_half = (r ** 2 + delta ** 2 - radius ** 2) / (2.0 * r * delta)
        partial = np.arccos(np.clip(cos_half, -1.0, 1.0)) / np.pi
    return np.where(inside, 1.0, np.where(outside, 0.0, partial))


# ==================== 矩阵无关的离散算子 ====================

class ForwardOperator:
    """
    像素网格上的线性 PAT 正算子 𝒫 及其精确转置 𝒫*

    圆平均 + 双线性插值组合成稀疏矩阵 S ((M·Nr)×d²)，
    Abel 积分与时间导数组合成小的稠密核 K (Nt×Nr)：
        𝒫x  = reshape(S·x, (M, Nr)) · Kᵀ
        𝒫*q = Sᵀ · vec(q · K)
    """

    def __init__(self, grid: Grid, geometry: Geometry, config: ForwardConfig = ForwardConfig()):
        config.check_geometry(geometry)
        self.grid = grid
        self.geometry = geometry
        self.config = config
        self.kernel = forward_kernel(geometry, config)

        start = time.perf_counter()
        self.means_matrix = self._build_means_matrix()
        self.means_matrix_t = self.means_matrix.T.tocsr()
        logger.info(
            "正算子构建完成: d=%d, M=%d, Nr=%d, Nφ=%d, 非零元 %d, 用时 %.2fs",
            grid.d, geometry.detectors, config.n_r, config.n_phi,
            self.means_matrix.nnz, time.perf_counter() - start,
        )

    def _build_means_matrix(self) -> sparse.csr_matrix:
        d = self.grid.d
        dx = self.grid.spacing
        n_r = self.config.n_r
        z = detector_positions(self.geometry)
        r = radial_grid(self.geometry, self.config)
        phi = circle_angles(self.config.n_phi)
        cos_phi, sin_phi = np.cos(phi), np.sin(phi)
        weight = 1.0 / phi.size
        local_rows = np.broadcast_to(np.arange(n_r)[:, None], (n_r, phi.size))

        blocks = []
        for m in range(self.geometry.detectors):
            fx = (z[m, 0] + r[:, None] * cos_phi + 1.0) / dx - 0.5
            fy = (z[m, 1] + r[:, None] * sin_phi + 1.0) / dx - 0.5
            ix = np.floor(fx).astype(np.int64)
            iy = np.floor(fy).astype(np.int64)
            wx = fx - ix
            wy = fy - iy

            rows, cols, vals = [], [], []
            for ox, oy, w in (
                (0, 0, (1.0 - wx) * (1.0 - wy)),
                (1, 0, wx * (1.0 - wy)),
                (0, 1, (1.0 - wx) * wy),
                (1, 1, wx * wy),
            ):
                cx = ix + ox
                cy = iy + oy
                valid = (cx >= 0) & (cx < d) & (cy >= 0) & (cy < d)
                rows.append(local_rows[valid])
                cols.append(cx[valid] * d + cy[valid])
                vals.append(w[valid] * weight)
            block = sparse.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n_r, d * d),
            ).tocsr()
            blocks.append(block)
        return sparse.vstack(blocks, format="csr")

    def apply(self, image: Image) -> PressureData:
        if image.grid != self.grid:
            raise ShapeMismatchError(f"图像网格 {image.grid} 与算子网格 {self.grid} 不一致")
        means = (self.means_matrix @ image.values.ravel().astype(np.float64))
        means = means.reshape(self.geometry.detectors, self.config.n_r)
        return PressureData(self.geometry, means @ self.kernel.T)

    def adjoint(self, data: PressureData) -> Image:
        if data.geometry != self.geometry:
            raise ShapeMismatchError(f"数据几何 {data.geometry} 与算子几何 {self.geometry} 不一致")
        weights = np.asarray(data.values, dtype=np.float64) @ self.kernel
        values = self.means_matrix_t @ weights.ravel()
        return Image(self.grid, values.reshape(self.grid.d, self.grid.d))


@lru_cache(maxsize=4)
def get_forward_operator(grid: Grid, geometry: Geometry, config: ForwardConfig = ForwardConfig()) -> ForwardOperator:
    """按 (grid, geometry, config) 缓存的算子实例"""
    return ForwardOperator(grid, geometry, config)


# ==================== 对外操作 ====================

def apply_forward(image: Image, geometry: Geometry, config: ForwardConfig = ForwardConfig()) -> PressureData:
    """严格线性的离散正算子 𝒫"""
    return get_forward_operator(image.grid, geometry, config).apply(image)


def apply_adjoint(
    data: PressureData,
    geometry: Geometry,
    grid: Grid,
    config: ForwardConfig = ForwardConfig(),
) -> Image:
    """离散正算子的精确转置 𝒫*"""
    if data.geometry != geometry:
        raise ShapeMismatchError(f"数据几何 {data.geometry} 与给定几何 {geometry} 不一致")
    return get_forward_operator(grid, geometry, config).adjoint(data)


def simulate(
    source: Union[Phantom, Image],
    geometry: Geometry,
    config: ForwardConfig = ForwardConfig(),
) -> PressureData:
    """
    模拟稀疏测量数据 p[m,k] ≈ p(z_m, t_k)

    Args:
        source: 解析体模（精确圆平均，细化半径网格）或像素图像（离散算子）
        geometry: 测量几何
        config: 离散化配置

    Returns:
        PressureData

    Raises:
        ConfigValidationError: 源包含非有限值
    """
    config.check_geometry(geometry)
    if isinstance(source, Phantom):
        params = [v for e in source.ellipses for v in (*e.center, *e.axes, e.angle, e.intensity)]
        if not np.all(np.isfinite(params)):
            raise ConfigValidationError("体模参数包含非有限值")
        if source.reach > geometry.radius:
            logger.warning("体模支撑超出测量圆 B_R (reach=%.3f > R=%.3f)，继续计算", source.reach, geometry.radius)
        fine = config.refined()
        means = circular_means(source, geometry, fine)
        return PressureData(geometry, means @ forward_kernel(geometry, fine).T)

    if not isinstance(source, Image):
        raise ConfigValidationError(f"不支持的源类型: {type(source).__name__}")
    X, Y = source.grid.mesh()
    outside = np.hypot(X, Y) > geometry.radius
    if np.any(source.values[outside] != 0):
        logger.warning("图像在测量圆 B_R 之外存在非零像素，继续计算")
    return apply_forward(source, geometry, config)


def add_noise(data: PressureData, level: float, seed: int = 0) -> PressureData:
    """
    加性高斯噪声：σ = level · max|p|，独立同分布、零均值

    level = 0 或数据全零时原样返回。
    """
    if level < 0:
        raise ConfigValidationError(f"噪声水平不能为负: {level}")
    peak = float(np.max(np.abs(data.values)))
    if level == 0 or peak == 0.0:
        return data
    rng = make_rng(seed)
    noise = rng.normal(0.0, level * peak, size=data.values.shape)
    return PressureData(data.geometry, data.values + noise)


def adjoint_mismatch(
    grid: Grid,
    geometry: Geometry,
    config: ForwardConfig = ForwardConfig(),
    pairs: int = 20,
    seed: int = 0,
) -> float:
    """
    点积检验：max |⟨𝒫X,q⟩ - ⟨X,𝒫*q⟩| / (‖𝒫X‖‖q‖)，随机 (X, q) 对

    Returns:
        最大相对偏差
    """
    operator = get_forward_operator(grid, geometry, config)
    worst = 0.0
    for index in range(pairs):
        rng = make_rng(seed, index)
        x = Image(grid, rng.standard_normal((grid.d, grid.d)))
        q = PressureData(geometry, rng.standard_normal((geometry.detectors, geometry.time_samples)))
        px = operator.apply(x).values
        lhs = float(np.sum(px * q.values))
        rhs = float(np.sum(x.values * operator.adjoint(q).values))
        scale = np.linalg.norm(px) * np.linalg.norm(q.values)
        worst = max(worst, abs(lhs - rhs) / scale if scale > 0 else abs(lhs - rhs))
    return worst
