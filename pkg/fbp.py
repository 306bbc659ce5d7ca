"""
滤波反投影（FBP）模块

圆形几何下的 FBP 公式，在 t = 2R 处截断：
    h(r) = -(1/(πR)) ∮ ∫_{|r-z|}^{2R} (∂_t t p)(z,t) / √(t²-|r-z|²) dt dS(z)

实现：
1. 滤波：q = D(t·p)（与正问题共用中心差分模板），
   在 ρ 表上计算 F[m, ρ_j] = ∫_{ρ_j}^{2R} q(t)/√(t²-ρ_j²) dt。
   q 在时间网格上分段线性，每段在 t = ρ·cosh(u) 代换下精确积分。
2. 反投影：每个像素对每个探测器在 ρ = |r - z_m| 处线性插值 F，
   以 2πR/M 为求积权重求和，再乘以 -1/(πR)。
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from pat_core import (
    ConfigValidationError,
    Geometry,
    Grid,
    Image,
    PressureData,
    detector_positions,
)
from wave_forward import time_derivative_matrix


logger = logging.getLogger(__name__)

# ρ = 0 处 1/√(t²-ρ²) 退化为 1/t，用极小正数代替
_RHO_FLOOR = 1e-9


@dataclass(frozen=True)
class FbpConfig:
    """FBP 配置"""
    truncation: Optional[float] = None   # 截断时间，None 表示 2R
    n_rho: int = 600                      # ρ 表点数 Nρ（需 ≥ Nt）
    interpolation: str = "linear"

    def __post_init__(self):
        if self.n_rho < 2:
            raise ConfigValidationError(f"n_rho 至少为 2: {self.n_rho}")
        if self.interpolation != "linear":
            raise ConfigValidationError(f"仅支持线性插值: {self.interpolation}")
        if self.truncation is not None and not self.truncation > 0:
            raise ConfigValidationError(f"截断时间必须为正: {self.truncation}")

    def truncation_time(self, geometry: Geometry) -> float:
        value = 2.0 * geometry.radius if self.truncation is None else self.truncation
        if value > geometry.final_time + 1e-12:
            raise ConfigValidationError(f"截断时间 {value} 超过终止时间 T={geometry.final_time}")
        if self.n_rho < geometry.time_samples:
            raise ConfigValidationError(f"n_rho={self.n_rho} 小于时间采样数 Nt={geometry.time_samples}")
        return value


def rho_grid(geometry: Geometry, config: FbpConfig) -> np.ndarray:
    """[0, 截断时间] 上的 Nρ 个等距点"""
    return np.linspace(0.0, config.truncation_time(geometry), config.n_rho)


def radial_integral_matrix(geometry: Geometry, config: FbpConfig = FbpConfig()) -> np.ndarray:
    """
    弱奇异积分矩阵 J (Nρ×Nt)：(J·q)[j] = ∫_{ρ_j}^{t_end} q(t)/√(t²-ρ_j²) dt，q 分段线性
    """
    t_end = config.truncation_time(geometry)
    t = geometry.times
    dt = geometry.dt
    rho = np.maximum(rho_grid(geometry, config), _RHO_FLOOR)[:, None]

    # 时间段 [t_k, t_{k+1}] 与 [ρ, t_end] 的交
    lo = np.maximum(t[None, :-1], rho)
    hi = np.minimum(t[None, 1:], t_end)
    active = hi > lo
    lo = np.where(active, lo, rho)
    hi = np.where(active, hi, rho)

    # ∫ dt/√(t²-ρ²) = arccosh(t/ρ)，∫ t dt/√(t²-ρ²) = √(t²-ρ²)
    i0 = np.arccosh(hi / rho) - np.arccosh(lo / rho)
    i1 = np.sqrt(np.maximum(hi ** 2 - rho ** 2, 0.0)) - np.sqrt(np.maximum(lo ** 2 - rho ** 2, 0.0))
    i0 = np.where(active, i0, 0.0)
    i1 = np.where(active, i1, 0.0)

    integral = np.zeros((config.n_rho, geometry.time_samples))
    integral[:, :-1] += (t[None, 1:] * i0 - i1) / dt
    integral[:, 1:] += (i1 - t[None, :-1] * i0) / dt
    return integral


@lru_cache(maxsize=8)
def filter_matrix(geometry: Geometry, config: FbpConfig = FbpConfig()) -> np.ndarray:
    """
    滤波矩阵 G (Nρ×Nt)：F[m, :] = G · p[m, :]

    组合了 t 乘子、时间导数与弱奇异积分三步，全部线性。
    """
    t = geometry.times
    # q = D(t·p)
    G = radial_integral_matrix(geometry, config) @ time_derivative_matrix(geometry) @ np.diag(t)
    G.setflags(write=False)
    return G


def fbp_filter(data: PressureData, config: FbpConfig = FbpConfig()) -> np.ndarray:
    """
    逐探测器的径向滤波表

    Returns:
        np.ndarray: F，形状 (M, Nρ)
    """
    return np.asarray(data.values, dtype=np.float64) @ filter_matrix(data.geometry, config).T


def backproject(
    table: np.ndarray,
    geometry: Geometry,
    config: FbpConfig,
    x: np.ndarray,
    y: np.ndarray,
) -> np.ndarray:
    """
    滤波表在任意点阵上的反投影：-1/(πR) · Σ_m (2πR/M) · F[m, |x - z_m|]

    F 沿 ρ 线性插值；|x - z_m| 超出截断范围的贡献记为 0。
    """
    rho = rho_grid(geometry, config)
    drho = rho[1] - rho[0]
    z = detector_positions(geometry)
    accum = np.zeros(np.broadcast(x, y).shape)
    for m in range(geometry.detectors):
        dist = np.hypot(x - z[m, 0], y - z[m, 1])
        pos = dist / drho
        j0 = np.minimum(np.floor(pos).astype(np.int64), config.n_rho - 2)
        w = pos - j0
        values = (1.0 - w) * table[m, j0] + w * table[m, j0 + 1]
        accum += np.where(dist <= rho[-1], values, 0.0)

    weight = 2.0 * np.pi * geometry.radius / geometry.detectors
    return -accum * weight / (np.pi * geometry.radius)


def fbp_reconstruct(data: PressureData, grid: Grid, config: FbpConfig = FbpConfig()) -> Image:
    """
    FBP 重建（流程第一步）

    Args:
        data: 稀疏压力数据
        grid: 重建网格
        config: FBP 配置

    Returns:
        Image: 含欠采样伪影的重建 X
    """
    X, Y = grid.mesh()
    return Image(grid, backproject(fbp_filter(data, config), data.geometry, config, X, Y))
