"""
TV 正则化重建（对照方法）

求解
    min_Y  ½‖p - 𝒫Y‖₂² + λ·Σ √(|∇Y|² + ε²)
采用 lagged diffusivity：每个外层迭代冻结扩散系数 w = 1/√(|∇Y_k|² + ε²)，
用共轭梯度求解 (𝒫*𝒫 + λ∇ᵀW∇) Y = 𝒫*p，内层迭代次数固定，从 Y_k 热启动。

冻结系数后的二次函数是原目标在 Y_k 处的上界（切于 Y_k），
CG 从 Y_k 出发单调降低该二次函数，因此外层目标值单调不增。
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from fbp import FbpConfig, fbp_reconstruct
from pat_core import ConfigValidationError, Geometry, Grid, Image, PressureData, ShapeMismatchError
from wave_forward import ForwardConfig, ForwardOperator, get_forward_operator


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TvConfig:
    """TV 重建配置"""
    lam: float = 0.002          # 正则化权重 λ
    outer: int = 20             # 外层（扩散系数更新）次数
    inner: int = 20             # 内层 CG 次数
    eps: float = 1e-4           # TV 平滑参数 ε
    init: str = "zero"          # 初值: "zero" | "fbp"
    preconditioner: str = "jacobi"  # "jacobi" | "none"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigValidationError(f"λ 不能为负: {self.lam}")
        if not self.eps > 0:
            raise ConfigValidationError(f"ε 必须为正: {self.eps}")
        if self.outer < 1 or self.inner < 1:
            raise ConfigValidationError(f"迭代次数至少为 1: outer={self.outer}, inner={self.inner}")
        if self.init not in ("zero", "fbp"):
            raise ConfigValidationError(f"未知初值方式: {self.init}")
        if self.preconditioner not in ("jacobi", "none"):
            raise ConfigValidationError(f"未知预条件: {self.preconditioner}")


# ==================== 离散梯度 / 散度 ====================

def gradient(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """前向差分；最后一行 / 列的差分取 0（Neumann 型边界）"""
    gx = np.zeros_like(values, dtype=np.float64)
    gy = np.zeros_like(values, dtype=np.float64)
    gx[:-1, :] = values[1:, :] - values[:-1, :]
    gy[:, :-1] = values[:, 1:] - values[:, :-1]
    return gx, gy


def divergence(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """
    离散散度，满足 ⟨∇u, (gx, gy)⟩ = -⟨u, div(gx, gy)⟩
    """
    div = np.zeros_like(gx, dtype=np.float64)
    div[:-1, :] += gx[:-1, :]
    div[1:, :] -= gx[:-1, :]
    div[:, :-1] += gy[:, :-1]
    div[:, 1:] -= gy[:, :-1]
    return div


def tv_seminorm(values: np.ndarray, eps: float) -> float:
    """平滑各向同性 TV: Σ √(|∇Y|² + ε²)"""
    gx, gy = gradient(values)
    return float(np.sum(np.sqrt(gx * gx + gy * gy + eps * eps)))


def diffusivity(values: np.ndarray, eps: float) -> np.ndarray:
    gx, gy = gradient(values)
    return 1.0 / np.sqrt(gx * gx + gy * gy + eps * eps)


def weighted_laplacian(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """∇ᵀ W ∇ Y = -div(w∇Y)"""
    gx, gy = gradient(values)
    return -divergence(weights * gx, weights * gy)


def weighted_laplacian_diagonal(weights: np.ndarray) -> np.ndarray:
    """∇ᵀ W ∇ 的对角元"""
    diag = np.zeros_like(weights)
    diag[:-1, :] += weights[:-1, :]
    diag[:, :-1] += weights[:, :-1]
    diag[1:, :] += weights[:-1, :]
    diag[:, 1:] += weights[:, :-1]
    return diag


def normal_diagonal(operator: ForwardOperator) -> np.ndarray:
    """𝒫*𝒫 的对角元（每个像素列的 ‖𝒫e_j‖²），逐探测器累加"""
    d = operator.grid.d
    n_r = operator.config.n_r
    S = operator.means_matrix
    diag = np.zeros(d * d)
    for m in range(operator.geometry.detectors):
        block = S[m * n_r:(m + 1) * n_r]
        columns = np.asarray(block.T @ operator.kernel.T)   # (d², Nt)
        diag += np.einsum("ij,ij->i", columns, columns)
    return diag.reshape(d, d)


# ==================== 目标函数 ====================

def tv_objective(
    Y: Image,
    data: PressureData,
    config: TvConfig = TvConfig(),
    forward_config: ForwardConfig = ForwardConfig(),
) -> float:
    """½‖p - 𝒫Y‖₂² + λ·TV_ε(Y)"""
    operator = get_forward_operator(Y.grid, data.geometry, forward_config)
    residual = data.values - operator.apply(Y).values
    value = 0.5 * float(np.sum(residual * residual))
    if config.lam > 0:
        value += config.lam * tv_seminorm(Y.values, config.eps)
    return value


# ==================== 共轭梯度 ====================

@dataclass
class CgOutcome:
    solution: np.ndarray
    residuals: List[float]
    breakdown: bool = False


def conjugate_gradient(
    apply_matrix: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    start: np.ndarray,
    iterations: int,
    preconditioner: Optional[np.ndarray] = None,
    callback: Optional[Callable[[np.ndarray], None]] = None,
) -> CgOutcome:
    """
    固定步数的（预条件）共轭梯度

    preconditioner 为对角预条件的逆（逐元素乘）。
    曲率 pᵀAp ≤ 0 时提前终止并标记 breakdown，返回残差最小的迭代值。
    """
    x = start.astype(np.float64, copy=True)
    r = rhs - apply_matrix(x)
    z = r * preconditioner if preconditioner is not None else r
    p = z.copy()
    rz = float(np.sum(r * z))
    residuals = [float(np.linalg.norm(r))]
    best, best_residual = x.copy(), residuals[0]

    for _ in range(iterations):
        if rz == 0.0:
            break
        Ap = apply_matrix(p)
        curvature = float(np.sum(p * Ap))
        if not curvature > 0:
            return CgOutcome(best, residuals, breakdown=True)
        alpha = rz / curvature
        x += alpha * p
        r -= alpha * Ap
        residuals.append(float(np.linalg.norm(r)))
        if residuals[-1] < best_residual:
            best, best_residual = x.copy(), residuals[-1]
        if callback is not None:
            callback(x)
        z = r * preconditioner if preconditioner is not None else r
        rz_next = float(np.sum(r * z))
        p = z + (rz_next / rz) * p
        rz = rz_next
    return CgOutcome(x, residuals)


# ==================== 重建 ====================

@dataclass
class TvResult:
    """TV 重建结果与诊断信息"""
    image: Image
    initial_objective: float
    objective_history: List[float] = field(default_factory=list)
    cg_residuals: List[List[float]] = field(default_factory=list)
    breakdown: bool = False
    breakdown_outer: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "initial_objective": self.initial_objective,
            "objective_history": self.objective_history,
            "cg_residuals": self.cg_residuals,
            "breakdown": self.breakdown,
            "breakdown_outer": self.breakdown_outer,
        }

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.to_dict(), ensure_ascii=False, indent=2)
        if path:
            with open(path, "w", encoding="utf-8") as f:
                f.write(text)
        return text


def tv_solve(
    data: PressureData,
    geometry: Geometry,
    config: TvConfig = TvConfig(),
    grid: Grid = Grid(),
    forward_config: ForwardConfig = ForwardConfig(),
    fbp_config: Optional[FbpConfig] = None,
) -> TvResult:
    """
    lagged diffusivity TV 重建

    Args:
        data: 测量数据
        geometry: 测量几何（须与数据一致）
        config: TV 配置
        grid: 重建网格
        forward_config: 正算子离散化配置
        fbp_config: init="fbp" 时使用的 FBP 配置

    Returns:
        TvResult
    """
    if data.geometry != geometry:
        raise ShapeMismatchError(f"数据几何 {data.geometry} 与给定几何 {geometry} 不一致")
    operator = get_forward_operator(grid, geometry, forward_config)
    d = grid.d

    if config.init == "fbp":
        Y = np.array(fbp_reconstruct(data, grid, fbp_config or FbpConfig()).values, dtype=np.float64)
    else:
        Y = np.zeros((d, d))

    rhs = operator.adjoint(data).values
    data_diag = normal_diagonal(operator) if config.preconditioner == "jacobi" else None

    def objective(values: np.ndarray) -> float:
        return tv_objective(Image(grid, values), data, config, forward_config)

    result = TvResult(image=Image(grid, Y), initial_objective=objective(Y))

    for k in range(config.outer):
        weights = diffusivity(Y, config.eps)

        def apply_matrix(x: np.ndarray) -> np.ndarray:
            flat = x.reshape(d, d)
            out = operator.adjoint(operator.apply(Image(grid, flat))).values
            if config.lam > 0:
                out = out + config.lam * weighted_laplacian(flat, weights)
            return out

        preconditioner = None
        if data_diag is not None:
            diag = data_diag + (config.lam * weighted_laplacian_diagonal(weights) if config.lam > 0 else 0.0)
            preconditioner = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)

        outcome = conjugate_gradient(apply_matrix, rhs, Y, config.inner, preconditioner)
        Y = outcome.solution
        result.cg_residuals.append(outcome.residuals)
        if outcome.breakdown:
            result.breakdown = True
            result.breakdown_outer.append(k)
            logger.warning("CG 在第 %d 次外层迭代出现非正曲率，提前结束内层迭代", k)
        result.objective_history.append(objective(Y))
        logger.debug("TV 外层迭代 %d/%d: 目标值 %.6e", k + 1, config.outer, result.objective_history[-1])

    result.image = Image(grid, Y)
    logger.info(
        "TV 重建完成: λ=%g, %d×%d 次迭代, 目标值 %.6e -> %.6e",
        config.lam, config.outer, config.inner, result.initial_objective, result.objective_history[-1],
    )
    return result


def tv_reconstruct(
    data: PressureData,
    geometry: Geometry,
    config: TvConfig = TvConfig(),
    grid: Grid = Grid(),
    forward_config: ForwardConfig = ForwardConfig(),
    fbp_config: Optional[FbpConfig] = None,
) -> Image:
    """TV 重建，只返回图像；需要诊断信息时用 tv_solve。fbp_config 用于 init="fbp" 的初值"""
    return tv_solve(data, geometry, config, grid, forward_config, fbp_config).image
