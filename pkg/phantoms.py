"""
椭圆体模（phantom）模块

功能：
1. 解析椭圆体模：若干加权椭圆指示函数之和
2. 两类随机体模：随机椭圆类、Shepp-Logan 类
3. 超采样栅格化到成像网格
4. 体模 JSON 序列化（带 JSON Schema 校验），用于数据集清单
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import jsonschema
import numpy as np

from pat_core import ConfigValidationError, Grid, Image, NumericalFailure, make_rng


logger = logging.getLogger(__name__)


# ==================== 数据结构 ====================

@dataclass(frozen=True)
class Ellipse:
    """旋转椭圆，angle 为弧度，intensity 为叠加权重"""
    center: Tuple[float, float]
    axes: Tuple[float, float]
    angle: float = 0.0
    intensity: float = 1.0

    def __post_init__(self):
        if not (self.axes[0] > 0 and self.axes[1] > 0):
            raise ConfigValidationError(f"椭圆半轴必须为正: {self.axes}")

    @property
    def reach(self) -> float:
        """‖center‖ + max(a, b)：支撑集所在圆盘半径的保守上界"""
        return float(np.hypot(*self.center) + max(self.axes))

    def indicator(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx = x - self.center[0]
        dy = y - self.center[1]
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (c * dx + s * dy) / self.axes[0]
        v = (-s * dx + c * dy) / self.axes[1]
        return (u * u + v * v) <= 1.0


@dataclass(frozen=True)
class Phantom:
    """有序椭圆列表；点值为覆盖该点的椭圆强度之和"""
    ellipses: Tuple[Ellipse, ...] = ()

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """在任意点阵上逐点求值"""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        out = np.zeros(np.broadcast(x, y).shape)
        for ellipse in self.ellipses:
            out += ellipse.intensity * ellipse.indicator(x, y)
        return out

    @property
    def reach(self) -> float:
        return max((e.reach for e in self.ellipses), default=0.0)

    def scaled(self, factor: float) -> "Phantom":
        return Phantom(tuple(
            Ellipse(e.center, e.axes, e.angle, e.intensity * factor) for e in self.ellipses
        ))


@dataclass(frozen=True)
class EllipseClassSpec:
    """随机椭圆类的采样范围（中心、半轴均匀分布，个数在 count_range 上均匀）"""
    center_range: Tuple[float, float] = (-0.5, 0.5)
    axis_range: Tuple[float, float] = (0.1, 0.2)
    count_range: Tuple[int, int] = (1, 5)
    angle: float = 0.0
    intensity: float = 1.0

    def __post_init__(self):
        for name in ("center_range", "axis_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigValidationError(f"{name} 区间无效: {(lo, hi)}")
        if self.axis_range[0] <= 0:
            raise ConfigValidationError("半轴下界必须为正")
        lo, hi = self.count_range
        if lo < 1 or hi < lo:
            raise ConfigValidationError(f"椭圆个数区间无效: {self.count_range}")


@dataclass(frozen=True)
class SheppLoganSpec:
    """Shepp-Logan 类体模参数：一个外椭圆 + K 个随机内部椭圆"""
    outer_center_range: Tuple[float, float] = (-0.05, 0.05)
    outer_axis_ranges: Tuple[Tuple[float, float], Tuple[float, float]] = ((0.6, 0.8), (0.7, 0.9))
    outer_intensity: float = 1.0
    interior_count: int = 9
    interior_axis_range: Tuple[float, float] = (0.05, 0.35)
    interior_intensity_range: Tuple[float, float] = (-0.8, 0.8)
    value_range: Tuple[float, float] = (-1.5, 2.5)
    max_retries: int = 1000
    check_lattice: int = 512


# ==================== 随机生成 ====================

def sample_ellipse_phantom(spec: EllipseClassSpec = EllipseClassSpec(), seed: int = 0) -> Phantom:
    """
    随机椭圆类体模

    个数在 count_range 上均匀抽取；每个椭圆中心两坐标、两半轴分别独立均匀抽取。
    旋转角与强度取 spec 中的固定值（默认轴对齐、单位强度）。
    """
    rng = make_rng(seed)
    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    ellipses = []
    for _ in range(count):
        center = rng.uniform(*spec.center_range, size=2)
        axes = rng.uniform(*spec.axis_range, size=2)
        ellipses.append(Ellipse(
            center=(float(center[0]), float(center[1])),
            axes=(float(axes[0]), float(axes[1])),
            angle=spec.angle,
            intensity=spec.intensity,
        ))
    return Phantom(tuple(ellipses))


def sample_shepplogan_phantom(seed: int = 0, spec: SheppLoganSpec = SheppLoganSpec()) -> Phantom:
    """
    Shepp-Logan 类随机体模

    外椭圆：强度 1，中心在小方块内均匀，半轴分别在 (0.6,0.8)×(0.7,0.9) 内均匀；
    内部 K 个椭圆：中心在外椭圆内切圆中均匀，半轴 (0.05,0.35)，角度 [0,π)，
    强度 (-0.8,0.8)。每个椭圆满足 ‖c‖+max(a,b) ≤ 1（支撑在单位圆内），
    叠加后的点值保持在 value_range 内；不满足则拒绝重抽。

    Raises:
        NumericalFailure: 某个椭圆重试 max_retries 次仍无法满足约束
    """
    rng = make_rng(seed)
    lattice = -1.0 + (np.arange(spec.check_lattice) + 0.5) * (2.0 / spec.check_lattice)
    lx, ly = np.meshgrid(lattice, lattice, indexing="ij")

    outer = None
    for _ in range(spec.max_retries):
        center = rng.uniform(*spec.outer_center_range, size=2)
        a = rng.uniform(*spec.outer_axis_ranges[0])
        b = rng.uniform(*spec.outer_axis_ranges[1])
        candidate = Ellipse((float(center[0]), float(center[1])), (float(a), float(b)), 0.0, spec.outer_intensity)
        if candidate.reach <= 1.0:
            outer = candidate
            break
    if outer is None:
        raise NumericalFailure(f"外椭圆在 {spec.max_retries} 次重试后仍不满足包含约束 (seed={seed})")

    field_values = outer.intensity * outer.indicator(lx, ly)
    inscribed = min(outer.axes)
    ellipses = [outer]
    lo, hi = spec.value_range

    for index in range(spec.interior_count):
        accepted = None
        for _ in range(spec.max_retries):
            radius = inscribed * np.sqrt(rng.uniform())
            phi = rng.uniform(0.0, 2.0 * np.pi)
            center = (outer.center[0] + radius * np.cos(phi), outer.center[1] + radius * np.sin(phi))
            axes = rng.uniform(*spec.interior_axis_range, size=2)
            angle = rng.uniform(0.0, np.pi)
            intensity = rng.uniform(*spec.interior_intensity_range)
            candidate = Ellipse(
                (float(center[0]), float(center[1])),
                (float(axes[0]), float(axes[1])),
                float(angle),
                float(intensity),
            )
            if candidate.reach > 1.0:
                continue
            trial = field_values + candidate.intensity * candidate.indicator(lx, ly)
            if trial.min() < lo or trial.max() > hi:
                continue
            accepted = candidate
            field_values = trial
            break
        if accepted is None:
            raise NumericalFailure(
                f"第 {index} 个内部椭圆在 {spec.max_retries} 次重试后仍不满足约束 (seed={seed})"
            )
        ellipses.append(accepted)
    return Phantom(tuple(ellipses))


# 固定测试体模：5 个椭圆用于无噪声算例，3 个椭圆用于含噪算例
FIXED_CASES: Dict[str, Tuple[Ellipse, ...]] = {
    "ellipses5": (
        Ellipse((-0.30, 0.25), (0.18, 0.12)),
        Ellipse((0.25, 0.30), (0.12, 0.19)),
        Ellipse((0.05, -0.05), (0.15, 0.15)),
        Ellipse((-0.20, -0.35), (0.19, 0.11)),
        Ellipse((0.35, -0.30), (0.10, 0.16)),
    ),
    "ellipses3": (
        Ellipse((-0.25, 0.10), (0.17, 0.13)),
        Ellipse((0.20, 0.25), (0.11, 0.18)),
        Ellipse((0.10, -0.30), (0.19, 0.12)),
    ),
}


def fixed_case_phantom(name: str) -> Phantom:
    if name not in FIXED_CASES:
        raise ConfigValidationError(f"未知的固定算例: {name}，可选 {sorted(FIXED_CASES)}")
    return Phantom(FIXED_CASES[name])


# ==================== 栅格化 ====================

def rasterize(phantom: Phantom, grid: Grid, supersample: int = 4) -> Image:
    """
    栅格化：每个像素取 supersample×supersample 个子采样点的平均值

    Args:
        phantom: 解析体模
        grid: 成像网格
        supersample: 每个方向的子采样数

    Returns:
        Image
    """
    if supersample < 1:
        raise ConfigValidationError(f"supersample 必须 ≥ 1: {supersample}")
    n = grid.d * supersample
    fine = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    fx, fy = np.meshgrid(fine, fine, indexing="ij")
    values = phantom.evaluate(fx, fy)
    values = values.reshape(grid.d, supersample, grid.d, supersample).mean(axis=(1, 3))
    return Image(grid, values)


# ==================== JSON 序列化 ====================

PHANTOM_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "properties": {
            "center": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            "axes": {
                "type": "array",
                "items": {"type": "number", "exclusiveMinimum": 0},
                "minItems": 2,
                "maxItems": 2,
            },
            "angle": {"type": "number"},
            "intensity": {"type": "number"},
        },
        "required": ["center", "axes", "angle", "intensity"],
        "additionalProperties": False,
    },
}


def phantom_to_json(phantom: Phantom) -> List[Dict]:
    return [
        {
            "center": [e.center[0], e.center[1]],
            "axes": [e.axes[0], e.axes[1]],
            "angle": e.angle,
            "intensity": e.intensity,
        }
        for e in phantom.ellipses
    ]


def phantom_from_json(data: Sequence[Dict]) -> Phantom:
    """从 JSON 列表恢复体模；结构不符时抛出 ConfigValidationError"""
    try:
        jsonschema.validate(list(data), PHANTOM_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigValidationError(f"体模 JSON 校验失败: {e.message}")
    return Phantom(tuple(
        Ellipse(
            (float(item["center"][0]), float(item["center"][1])),
            (float(item["axes"][0]), float(item["axes"][1])),
            float(item["angle"]),
            float(item["intensity"]),
        )
        for item in data
    ))
