"""
最小神经网络引擎（numpy 实现，反向模式梯度）

层：卷积、ReLU、2×2 最大池化、2×2 转置卷积、通道拼接、ℓ¹ 损失
优化：带动量的 SGD（速度形式）；初始化：Glorot 均匀分布

张量统一为 (batch, channels, height, width)。训练使用 float32，
梯度检验使用 float64（见 gradcheck_suite）。
每个 *_forward 返回 (输出, 缓存)，对应的 *_backward 接收上游梯度与缓存。
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pat_core import ConfigValidationError, ShapeMismatchError, make_rng


logger = logging.getLogger(__name__)

Tensor4 = np.ndarray


def check_tensor4(x: np.ndarray, what: str = "张量") -> None:
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeMismatchError(f"{what} 必须是 4 维且各维 ≥ 1: {x.shape}")


# ==================== 配置 ====================

@dataclass
class ConvParams:
    """
    卷积参数

    weight: (C_out, C_in, k, k)；bias: (C_out,)
    padding 为 None 时取 k//2（same padding，要求 k 为奇数）
    """
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: Optional[int] = None

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeMismatchError(f"卷积核形状无效: {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatchError(f"偏置形状 {self.bias.shape} 与输出通道 {self.weight.shape[0]} 不一致")
        if self.stride < 1:
            raise ConfigValidationError(f"stride 必须 ≥ 1: {self.stride}")
        if self.padding is None:
            if self.kernel_size % 2 == 0:
                raise ConfigValidationError(f"same padding 需要奇数卷积核: k={self.kernel_size}")
            self.padding = self.kernel_size // 2

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass(frozen=True)
class TrainConfig:
    """训练配置（默认值即完整规模训练设置）"""
    learning_rate: float = 1e-3
    momentum: float = 0.99
    batch_size: int = 1
    epochs: int = 60
    lr_decay: float = 1.0       # 每个 epoch 学习率乘以该因子，1.0 为恒定学习率
    loss: str = "l1"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigValidationError(f"学习率必须为正: {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigValidationError(f"动量需在 [0, 1) 内: {self.momentum}")
        if self.batch_size < 1:
            raise ConfigValidationError(f"batch_size 必须 ≥ 1: {self.batch_size}")
        if self.epochs < 1:
            raise ConfigValidationError(f"epochs 必须 ≥ 1: {self.epochs}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigValidationError(f"lr_decay 需在 (0, 1] 内: {self.lr_decay}")
        if self.loss != "l1":
            raise ConfigValidationError(f"仅支持 ℓ¹ 损失: {self.loss}")


# ==================== 卷积 ====================

def conv2d_forward(x: Tensor4, params: ConvParams) -> Tuple[Tensor4, tuple]:
    """互相关（不翻转卷积核），零填充"""
    check_tensor4(x, "卷积输入")
    if x.shape[1] != params.weight.shape[1]:
        raise ShapeMismatchError(f"输入通道 {x.shape[1]} 与卷积核 {params.weight.shape} 不匹配")
    k, s, p = params.kernel_size, params.stride, params.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ShapeMismatchError(f"输入 {x.shape} 小于卷积核 {k}")
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out = np.einsum("nchwij,ocij->nohw", windows, params.weight, optimize=True)
    out += params.bias[None, :, None, None]
    return out, (x.shape, windows, params)


def conv2d_backward(grad_out: Tensor4, cache: tuple) -> Tuple[Tensor4, Dict[str, np.ndarray]]:
    """
    Returns:
        (grad_x, {"weight": grad_w, "bias": grad_b})
    """
    x_shape, windows, params = cache
    k, s, p = params.kernel_size, params.stride, params.padding
    n, _, ho, wo = grad_out.shape
    grad_w = np.einsum("nchwij,nohw->ocij", windows, grad_out, optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3))

    grad_xp = np.zeros((n, x_shape[1], x_shape[2] + 2 * p, x_shape[3] + 2 * p), dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            grad_xp[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.einsum(
                "nohw,oc->nchw", grad_out, params.weight[:, :, i, j], optimize=True
            )
    grad_x = grad_xp[:, :, p:p + x_shape[2], p:p + x_shape[3]]
    return grad_x, {"weight": grad_w, "bias": grad_b}


# ==================== ReLU ====================

def relu_forward(x: Tensor4) -> Tuple[Tensor4, np.ndarray]:
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(grad_out: Tensor4, mask: np.ndarray) -> Tensor4:
    return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)


# ==================== 最大池化 ====================

def _pool_windows(x: Tensor4) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def maxpool2_forward(x: Tensor4) -> Tuple[Tensor4, tuple]:
    """2×2 窗口、步长 2；相等时取窗口内第一个（行优先）最大值"""
    check_tensor4(x, "池化输入")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeMismatchError(f"最大池化需要偶数空间尺寸: {x.shape}")
    windows = _pool_windows(x)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, (x.shape, argmax)


def maxpool2_backward(grad_out: Tensor4, cache: tuple) -> Tensor4:
    x_shape, argmax = cache
    n, c, h, w = x_shape
    grad_windows = np.zeros(argmax.shape + (4,), dtype=grad_out.dtype)
    np.put_along_axis(grad_windows, argmax[..., None], grad_out[..., None], axis=-1)
    return grad_windows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


# ==================== 2×2 转置卷积 ====================

def upconv2_forward(x: Tensor4, weight: np.ndarray, bias: np.ndarray) -> Tuple[Tensor4, tuple]:
    """
    步长 2 的 2×2 转置卷积，空间尺寸加倍

    weight: (C_in, C_out, 2, 2)；out[n,o,2h+i,2w+j] = Σ_c x[n,c,h,w]·weight[c,o,i,j] + bias[o]
    """
    check_tensor4(x, "转置卷积输入")
    if weight.ndim != 4 or weight.shape[2:] != (2, 2) or weight.shape[0] != x.shape[1]:
        raise ShapeMismatchError(f"转置卷积核 {weight.shape} 与输入 {x.shape} 不匹配")
    if bias.shape != (weight.shape[1],):
        raise ShapeMismatchError(f"偏置形状 {bias.shape} 与输出通道 {weight.shape[1]} 不一致")
    n, _, h, w = x.shape
    out = np.einsum("nchw,coij->nohiwj", x, weight, optimize=True).reshape(n, weight.shape[1], 2 * h, 2 * w)
    out += bias[None, :, None, None]
    return out, (x, weight)


def upconv2_backward(grad_out: Tensor4, cache: tuple) -> Tuple[Tensor4, Dict[str, np.ndarray]]:
    x, weight = cache
    n, c_out, h2, w2 = grad_out.shape
    g = grad_out.reshape(n, c_out, h2 // 2, 2, w2 // 2, 2)
    grad_x = np.einsum("nohiwj,coij->nchw", g, weight, optimize=True)
    grad_w = np.einsum("nchw,nohiwj->coij", x, g, optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, {"weight": grad_w, "bias": grad_b}


# ==================== 通道拼接 ====================

def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    check_tensor4(a)
    check_tensor4(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatchError(f"拼接要求 batch 与空间尺寸一致: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(grad: Tensor4, channels_a: int) -> Tuple[Tensor4, Tensor4]:
    """concat_channels 的反向：按通道切分梯度"""
    if not 0 < channels_a < grad.shape[1]:
        raise ShapeMismatchError(f"切分位置 {channels_a} 超出通道数 {grad.shape[1]}")
    return grad[:, :channels_a], grad[:, channels_a:]


# ==================== 损失 ====================

def l1_loss(pred: Tensor4, target: Tensor4) -> Tuple[float, Tensor4]:
    """
    平均绝对误差及其梯度 sign(pred - target)/count（差为 0 处梯度取 0）
    """
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"预测 {pred.shape} 与目标 {target.shape} 形状不一致")
    diff = pred - target
    loss = float(np.mean(np.abs(diff)))
    grad = (np.sign(diff) / diff.size).astype(pred.dtype, copy=False)
    return loss, grad


# ==================== 优化与初始化 ====================

def sgd_momentum_step(
    weights: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    velocity: Dict[str, np.ndarray],
    config: TrainConfig,
    learning_rate: Optional[float] = None,
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """
    v ← β·v - η·g；w ← w + v

    缺失的速度项视为 0。learning_rate 缺省取 config.learning_rate。
    返回新的 (weights, velocity)，输入不被修改。
    """
    rate = config.learning_rate if learning_rate is None else learning_rate
    new_weights, new_velocity = {}, {}
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeMismatchError(f"{name}: 梯度形状 {g.shape} 与权重 {w.shape} 不一致")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
        elif v.shape != w.shape:
            raise ShapeMismatchError(f"{name}: 速度形状 {v.shape} 与权重 {w.shape} 不一致")
        v = (config.momentum * v - rate * g).astype(w.dtype, copy=False)
        new_velocity[name] = v
        new_weights[name] = w + v
    return new_weights, new_velocity


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0) / np.sqrt(fan_in + fan_out))


def glorot_init(
    fan_in: int,
    fan_out: int,
    shape: Tuple[int, ...],
    seed: int,
    stream: int = 0,
    dtype=np.float32,
) -> np.ndarray:
    """
    Glorot 均匀初始化：U[-H, H]，H = √6/√(fan_in + fan_out)

    卷积核按 fan_in = k²·C_in、fan_out = k²·C_out 计算（由调用方给出）。
    """
    if fan_in < 1 or fan_out < 1:
        raise ConfigValidationError(f"fan 必须 ≥ 1: fan_in={fan_in}, fan_out={fan_out}")
    bound = glorot_bound(fan_in, fan_out)
    return make_rng(seed, stream).uniform(-bound, bound, size=shape).astype(dtype)


# ==================== 梯度检验 ====================

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|)"""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """对 x 逐元素中心差分（原地扰动后恢复）"""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = f()
        flat[i] = original - step
        minus = f()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * step)
    return grad


@dataclass
class GradcheckRecord:
    layer: str
    shape: Tuple[int, ...]
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "shape": list(self.shape),
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


# 扰动步长 1e-5 下，分段线性层的折点与采样点之间至少保留该间隔
_KINK_GAP = 1e-3


def _random_shape(rng: np.random.Generator, even: bool = False) -> Tuple[int, int, int, int]:
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    h = int(rng.integers(2, 5)) * 2 if even else int(rng.integers(3, 7))
    w = int(rng.integers(2, 5)) * 2 if even else int(rng.integers(3, 7))
    return n, c, h, w


def check_conv2d(rng: np.random.Generator, step: float = 1e-5) -> GradcheckRecord:
    n, c, h, w = _random_shape(rng)
    c_out = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    x = rng.standard_normal((n, c, h, w))
    params = ConvParams(rng.standard_normal((c_out, c, k, k)), rng.standard_normal(c_out), stride=stride)
    out, _ = conv2d_forward(x, params)
    proj = rng.standard_normal(out.shape)

    def loss() -> float:
        return float(np.sum(conv2d_forward(x, params)[0] * proj))

    _, cache = conv2d_forward(x, params)
    gx, gp = conv2d_backward(proj, cache)
    error = max(
        relative_error(gx, numerical_gradient(loss, x, step)),
        relative_error(gp["weight"], numerical_gradient(loss, params.weight, step)),
        relative_error(gp["bias"], numerical_gradient(loss, params.bias, step)),
    )
    return GradcheckRecord("conv2d", x.shape, error, 1e-6)


def check_relu(rng: np.random.Generator, step: float = 1e-5) -> GradcheckRecord:
    shape = _random_shape(rng)
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < _KINK_GAP, np.sign(x + 0.5 * _KINK_GAP) * (_KINK_GAP + np.abs(x)), x)
    proj = rng.standard_normal(shape)

    def loss() -> float:
        return float(np.sum(relu_forward(x)[0] * proj))

    _, mask = relu_forward(x)
    error = relative_error(relu_backward(proj, mask), numerical_gradient(loss, x, step))
    return GradcheckRecord("relu", shape, error, 1e-6)


def check_maxpool2(rng: np.random.Generator, step: float = 1e-5) -> GradcheckRecord:
    shape = _random_shape(rng, even=True)
    size = int(np.prod(shape))
    # 互不相同且间隔 ≥ _KINK_GAP 的值，扰动不会改变 argmax
    x = (rng.permutation(size).astype(np.float64) * 10 * _KINK_GAP).reshape(shape)
    proj = rng.standard_normal((shape[0], shape[1], shape[2] // 2, shape[3] // 2))

    def loss() -> float:
        return float(np.sum(maxpool2_forward(x)[0] * proj))

    _, cache = maxpool2_forward(x)
    error = relative_error(maxpool2_backward(proj, cache), numerical_gradient(loss, x, step))
    return GradcheckRecord("maxpool2", shape, error, 1e-6)


def check_upconv2(rng: np.random.Generator, step: float = 1e-5) -> GradcheckRecord:
    n, c, h, w = _random_shape(rng)
    c_out = int(rng.integers(1, 4))
    x = rng.standard_normal((n, c, h, w))
    weight = rng.standard_normal((c, c_out, 2, 2))
    bias = rng.standard_normal(c_out)
    proj = rng.standard_normal((n, c_out, 2 * h, 2 * w))

    def loss() -> float:
        return float(np.sum(upconv2_forward(x, weight, bias)[0] * proj))

    _, cache = upconv2_forward(x, weight, bias)
    gx, gp = upconv2_backward(proj, cache)
    error = max(
        relative_error(gx, numerical_gradient(loss, x, step)),
        relative_error(gp["weight"], numerical_gradient(loss, weight, step)),
        relative_error(gp["bias"], numerical_gradient(loss, bias, step)),
    )
    return GradcheckRecord("upconv2", x.shape, error, 1e-6)


def check_concat(rng: np.random.Generator, step: float = 1e-5) -> GradcheckRecord:
    n, c, h, w = _random_shape(rng)
    c_b = int(rng.integers(1, 4))
    a = rng.standard_normal((n, c, h, w))
    b = rng.standard_normal((n, c_b, h, w))
    proj = rng.standard_normal((n, c + c_b, h, w))

    def loss() -> float:
        return float(np.sum(concat_channels(a, b) * proj))

    ga, gb = split_channels(proj, c)
    error = max(
        relative_error(ga, numerical_gradient(loss, a, step)),
        relative_error(gb, numerical_gradient(loss, b, step)),
    )
    return GradcheckRecord("concat", (n, c + c_b, h, w), error, 1e-6)


def check_l1(rng: np.random.Generator, step: float = 1e-5) -> GradcheckRecord:
    shape = _random_shape(rng)
    target = rng.standard_normal(shape)
    offset = rng.standard_normal(shape)
    offset = np.where(np.abs(offset) < _KINK_GAP, _KINK_GAP + np.abs(offset), offset)
    pred = target + offset

    def loss() -> float:
        return l1_loss(pred, target)[0]

    _, grad = l1_loss(pred, target)
    error = relative_error(grad, numerical_gradient(loss, pred, step))
    return GradcheckRecord("l1_loss", shape, error, 1e-5)


def check_stack(rng: np.random.Generator, step: float = 1e-5, max_draws: int = 100) -> GradcheckRecord:
    """
    conv → ReLU → maxpool → upconv → conv(1×1) → ℓ¹ 的端到端检验

    重抽直到所有 ReLU 前激活、池化窗口间隔、ℓ¹ 残差都离折点至少 _KINK_GAP。
    """
    for _ in range(max_draws):
        n, c, h, w = _random_shape(rng, even=True)
        mid = int(rng.integers(1, 4))
        x = rng.standard_normal((n, c, h, w))
        conv1 = ConvParams(rng.standard_normal((mid, c, 3, 3)) / 3.0, rng.standard_normal(mid))
        up_w = rng.standard_normal((mid, mid, 2, 2))
        up_b = rng.standard_normal(mid)
        head = ConvParams(rng.standard_normal((1, mid, 1, 1)), rng.standard_normal(1))

        pre, _ = conv2d_forward(x, conv1)
        act, _ = relu_forward(pre)
        windows = np.sort(_pool_windows(act), axis=-1)
        top_gap = windows[..., -1] - windows[..., -2]
        # 全零窗口（ReLU 截断）在扰动下保持全零，不构成折点
        gap_ok = np.all((top_gap > _KINK_GAP) | (windows[..., -1] == 0))
        if np.min(np.abs(pre)) < _KINK_GAP or not gap_ok:
            continue
        break
    else:
        raise ConfigValidationError("无法抽到远离折点的检验样本")

    def forward() -> Tuple[float, list]:
        p1, c1 = conv2d_forward(x, conv1)
        a1, m1 = relu_forward(p1)
        pooled, cp = maxpool2_forward(a1)
        up, cu = upconv2_forward(pooled, up_w, up_b)
        out, ch = conv2d_forward(up, head)
        return out, [c1, m1, cp, cu, ch]

    base, _ = forward()
    target = base + np.where(rng.standard_normal(base.shape) > 0, 1.0, -1.0)

    def loss() -> float:
        return l1_loss(forward()[0], target)[0]

    out, (c1, m1, cp, cu, ch) = forward()
    _, g = l1_loss(out, target)
    g, g_head = conv2d_backward(g, ch)
    g, g_up = upconv2_backward(g, cu)
    g = maxpool2_backward(g, cp)
    g = relu_backward(g, m1)
    g_x, g_conv1 = conv2d_backward(g, c1)

    error = max(
        relative_error(g_x, numerical_gradient(loss, x, step)),
        relative_error(g_conv1["weight"], numerical_gradient(loss, conv1.weight, step)),
        relative_error(g_conv1["bias"], numerical_gradient(loss, conv1.bias, step)),
        relative_error(g_up["weight"], numerical_gradient(loss, up_w, step)),
        relative_error(g_head["weight"], numerical_gradient(loss, head.weight, step)),
    )
    return GradcheckRecord("stack", x.shape, error, 1e-4)


LAYER_CHECKS = {
    "conv2d": check_conv2d,
    "relu": check_relu,
    "maxpool2": check_maxpool2,
    "upconv2": check_upconv2,
    "concat": check_concat,
    "l1_loss": check_l1,
    "stack": check_stack,
}


def gradcheck_suite(configurations: int = 10, seed: int = 0, layers: Optional[List[str]] = None) -> List[GradcheckRecord]:
    """
    float64 有限差分检验：每个层 configurations 组随机形状

    Returns:
        每次检验的记录
    """
    records = []
    for index, name in enumerate(layers or list(LAYER_CHECKS)):
        if name not in LAYER_CHECKS:
            raise ConfigValidationError(f"未知的层: {name}，可选 {sorted(LAYER_CHECKS)}")
        for trial in range(configurations):
            record = LAYER_CHECKS[name](make_rng(seed, index, trial))
            records.append(record)
            if not record.passed:
                logger.warning("梯度检验未通过: %s %s 误差 %.3e", name, record.shape, record.max_rel_error)
    logger.info("梯度检验完成: %d/%d 通过", sum(r.passed for r in records), len(records))
    return records
