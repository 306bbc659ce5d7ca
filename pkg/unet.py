"""
残差 U-net 伪影去除网络

结构（levels 个分辨率层，第 l 层通道数 F·2^(l-1)）：
- 编码：每层两个 3×3 卷积 + ReLU，除最深层外接 2×2 最大池化
- 解码：2×2 转置卷积上采样（通道减半），与同层编码输出拼接，两个 3×3 卷积 + ReLU
- 输出：1×1 卷积到单通道，再与输入相加：Y = X + N(X)

权重命名：enc{l}_conv{c}.weight/.bias，up{l}.weight/.bias，dec{l}_conv{c}.weight/.bias，head.weight/.bias
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from nn_engine import (
    ConvParams,
    TrainConfig,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    glorot_init,
    l1_loss,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    sgd_momentum_step,
    split_channels,
    upconv2_backward,
    upconv2_forward,
)
from pat_core import (
    ConfigValidationError,
    Grid,
    Image,
    NumericalFailure,
    ShapeMismatchError,
    TensorFormatError,
    load_weight_set,
    make_rng,
    rel_l2_error,
    save_weight_set,
)


logger = logging.getLogger(__name__)

MODEL_FORMAT = "pat-unet"
_MOMENTUM_PREFIX = "momentum."


@dataclass(frozen=True)
class UNetConfig:
    """U-net 结构配置"""
    channels: int = 32          # 第一层通道数 F
    levels: int = 5             # 分辨率层数（池化次数 levels-1）
    kernel_size: int = 3
    convs_per_level: int = 2
    image_size: int = 128       # 输入输出 d×d

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigValidationError(f"通道数 F 必须 ≥ 1: {self.channels}")
        if self.levels < 1:
            raise ConfigValidationError(f"层数必须 ≥ 1: {self.levels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigValidationError(f"卷积核尺寸必须为正奇数: {self.kernel_size}")
        if self.convs_per_level < 1:
            raise ConfigValidationError(f"每层卷积数必须 ≥ 1: {self.convs_per_level}")
        if self.image_size % (2 ** (self.levels - 1)) != 0:
            raise ConfigValidationError(
                f"图像尺寸 d={self.image_size} 不能被 2^(levels-1)={2 ** (self.levels - 1)} 整除"
            )

    def level_channels(self, level: int) -> int:
        """第 level 层（从 1 开始）的通道数"""
        return self.channels * 2 ** (level - 1)

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "UNetConfig":
        return cls(**{k: int(v) for k, v in data.items()})


def layer_shapes(config: UNetConfig) -> List[Tuple[str, Tuple[int, ...], Tuple[int, int]]]:
    """
    按拓扑顺序列出所有卷积层

    Returns:
        [(层名, 权重形状, (fan_in, fan_out)), ...]
    """
    k = config.kernel_size
    layers = []
    in_channels = 1
    for level in range(1, config.levels + 1):
        out_channels = config.level_channels(level)
        for c in range(1, config.convs_per_level + 1):
            layers.append((f"enc{level}_conv{c}", (out_channels, in_channels, k, k),
                           (k * k * in_channels, k * k * out_channels)))
            in_channels = out_channels
    for level in range(config.levels - 1, 0, -1):
        out_channels = config.level_channels(level)
        layers.append((f"up{level}", (in_channels, out_channels, 2, 2), (4 * in_channels, 4 * out_channels)))
        in_channels = 2 * out_channels
        for c in range(1, config.convs_per_level + 1):
            layers.append((f"dec{level}_conv{c}", (out_channels, in_channels, k, k),
                           (k * k * in_channels, k * k * out_channels)))
            in_channels = out_channels
    layers.append(("head", (1, in_channels, 1, 1), (in_channels, 1)))
    return layers


# ==================== 模型 ====================

@dataclass
class UNetModel:
    """
    模型 = 配置 + 有序权重 + 动量状态

    dtype 为 float32（训练）或 float64（梯度检验）。
    """
    config: UNetConfig
    weights: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name, shape, _ in layer_shapes(self.config):
            for key, expected in ((f"{name}.weight", shape), (f"{name}.bias", (shape[1] if name.startswith("up") else shape[0],))):
                if key not in self.weights:
                    raise ShapeMismatchError(f"缺少权重 {key}")
                if tuple(self.weights[key].shape) != expected:
                    raise ShapeMismatchError(f"{key} 形状 {self.weights[key].shape} 与配置 {expected} 不一致")

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def parameter_count(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def astype(self, dtype) -> "UNetModel":
        return UNetModel(
            self.config,
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: v.astype(dtype) for k, v in self.velocity.items()},
            dict(self.meta),
        )

    def zero_weights(self) -> "UNetModel":
        """所有权重与偏置置零（残差结构下即恒等映射）"""
        return UNetModel(self.config, {k: np.zeros_like(v) for k, v in self.weights.items()}, {}, dict(self.meta))

    # ---------- 前向 / 反向 ----------

    def _conv(self, name: str, x: np.ndarray) -> Tuple[np.ndarray, tuple]:
        return conv2d_forward(x, ConvParams(self.weights[f"{name}.weight"], self.weights[f"{name}.bias"]))

    def trunk_forward(self, x: np.ndarray) -> Tuple[np.ndarray, list]:
        """网络主干 N(x)，x 形状 (batch, 1, d, d)；返回输出与反向所需缓存"""
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.config.image_size,) * 2:
            raise ShapeMismatchError(f"输入形状 {x.shape} 与模型尺寸 d={self.config.image_size} 不一致")
        tape = []
        skips = []
        h = x
        for level in range(1, self.config.levels + 1):
            for c in range(1, self.config.convs_per_level + 1):
                name = f"enc{level}_conv{c}"
                h, conv_cache = self._conv(name, h)
                h, mask = relu_forward(h)
                tape.append(("conv_relu", name, conv_cache, mask))
            if level < self.config.levels:
                skips.append(h)
                h, pool_cache = maxpool2_forward(h)
                tape.append(("pool", None, pool_cache, None))
        for level in range(self.config.levels - 1, 0, -1):
            name = f"up{level}"
            h, up_cache = upconv2_forward(h, self.weights[f"{name}.weight"], self.weights[f"{name}.bias"])
            tape.append(("up", name, up_cache, None))
            h = concat_channels(h, skips.pop())
            tape.append(("concat", None, self.config.level_channels(level), None))
            for c in range(1, self.config.convs_per_level + 1):
                name = f"dec{level}_conv{c}"
                h, conv_cache = self._conv(name, h)
                h, mask = relu_forward(h)
                tape.append(("conv_relu", name, conv_cache, mask))
        out, head_cache = self._conv("head", h)
        tape.append(("head", "head", head_cache, None))
        return out, tape

    def trunk_backward(self, grad_out: np.ndarray, tape: list) -> Dict[str, np.ndarray]:
        """沿前向记录逆序传播梯度，返回各权重梯度"""
        grads: Dict[str, np.ndarray] = {}
        skip_grads: List[np.ndarray] = []
        g = grad_out
        for kind, name, cache, extra in reversed(tape):
            if kind == "head":
                g, pg = conv2d_backward(g, cache)
            elif kind == "conv_relu":
                g = relu_backward(g, extra)
                g, pg = conv2d_backward(g, cache)
            elif kind == "up":
                g, pg = upconv2_backward(g, cache)
            elif kind == "concat":
                g, skip_grad = split_channels(g, cache)
                skip_grads.append(skip_grad)
                continue
            else:  # pool：梯度与对应跳连的梯度在池化前相加
                g = maxpool2_backward(g, cache) + skip_grads.pop()
                continue
            grads[f"{name}.weight"] = pg["weight"]
            grads[f"{name}.bias"] = pg["bias"]
        return grads

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Y = X + N(X)，x 形状 (batch, 1, d, d)，残差相加在 float64 中进行"""
        trunk, _ = self.trunk_forward(np.asarray(x, dtype=self.dtype))
        return np.asarray(x, dtype=np.float64) + trunk.astype(np.float64)

    # ---------- 持久化 ----------

    def save(self, path: str) -> str:
        """保存为权重容器文件，索引中记录配置与训练信息"""
        tensors = dict(self.weights)
        for name, v in self.velocity.items():
            tensors[_MOMENTUM_PREFIX + name] = v
        fans = {}
        for name, _, fan in layer_shapes(self.config):
            fans[f"{name}.weight"] = fan
        meta = {"format": MODEL_FORMAT, "config": self.config.to_dict(), "info": self.meta}
        return save_weight_set(path, tensors, meta, fans)

    @classmethod
    def load(cls, path: str) -> "UNetModel":
        if not os.path.exists(path):
            raise FileNotFoundError(f"模型文件不存在: {path}")
        tensors, meta = load_weight_set(path)
        if meta.get("format") != MODEL_FORMAT or "config" not in meta:
            raise TensorFormatError(path, "不是 U-net 模型文件")
        config = UNetConfig.from_dict(meta["config"])
        weights = {k: v for k, v in tensors.items() if not k.startswith(_MOMENTUM_PREFIX)}
        velocity = {k[len(_MOMENTUM_PREFIX):]: v for k, v in tensors.items() if k.startswith(_MOMENTUM_PREFIX)}
        logger.info("已加载模型: %s (F=%d, levels=%d)", path, config.channels, config.levels)
        return cls(config, weights, velocity, meta.get("info", {}))


# ==================== 对外操作 ====================

def build(config: UNetConfig = UNetConfig(), seed: int = 0, dtype=np.float32) -> UNetModel:
    """按 Glorot 均匀分布初始化权重，偏置为零"""
    weights: Dict[str, np.ndarray] = {}
    for index, (name, shape, (fan_in, fan_out)) in enumerate(layer_shapes(config)):
        weights[f"{name}.weight"] = glorot_init(fan_in, fan_out, shape, seed, stream=index, dtype=dtype)
        bias_size = shape[1] if name.startswith("up") else shape[0]
        weights[f"{name}.bias"] = np.zeros(bias_size, dtype=dtype)
    model = UNetModel(config, weights, meta={"init_seed": seed})
    logger.info("U-net 构建完成: F=%d, levels=%d, 参数 %d", config.channels, config.levels, model.parameter_count())
    return model


def forward(model: UNetModel, X: Image) -> Image:
    """单张图像推理：Y = X + N(X)"""
    if X.grid.d != model.config.image_size:
        raise ShapeMismatchError(f"图像尺寸 {X.grid.d} 与模型尺寸 {model.config.image_size} 不一致")
    out = model.predict(np.asarray(X.values)[None, None])
    return Image(X.grid, out[0, 0])


PairLike = Tuple[Union[Image, np.ndarray], Union[Image, np.ndarray]]


def _as_array(item: Union[Image, np.ndarray]) -> np.ndarray:
    return np.asarray(item.values if isinstance(item, Image) else item, dtype=np.float64)


def train(
    model: UNetModel,
    dataset: Sequence[PairLike],
    config: TrainConfig = TrainConfig(),
    progress: bool = True,
) -> Tuple[UNetModel, List[float]]:
    """
    带动量 SGD 训练，损失为 ℓ¹ 平均绝对误差 d(X + N(X), Y)

    每个 epoch 用 (seed, epoch) 子流重新打乱样本顺序，学习率按 lr_decay 逐 epoch 衰减。

    Returns:
        (训练后的模型, 每个 epoch 的平均训练损失)

    Raises:
        ConfigValidationError: 数据集为空或形状不一致
        NumericalFailure: 损失出现非有限值
    """
    if len(dataset) == 0:
        raise ConfigValidationError("训练集为空")
    d = model.config.image_size
    inputs = np.stack([_as_array(x) for x, _ in dataset])[:, None].astype(model.dtype)
    targets = np.stack([_as_array(y) for _, y in dataset])[:, None].astype(model.dtype)
    if inputs.shape[2:] != (d, d) or targets.shape != inputs.shape:
        raise ShapeMismatchError(f"训练数据形状 {inputs.shape}/{targets.shape} 与模型尺寸 d={d} 不一致")

    weights, velocity = dict(model.weights), dict(model.velocity)
    history: List[float] = []
    count = len(dataset)
    epochs = tqdm(range(config.epochs), desc="训练", unit="epoch", disable=not progress)
    for epoch in epochs:
        order = make_rng(config.seed, 1, epoch).permutation(count)
        rate = config.learning_rate * config.lr_decay ** epoch
        losses = []
        for start in range(0, count, config.batch_size):
            batch = order[start:start + config.batch_size]
            current = UNetModel(model.config, weights, velocity)
            trunk, tape = current.trunk_forward(inputs[batch])
            loss, grad = l1_loss(inputs[batch] + trunk, targets[batch])
            if not np.isfinite(loss):
                raise NumericalFailure(f"训练损失出现非有限值 (epoch {epoch}, step {start // config.batch_size})")
            grads = current.trunk_backward(grad, tape)
            weights, velocity = sgd_momentum_step(weights, grads, velocity, config, rate)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        epochs.set_postfix(loss=f"{history[-1]:.5f}")
        logger.debug("epoch %d/%d: 平均损失 %.6f", epoch + 1, config.epochs, history[-1])

    meta = dict(model.meta)
    meta["training"] = {**asdict(config), "loss_history": history, "samples": count}
    trained = UNetModel(model.config, weights, velocity, meta)
    logger.info("训练完成: %d 个 epoch, 最终损失 %.6f", config.epochs, history[-1])
    return trained, history


# ==================== 评估 ====================

@dataclass
class EvaluationReport:
    """逐样本与平均相对 ℓ² 误差；rows 为 方法名 -> 逐样本误差"""
    rows: Dict[str, List[float]]

    @property
    def means(self) -> Dict[str, float]:
        return {name: float(np.mean(errors)) for name, errors in self.rows.items()}

    def to_dict(self) -> Dict[str, Any]:
        return {"rows": self.rows, "means": self.means}

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.to_dict(), ensure_ascii=False, indent=2)
        if path:
            with open(path, "w", encoding="utf-8") as f:
                f.write(text)
        return text

    def to_text(self) -> str:
        lines = [f"{'方法':<12}{'平均误差':>12}{'样本数':>8}"]
        for name, errors in self.rows.items():
            lines.append(f"{name:<12}{np.mean(errors):>12.4f}{len(errors):>8d}")
        return "\n".join(lines)


def evaluate(
    model: Optional[UNetModel],
    dataset: Sequence[PairLike],
    workers: int = 1,
    label: str = "CNN",
) -> EvaluationReport:
    """
    在数据集 (X_n, Y_n) 上评估：FBP 输入误差与网络输出误差

    model 为 None 时只报告输入（FBP）误差。
    """
    if len(dataset) == 0:
        raise ConfigValidationError("评估集为空")

    def one(pair: PairLike) -> Tuple[float, Optional[float]]:
        x, y = _as_array(pair[0]), _as_array(pair[1])
        grid = Grid(x.shape[0])
        truth = Image(grid, y)
        input_error = rel_l2_error(Image(grid, x), truth)
        if model is None:
            return input_error, None
        return input_error, rel_l2_error(forward(model, Image(grid, x)), truth)

    # 结果按样本顺序收集，与线程调度无关
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, dataset))
    rows = {"FBP": [r[0] for r in results]}
    if model is not None:
        rows[label] = [r[1] for r in results]
    return EvaluationReport(rows)
