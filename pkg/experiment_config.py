"""
实验配置

ExperimentConfig 汇总网格、几何、各方法配置与数据集设置：
1. 两个预设：full（完整规模）、desk（CPU 规模，验收测试使用）
2. JSON 配置文件在预设基础上覆盖，并用 JSON Schema 校验
3. 命令行 key=value 覆盖（点号路径，如 train.epochs=5）
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Sequence

import jsonschema

from fbp import FbpConfig
from nn_engine import TrainConfig
from pat_core import ConfigValidationError, Geometry, Grid
from tv_minimizer import TvConfig
from unet import UNetConfig
from wave_forward import ForwardConfig


logger = logging.getLogger(__name__)

THREADS_ENV = "PAT_NUM_THREADS"
PHANTOM_CLASSES = ("ellipse", "shepplogan", "mixed")
SOURCES = ("analytic", "raster")


@dataclass(frozen=True)
class DatasetSettings:
    """数据集生成设置"""
    phantom_class: str = "ellipse"
    train_count: int = 1000       # 训练对数 N
    test_count: int = 50
    noise_level: float = 0.02     # 含噪数据的相对噪声水平
    seed: int = 0
    source: str = "analytic"      # analytic: 解析体模正演；raster: 栅格图像上的离散算子
    supersample: int = 4

    def __post_init__(self):
        if self.phantom_class not in PHANTOM_CLASSES:
            raise ConfigValidationError(f"未知体模类别: {self.phantom_class}，可选 {PHANTOM_CLASSES}")
        if self.source not in SOURCES:
            raise ConfigValidationError(f"未知数据源: {self.source}，可选 {SOURCES}")
        if self.train_count < 1 or self.test_count < 1:
            raise ConfigValidationError("样本数必须 ≥ 1")
        if self.noise_level < 0:
            raise ConfigValidationError(f"噪声水平不能为负: {self.noise_level}")


@dataclass(frozen=True)
class ExperimentConfig:
    """一次实验的完整配置"""
    preset: str = "full"
    grid: Grid = Grid()
    geometry: Geometry = Geometry()
    forward: ForwardConfig = ForwardConfig()
    fbp: FbpConfig = FbpConfig()
    tv: TvConfig = TvConfig()
    unet: UNetConfig = UNetConfig()
    train: TrainConfig = TrainConfig()
    dataset: DatasetSettings = DatasetSettings()
    output_dir: str = "runs"

    def __post_init__(self):
        if self.unet.image_size != self.grid.d:
            raise ConfigValidationError(
                f"U-net 输入尺寸 {self.unet.image_size} 与网格尺寸 d={self.grid.d} 不一致"
            )
        self.forward.check_geometry(self.geometry)
        self.fbp.truncation_time(self.geometry)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "preset": self.preset,
            "grid": {"d": self.grid.d},
            "geometry": self.geometry.to_dict(),
            "forward": asdict(self.forward),
            "fbp": asdict(self.fbp),
            "tv": asdict(self.tv),
            "unet": self.unet.to_dict(),
            "train": asdict(self.train),
            "dataset": asdict(self.dataset),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        validate_config_dict(data)
        try:
            return cls(
                preset=data["preset"],
                grid=Grid(**data["grid"]),
                geometry=Geometry.from_dict(data["geometry"]),
                forward=ForwardConfig(**data["forward"]),
                fbp=FbpConfig(**data["fbp"]),
                tv=TvConfig(**data["tv"]),
                unet=UNetConfig.from_dict(data["unet"]),
                train=TrainConfig(**data["train"]),
                dataset=DatasetSettings(**data["dataset"]),
                output_dir=data["output_dir"],
            )
        except TypeError as e:
            raise ConfigValidationError(f"配置字段错误: {e}")

    def config_hash(self) -> str:
        """规范化 JSON 的 sha256，用于检测配置漂移"""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def save(self, path: str) -> str:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
        return path


# ==================== 预设 ====================

PRESETS: Dict[str, Dict[str, Any]] = {
    "full": ExperimentConfig().to_dict(),
    "desk": ExperimentConfig(
        preset="desk",
        grid=Grid(64),
        geometry=Geometry(radius=1.0, detectors=30, final_time=2.0, time_samples=150),
        forward=ForwardConfig(n_phi=256, n_r=300),
        fbp=FbpConfig(n_rho=300),
        unet=UNetConfig(channels=16, levels=4, image_size=64),
        train=TrainConfig(epochs=20),
        dataset=DatasetSettings(train_count=200, test_count=50),
    ).to_dict(),
}


# ==================== JSON Schema ====================

def _object(properties: Dict[str, Any]) -> Dict[str, Any]:
    return {"type": "object", "properties": properties, "additionalProperties": False}


_INT = {"type": "integer"}
_NUM = {"type": "number"}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "preset": {"type": "string", "enum": sorted(PRESETS)},
        "grid": _object({"d": {"type": "integer", "minimum": 8}}),
        "geometry": _object({
            "radius": {"type": "number", "exclusiveMinimum": 0},
            "detectors": {"type": "integer", "minimum": 3},
            "final_time": _NUM,
            "time_samples": {"type": "integer", "minimum": 2},
        }),
        "forward": _object({
            "n_phi": {"type": "integer", "minimum": 64},
            "n_r": _INT,
            "radial_refine": {"type": "integer", "minimum": 1},
            "interpolation": {"type": "string", "enum": ["linear"]},
        }),
        "fbp": _object({
            "truncation": {"type": ["number", "null"]},
            "n_rho": _INT,
            "interpolation": {"type": "string", "enum": ["linear"]},
        }),
        "tv": _object({
            "lam": {"type": "number", "minimum": 0},
            "outer": {"type": "integer", "minimum": 1},
            "inner": {"type": "integer", "minimum": 1},
            "eps": {"type": "number", "exclusiveMinimum": 0},
            "init": {"type": "string", "enum": ["zero", "fbp"]},
            "preconditioner": {"type": "string", "enum": ["jacobi", "none"]},
        }),
        "unet": _object({
            "channels": {"type": "integer", "minimum": 1},
            "levels": {"type": "integer", "minimum": 1},
            "kernel_size": _INT,
            "convs_per_level": {"type": "integer", "minimum": 1},
            "image_size": _INT,
        }),
        "train": _object({
            "learning_rate": {"type": "number", "exclusiveMinimum": 0},
            "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "batch_size": {"type": "integer", "minimum": 1},
            "epochs": {"type": "integer", "minimum": 1},
            "lr_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "loss": {"type": "string", "enum": ["l1"]},
            "seed": {"type": "integer", "minimum": 0},
        }),
        "dataset": _object({
            "phantom_class": {"type": "string", "enum": list(PHANTOM_CLASSES)},
            "train_count": {"type": "integer", "minimum": 1},
            "test_count": {"type": "integer", "minimum": 1},
            "noise_level": {"type": "number", "minimum": 0},
            "seed": {"type": "integer", "minimum": 0},
            "source": {"type": "string", "enum": list(SOURCES)},
            "supersample": {"type": "integer", "minimum": 1},
        }),
        "output_dir": {"type": "string"},
    },
    "required": ["preset", "grid", "geometry", "forward", "fbp", "tv", "unet", "train", "dataset", "output_dir"],
    "additionalProperties": False,
}


def validate_config_dict(data: Dict[str, Any]) -> None:
    """JSON Schema 校验，失败时抛出 ConfigValidationError（附字段路径）"""
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        location = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigValidationError(f"配置校验失败 [{location}]: {e.message}")


# ==================== 加载与覆盖 ====================

def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(text: str) -> Dict[str, Any]:
    """
    "train.epochs=5" -> {"train": {"epochs": 5}}

    值按 JSON 解析（数字、true/false、null、带引号字符串），失败时按原字符串处理。
    """
    if "=" not in text:
        raise ConfigValidationError(f"覆盖项格式应为 key=value: {text}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigValidationError(f"覆盖项缺少键名: {text}")
    result: Dict[str, Any] = {}
    node = result
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return result


def load_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Sequence[str] = (),
) -> ExperimentConfig:
    """
    加载实验配置：预设 <- 配置文件 <- 命令行覆盖

    Args:
        path: JSON 配置文件（可选）
        preset: 预设名；None 时取文件中的 preset 字段，再缺省为 full
        overrides: key=value 覆盖项

    Raises:
        ConfigValidationError: 预设未知或校验失败
        FileNotFoundError: 配置文件不存在
    """
    file_data: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"配置文件不存在: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                file_data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigValidationError(f"配置文件不是合法 JSON: {e}")
        if not isinstance(file_data, dict):
            raise ConfigValidationError("配置文件顶层必须是对象")

    name = preset or file_data.get("preset") or "full"
    if name not in PRESETS:
        raise ConfigValidationError(f"未知预设: {name}，可选 {sorted(PRESETS)}")
    data = _deep_merge(PRESETS[name], file_data)
    data["preset"] = name
    for item in overrides:
        data = _deep_merge(data, parse_override(item))

    # 网格尺寸变化时 U-net 输入尺寸随之变化，除非显式给出
    explicit_size = "image_size" in file_data.get("unet", {}) or any(
        o.split("=", 1)[0].strip() == "unet.image_size" for o in overrides
    )
    if not explicit_size:
        data["unet"]["image_size"] = data["grid"]["d"]

    config = ExperimentConfig.from_dict(data)
    logger.info("配置已加载: preset=%s, d=%d, M=%d, hash=%s",
                name, config.grid.d, config.geometry.detectors, config.config_hash()[:12])
    return config


def worker_count(default: int = 1) -> int:
    """读取 PAT_NUM_THREADS 环境变量，缺省为 default"""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigValidationError(f"{THREADS_ENV} 必须是正整数: {raw}")
    if value < 1:
        raise ConfigValidationError(f"{THREADS_ENV} 必须是正整数: {raw}")
    return value
