"""
PAT 公共基础模块

功能：
1. 成像网格 Grid 与圆形测量几何 Geometry
2. 图像 Image / 压力数据 PressureData 容器
3. 相对 ℓ² 误差等评价指标
4. TensorFile 二进制张量格式（.patt）与权重容器（.patw）读写
5. 16 位 PGM 导出
6. 统一的随机数生成器（Philox，计数器型，跨平台可复现）
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Any

import numpy as np


logger = logging.getLogger(__name__)


# ==================== 异常 ====================

class PatError(Exception):
    """本项目所有异常的基类"""


class ConfigValidationError(PatError, ValueError):
    """配置或输入校验失败"""


class ShapeMismatchError(ConfigValidationError):
    """网格 / 几何 / 张量形状不一致"""


class TensorFormatError(PatError, ValueError):
    """TensorFile 解析失败"""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class NumericalFailure(PatError, RuntimeError):
    """数值计算失败（发散、无法恢复的 CG 崩溃等）"""


# ==================== 随机数 ====================

def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    构造可复现的随机数生成器

    使用 Philox（计数器型）比特生成器，seed 与 stream 一起进入 SeedSequence，
    不同 stream 得到互不相关的随机序列。

    Args:
        seed: 64 位非负整数种子
        stream: 可选的子流编号（如样本编号、epoch 编号）

    Returns:
        np.random.Generator
    """
    if seed < 0:
        raise ConfigValidationError(f"seed 必须为非负整数: {seed}")
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


# ==================== 网格与几何 ====================

@dataclass(frozen=True)
class Grid:
    """[-1,1]² 上的 d×d 像素网格，像素中心 x_i = -1 + (i+0.5)Δx"""
    d: int = 128

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 8:
            raise ConfigValidationError(f"网格尺寸 d 必须是 ≥ 8 的整数: {self.d}")

    @property
    def spacing(self) -> float:
        return 2.0 / self.d

    @property
    def centers(self) -> np.ndarray:
        return -1.0 + (np.arange(self.d) + 0.5) * self.spacing

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        """返回 (X, Y)，values[i1, i2] 对应点 (centers[i1], centers[i2])"""
        c = self.centers
        return np.meshgrid(c, c, indexing="ij")


@dataclass(frozen=True)
class Geometry:
    """
    圆形测量几何

    Args:
        radius: 测量圆半径 R（声速归一化为 1）
        detectors: 探测器数目 M
        final_time: 终止时间 T，需 T ≥ 2R
        time_samples: 时间采样数 Nt，t_k = k·T/(Nt-1)，含两端点
    """
    radius: float = 1.0
    detectors: int = 30
    final_time: float = 2.0
    time_samples: int = 300

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigValidationError(f"半径 R 必须为正: {self.radius}")
        if self.detectors < 3:
            raise ConfigValidationError(f"探测器数目 M 至少为 3: {self.detectors}")
        if self.final_time < 2.0 * self.radius:
            raise ConfigValidationError(
                f"终止时间 T={self.final_time} 小于 2R={2.0 * self.radius}，奇异性无法完整记录"
            )
        if self.time_samples < 2:
            raise ConfigValidationError(f"时间采样数 Nt 至少为 2: {self.time_samples}")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.final_time, self.time_samples)

    @property
    def dt(self) -> float:
        return self.final_time / (self.time_samples - 1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "radius": self.radius,
            "detectors": self.detectors,
            "final_time": self.final_time,
            "time_samples": self.time_samples,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Geometry":
        return cls(
            radius=float(data["radius"]),
            detectors=int(data["detectors"]),
            final_time=float(data["final_time"]),
            time_samples=int(data["time_samples"]),
        )


def detector_positions(geometry: Geometry) -> np.ndarray:
    """
    探测器位置 z_m = R(cos(2π(m-1)/M), sin(2π(m-1)/M))

    Returns:
        np.ndarray: 形状 (M, 2)，第一行为 (R, 0)
    """
    angles = 2.0 * np.pi * np.arange(geometry.detectors) / geometry.detectors
    return geometry.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


# ==================== 数据容器 ====================

@dataclass(frozen=True)
class Image:
    """网格上的标量图像（初始压力 h 或重建结果）"""
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != (self.grid.d, self.grid.d):
            raise ShapeMismatchError(
                f"图像形状 {values.shape} 与网格 ({self.grid.d}, {self.grid.d}) 不一致"
            )
        if not np.all(np.isfinite(values)):
            raise ConfigValidationError("图像包含非有限值")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid) -> "Image":
        return cls(grid, np.zeros((grid.d, grid.d)))


@dataclass(frozen=True)
class PressureData:
    """M×Nt 探测器信号，第 m 行为探测器 z_m 的时间信号"""
    geometry: Geometry
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        expected = (self.geometry.detectors, self.geometry.time_samples)
        if values.shape != expected:
            raise ShapeMismatchError(f"压力数据形状 {values.shape} 与几何 {expected} 不一致")
        if not np.all(np.isfinite(values)):
            raise ConfigValidationError("压力数据包含非有限值")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, geometry: Geometry) -> "PressureData":
        return cls(geometry, np.zeros((geometry.detectors, geometry.time_samples)))


# ==================== 评价指标 ====================

def rel_l2_error(recon: Image, truth: Image) -> float:
    """
    相对 ℓ² 重建误差 ‖recon - truth‖₂ / ‖truth‖₂

    Raises:
        ShapeMismatchError: 网格不一致
        ConfigValidationError: truth 范数为零（指标无定义）
    """
    if recon.grid != truth.grid:
        raise ShapeMismatchError(f"网格不一致: {recon.grid} vs {truth.grid}")
    denom = np.linalg.norm(truth.values)
    if denom == 0.0:
        raise ConfigValidationError("真值图像范数为零，相对误差无定义")
    return float(np.linalg.norm(recon.values - truth.values) / denom)


# ==================== TensorFile (.patt) ====================

TENSOR_MAGIC = b"PATT"
TENSOR_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


def encode_tensor(array: np.ndarray, name: str = "") -> bytes:
    """把数组编码为 TensorFile 字节串"""
    array = np.asarray(array)
    if array.ndim < 1:
        raise ConfigValidationError("TensorFile 至少需要 1 维")
    if array.ndim > 255:
        raise ConfigValidationError(f"维度过多: {array.ndim}")
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise ConfigValidationError(f"仅支持 float32 / float64，收到 {array.dtype}")
    name_bytes = name.encode("utf-8")
    header = TENSOR_MAGIC + struct.pack("<BBB", TENSOR_VERSION, _DTYPE_CODES[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<I", len(name_bytes)) + name_bytes
    payload = np.ascontiguousarray(array, dtype=dtype).tobytes()
    return header + payload


def decode_tensor(buffer: bytes, path: str = "<bytes>", offset: int = 0) -> Tuple[str, np.ndarray, int]:
    """
    从字节串解析一个 TensorFile 记录

    Returns:
        (name, array, 记录结束位置)
    """
    pos = offset

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buffer):
            raise TensorFormatError(path, f"数据被截断（读取 {what} 时）")
        chunk = buffer[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != TENSOR_MAGIC:
        raise TensorFormatError(path, "magic 标记错误")
    version, code, rank = struct.unpack("<BBB", take(3, "头部"))
    if version != TENSOR_VERSION:
        raise TensorFormatError(path, f"不支持的版本 {version}")
    if code not in _CODE_DTYPES:
        raise TensorFormatError(path, f"未知的元素类型代码 {code}")
    if rank < 1:
        raise TensorFormatError(path, "rank 必须 ≥ 1")
    shape = struct.unpack(f"<{rank}I", take(4 * rank, "维度"))
    (name_len,) = struct.unpack("<I", take(4, "名称长度"))
    try:
        name = take(name_len, "名称").decode("utf-8")
    except UnicodeDecodeError as e:
        raise TensorFormatError(path, f"名称不是合法 UTF-8: {e}")
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = take(nbytes, "数据")
    array = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return name, array, pos


def save_tensor(path: str, array: np.ndarray, name: str = "") -> str:
    """保存命名张量到 .patt 文件"""
    data = encode_tensor(array, name)
    with open(path, "wb") as f:
        f.write(data)
    logger.debug("已保存张量 %s -> %s %s", name, path, tuple(np.shape(array)))
    return path


def load_tensor(path: str) -> Tuple[str, np.ndarray]:
    """
    读取 .patt 文件

    Returns:
        (name, array)
    """
    with open(path, "rb") as f:
        buffer = f.read()
    name, array, end = decode_tensor(buffer, path)
    if end != len(buffer):
        raise TensorFormatError(path, f"文件末尾有 {len(buffer) - end} 字节多余数据")
    return name, array


# ==================== 权重容器 (.patw) ====================

WEIGHTS_MAGIC = b"PATW"
WEIGHTS_VERSION = 1


def save_weight_set(
    path: str,
    tensors: Dict[str, np.ndarray],
    meta: Optional[Dict[str, Any]] = None,
    fans: Optional[Dict[str, Tuple[int, int]]] = None,
) -> str:
    """
    保存一组命名张量到单个容器文件

    文件结构: magic "PATW" | u8 版本 | u32 索引长度 | JSON 索引 | TensorFile 记录...
    索引记录每个张量的 offset（相对记录区起点）、长度、形状与 fan 信息。

    Args:
        path: 输出路径
        tensors: 有序的 name -> array
        meta: 额外元信息（模型配置、训练信息等）
        fans: name -> (fan_in, fan_out)
    """
    records = []
    entries = []
    offset = 0
    for name, array in tensors.items():
        blob = encode_tensor(array, name)
        entry = {
            "name": name,
            "offset": offset,
            "length": len(blob),
            "shape": list(np.shape(array)),
        }
        if fans and name in fans:
            entry["fan_in"], entry["fan_out"] = (int(v) for v in fans[name])
        entries.append(entry)
        records.append(blob)
        offset += len(blob)

    index = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC + struct.pack("<BI", WEIGHTS_VERSION, len(index)))
        f.write(index)
        for blob in records:
            f.write(blob)
    logger.info("已保存 %d 个张量到: %s", len(entries), path)
    return path


def load_weight_set(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    读取容器文件

    Returns:
        (name -> array 的有序字典, meta)
    """
    with open(path, "rb") as f:
        buffer = f.read()
    if buffer[:4] != WEIGHTS_MAGIC:
        raise TensorFormatError(path, "magic 标记错误（不是权重容器）")
    if len(buffer) < 9:
        raise TensorFormatError(path, "容器头部被截断")
    version, index_len = struct.unpack("<BI", buffer[4:9])
    if version != WEIGHTS_VERSION:
        raise TensorFormatError(path, f"不支持的容器版本 {version}")
    index_end = 9 + index_len
    if index_end > len(buffer):
        raise TensorFormatError(path, "索引被截断")
    try:
        index = json.loads(buffer[9:index_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TensorFormatError(path, f"索引 JSON 解析失败: {e}")

    tensors: Dict[str, np.ndarray] = {}
    for entry in index["tensors"]:
        start = index_end + entry["offset"]
        name, array, end = decode_tensor(buffer, path, start)
        if name != entry["name"] or end - start != entry["length"]:
            raise TensorFormatError(path, f"索引与记录不一致: {entry['name']}")
        if list(array.shape) != entry["shape"]:
            raise TensorFormatError(path, f"{name} 形状与索引不一致")
        tensors[name] = array
    return tensors, index.get("meta", {})


# ==================== 压力数据读写（带几何 sidecar） ====================

def save_pressure(path: str, data: PressureData, name: str = "pressure") -> str:
    """保存压力数据为 rank-2 TensorFile，并在同名 .json 中记录几何"""
    save_tensor(path, data.values, name)
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump({"geometry": data.geometry.to_dict()}, f, indent=2, sort_keys=True)
    return path


def load_pressure(path: str) -> PressureData:
    _, values = load_tensor(path)
    with open(path + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    return PressureData(Geometry.from_dict(sidecar["geometry"]), values)


def save_image(path: str, image: Image, name: str = "image") -> str:
    return save_tensor(path, image.values, name)


def load_image(path: str, grid: Optional[Grid] = None) -> Image:
    _, values = load_tensor(path)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise TensorFormatError(path, f"不是方形图像: {values.shape}")
    grid = grid or Grid(values.shape[0])
    return Image(grid, values)


# ==================== PGM 导出 ====================

def export_pgm(image: Image, path: str, window: Tuple[float, float]) -> str:
    """
    导出 16 位二进制 PGM (P5)

    数值经仿射映射 [lo, hi] -> [0, 65535] 并截断；相同窗口导出的图像逐像素可比。
    行方向为 y 从上到下递减，列方向为 x 递增。

    Args:
        image: 图像
        path: 输出路径
        window: (lo, hi)，要求 lo < hi
    """
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ConfigValidationError(f"显示窗口无效: lo={lo} ≥ hi={hi}")
    scaled = (image.values - lo) / (hi - lo) * 65535.0
    pixels = np.clip(np.rint(scaled), 0, 65535).astype(">u2")
    # values[i1, i2] 为 (x, y)；转为行 = y（自上而下递减）
    pixels = pixels.T[::-1]
    height, width = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n65535\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels).tobytes())
    return path


def read_pgm(path: str) -> np.ndarray:
    """读取本模块导出的 16 位 PGM，返回 (行, 列) 的 uint16 数组"""
    with open(path, "rb") as f:
        buffer = f.read()
    parts = buffer.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise TensorFormatError(path, "不是 P5 格式的 PGM")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(height, width)


def hash_array(array: np.ndarray) -> str:
    """数组内容的 sha256（用于复现记录）"""
    array = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(str(array.dtype.str).encode())
    h.update(str(array.shape).encode())
    h.update(array.tobytes())
    return h.hexdigest()
