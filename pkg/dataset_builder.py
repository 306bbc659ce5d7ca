"""
训练 / 测试数据集生成

每个样本：抽取体模 → 栅格化得到 Y_n → 正演得到压力数据 →（可选）加噪 → FBP 得到 X_n。
样本文件与 manifest.json 写入同一目录；manifest 不含时间戳，
相同配置与种子重复生成得到逐字节相同的数据集。
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

from tqdm import tqdm

from experiment_config import ExperimentConfig, PHANTOM_CLASSES, worker_count
from fbp import fbp_reconstruct
from pat_core import (
    ConfigValidationError,
    Grid,
    Image,
    PatError,
    PressureData,
    Geometry,
    TensorFormatError,
    hash_array,
    load_image,
    load_pressure,
    make_rng,
    save_image,
    save_pressure,
)
from phantoms import (
    EllipseClassSpec,
    Phantom,
    phantom_from_json,
    phantom_to_json,
    rasterize,
    sample_ellipse_phantom,
    sample_shepplogan_phantom,
)
from wave_forward import add_noise, simulate


logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "pat-dataset"
DATASET_VERSION = 1
# 训练集与测试集使用互不相交的种子子流
SPLIT_STREAMS = {"train": 0, "test": 1}


class DatasetIOError(PatError, OSError):
    """样本读写失败，附带样本编号"""

    def __init__(self, index: int, reason: str):
        super().__init__(f"样本 {index}: {reason}")
        self.index = index
        self.reason = reason


def dataset_config_hash(config: ExperimentConfig) -> str:
    """只覆盖影响样本内容的配置项（网格、几何、正演、FBP、数据源）"""
    data = config.to_dict()
    relevant = {
        "grid": data["grid"],
        "geometry": data["geometry"],
        "forward": data["forward"],
        "fbp": data["fbp"],
        "source": data["dataset"]["source"],
        "supersample": data["dataset"]["supersample"],
    }
    text = json.dumps(relevant, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sample_seeds(seed: int, split: str, index: int) -> Tuple[int, int]:
    """(体模种子, 噪声种子)"""
    stream = SPLIT_STREAMS[split]
    phantom_seed = int(make_rng(seed, stream, index, 0).integers(0, 2 ** 63 - 1))
    noise_seed = int(make_rng(seed, stream, index, 1).integers(0, 2 ** 63 - 1))
    return phantom_seed, noise_seed


def draw_phantom(phantom_class: str, index: int, seed: int) -> Tuple[str, Phantom]:
    """mixed 类按样本编号交替抽取椭圆类与 Shepp-Logan 类"""
    if phantom_class == "mixed":
        phantom_class = "ellipse" if index % 2 == 0 else "shepplogan"
    if phantom_class == "ellipse":
        return phantom_class, sample_ellipse_phantom(EllipseClassSpec(), seed)
    return phantom_class, sample_shepplogan_phantom(seed)


def generate_sample(
    config: ExperimentConfig,
    phantom: Phantom,
    noise_level: float,
    noise_seed: int,
) -> Tuple[PressureData, Image, Image]:
    """
    单个样本的三元组

    Returns:
        (压力数据, FBP 输入 X, 真值 Y)
    """
    truth = rasterize(phantom, config.grid, config.dataset.supersample)
    source = phantom if config.dataset.source == "analytic" else truth
    pressure = simulate(source, config.geometry, config.forward)
    if noise_level > 0:
        pressure = add_noise(pressure, noise_level, noise_seed)
    recon = fbp_reconstruct(pressure, config.grid, config.fbp)
    return pressure, recon, truth


# ==================== 清单 ====================

@dataclass
class DatasetManifest:
    """数据集目录与其 manifest 内容"""
    directory: str
    data: Dict[str, Any]

    @property
    def samples(self) -> List[Dict[str, Any]]:
        return self.data["samples"]

    @property
    def grid(self) -> Grid:
        return Grid(self.data["grid"]["d"])

    @property
    def geometry(self) -> Geometry:
        return Geometry.from_dict(self.data["geometry"])

    def __len__(self) -> int:
        return len(self.samples)

    def path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    def load_truth(self, index: int) -> Image:
        return self._load(index, "truth", lambda p: load_image(p, self.grid))

    def load_input(self, index: int) -> Image:
        return self._load(index, "input", lambda p: load_image(p, self.grid))

    def load_pressure(self, index: int) -> PressureData:
        return self._load(index, "pressure", load_pressure)

    def phantom(self, index: int) -> Phantom:
        return phantom_from_json(self.samples[index]["phantom"])

    def pairs(self) -> List[Tuple[Image, Image]]:
        """训练对 (X_n, Y_n)"""
        return [(self.load_input(i), self.load_truth(i)) for i in range(len(self))]

    def _load(self, index: int, kind: str, loader):
        entry = self.samples[index]
        try:
            return loader(self.path(entry[kind]))
        except (OSError, TensorFormatError) as e:
            raise DatasetIOError(entry["index"], f"读取 {kind} 失败: {e}")

    def save(self) -> str:
        path = self.path(MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.data, f, ensure_ascii=False, indent=2, sort_keys=True)
        return path


def load_manifest(directory: str) -> DatasetManifest:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"数据集清单不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigValidationError(f"数据集清单不是合法 JSON: {path}: {e}")
    if data.get("format") != DATASET_FORMAT:
        raise ConfigValidationError(f"不是数据集清单: {path}")
    manifest = DatasetManifest(directory, data)
    logger.info("已加载数据集清单: %s (%d 个样本)", directory, len(manifest))
    return manifest


def verify_manifest(manifest: DatasetManifest, config: Optional[ExperimentConfig] = None) -> None:
    """
    检查所有引用文件存在且形状、内容哈希与清单一致；给出 config 时还检查配置漂移

    Raises:
        DatasetIOError: 文件缺失或内容不一致
        ConfigValidationError: 配置哈希不一致
    """
    if config is not None and dataset_config_hash(config) != manifest.data["config_hash"]:
        raise ConfigValidationError("数据集配置哈希与当前配置不一致（配置已漂移）")
    d = manifest.grid.d
    geometry = manifest.geometry
    for i, entry in enumerate(manifest.samples):
        for kind in ("truth", "input", "pressure"):
            if not os.path.exists(manifest.path(entry[kind])):
                raise DatasetIOError(entry["index"], f"缺少文件 {entry[kind]}")
        truth, recon, pressure = manifest.load_truth(i), manifest.load_input(i), manifest.load_pressure(i)
        if truth.values.shape != (d, d) or recon.values.shape != (d, d):
            raise DatasetIOError(entry["index"], "图像形状与清单不一致")
        if pressure.geometry != geometry:
            raise DatasetIOError(entry["index"], "压力数据几何与清单不一致")
        actual = {
            "truth": hash_array(truth.values),
            "input": hash_array(recon.values),
            "pressure": hash_array(pressure.values),
        }
        if actual != entry["hashes"]:
            raise DatasetIOError(entry["index"], "文件内容哈希与清单不一致")


# ==================== 生成 ====================

def gen_dataset(
    config: ExperimentConfig,
    output_dir: str,
    phantom_class: Optional[str] = None,
    count: Optional[int] = None,
    noisy: bool = False,
    seed: Optional[int] = None,
    split: str = "train",
    workers: Optional[int] = None,
    progress: bool = True,
) -> DatasetManifest:
    """
    生成数据集并写入 output_dir

    Args:
        config: 实验配置
        output_dir: 输出目录
        phantom_class: ellipse | shepplogan | mixed（缺省取配置）
        count: 样本数 n（缺省按 split 取配置中的训练 / 测试数）
        noisy: 是否加噪（水平取 config.dataset.noise_level）
        seed: 种子（缺省取配置）
        split: train | test，决定种子子流
        workers: 并行线程数（缺省读 PAT_NUM_THREADS）

    Returns:
        DatasetManifest
    """
    phantom_class = phantom_class or config.dataset.phantom_class
    if phantom_class not in PHANTOM_CLASSES:
        raise ConfigValidationError(f"未知体模类别: {phantom_class}，可选 {PHANTOM_CLASSES}")
    if split not in SPLIT_STREAMS:
        raise ConfigValidationError(f"未知划分: {split}，可选 {sorted(SPLIT_STREAMS)}")
    if count is None:
        count = config.dataset.train_count if split == "train" else config.dataset.test_count
    if count < 1:
        raise ConfigValidationError(f"样本数必须 ≥ 1: {count}")
    seed = config.dataset.seed if seed is None else seed
    noise_level = config.dataset.noise_level if noisy else 0.0
    workers = workers or worker_count()

    try:
        os.makedirs(output_dir, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(-1, f"无法创建目录 {output_dir}: {e}")

    def build(index: int) -> Dict[str, Any]:
        phantom_seed, noise_seed = sample_seeds(seed, split, index)
        kind, phantom = draw_phantom(phantom_class, index, phantom_seed)
        pressure, recon, truth = generate_sample(config, phantom, noise_level, noise_seed)
        stem = f"sample_{index:05d}"
        names = {
            "pressure": f"{stem}_pressure.patt",
            "input": f"{stem}_input.patt",
            "truth": f"{stem}_truth.patt",
        }
        try:
            save_pressure(os.path.join(output_dir, names["pressure"]), pressure)
            save_image(os.path.join(output_dir, names["input"]), recon, name="input")
            save_image(os.path.join(output_dir, names["truth"]), truth, name="truth")
        except OSError as e:
            raise DatasetIOError(index, f"写入失败: {e}")
        return {
            "index": index,
            "phantom_class": kind,
            "phantom": phantom_to_json(phantom),
            "phantom_seed": phantom_seed,
            "noise_seed": noise_seed,
            **names,
            "hashes": {
                "truth": hash_array(truth.values),
                "input": hash_array(recon.values),
                "pressure": hash_array(pressure.values),
            },
        }

    with ThreadPoolExecutor(max_workers=workers) as pool:
        samples = list(tqdm(
            pool.map(build, range(count)),
            total=count,
            desc=f"生成 {split} 数据",
            unit="样本",
            disable=not progress,
        ))

    manifest = DatasetManifest(output_dir, {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "split": split,
        "phantom_class": phantom_class,
        "count": count,
        "noise_level": noise_level,
        "seed": seed,
        "source": config.dataset.source,
        "config_hash": dataset_config_hash(config),
        "grid": {"d": config.grid.d},
        "geometry": config.geometry.to_dict(),
        "samples": samples,
    })
    manifest.save()
    logger.info("数据集已生成: %s (%s, %d 个样本, 噪声 %.3f)", output_dir, phantom_class, count, noise_level)
    return manifest
