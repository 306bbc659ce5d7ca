"""
PAT 稀疏数据重建流程（命令行入口）

子命令：
1. gen-data      生成训练 / 测试数据集
2. train         训练残差 U-net
3. reconstruct   用 fbp / tv / cnn 重建单个压力数据文件
4. eval-table    在测试集（或固定算例）上生成误差表
5. export-pgm    导出 16 位 PGM 图像
6. gradcheck     神经网络层有限差分梯度检验
7. adjoint-test  正算子点积检验

退出码：0 成功，2 配置 / 输入错误，3 数值失败
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from dataset_builder import DatasetIOError, gen_dataset, load_manifest, verify_manifest
from experiment_config import ExperimentConfig, load_config, worker_count
from fbp import fbp_reconstruct
from nn_engine import gradcheck_suite
from pat_core import (
    ConfigValidationError,
    Image,
    NumericalFailure,
    PressureData,
    ShapeMismatchError,
    TensorFormatError,
    export_pgm,
    load_image,
    load_pressure,
    rel_l2_error,
    save_image,
)
from phantoms import FIXED_CASES, fixed_case_phantom, rasterize
from tv_minimizer import tv_reconstruct, tv_solve
from unet import UNetModel, build, forward, train
from wave_forward import add_noise, adjoint_mismatch, simulate


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
METHODS = ("fbp", "tv", "cnn")
ADJOINT_TOLERANCE = 1e-10


# ==================== 重建分派 ====================

def reconstruct(
    method: str,
    data: PressureData,
    config: ExperimentConfig,
    model: Optional[UNetModel] = None,
) -> Image:
    """
    按方法分派重建

    cnn = FBP 后接 U-net 前向（FBP 视为网络的第一层）。
    """
    if method not in METHODS:
        raise ConfigValidationError(f"未知方法: {method}，可选 {METHODS}")
    if data.geometry != config.geometry:
        raise ShapeMismatchError(f"数据几何 {data.geometry} 与配置几何 {config.geometry} 不一致")
    if method == "tv":
        return tv_reconstruct(data, data.geometry, config.tv, config.grid, config.forward, config.fbp)
    recon = fbp_reconstruct(data, config.grid, config.fbp)
    if method == "fbp":
        return recon
    if model is None:
        raise ConfigValidationError("cnn 方法需要模型文件")
    return forward(model, recon)


# ==================== 误差表 ====================

@dataclass
class TableCase:
    name: str
    pressure: PressureData
    truth: Image


@dataclass
class ErrorTable:
    """行 = 测试样本，列 = 方法 / 模型"""
    columns: List[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    timings: Dict[str, List[float]] = field(default_factory=dict)
    missing: List[Dict[str, str]] = field(default_factory=list)

    def column_errors(self, column: str) -> List[float]:
        return [row["errors"][column] for row in self.rows if column in row["errors"]]

    @property
    def means(self) -> Dict[str, float]:
        result = {}
        for column in self.columns:
            errors = self.column_errors(column)
            if errors:
                result[column] = float(np.mean(errors))
        return result

    @property
    def mean_timings(self) -> Dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.timings.items() if v}

    @property
    def speedup(self) -> Optional[float]:
        """TV 每张耗时 / (FBP + CNN) 每张耗时"""
        t = self.mean_timings
        if "tv" in t and "fbp" in t and "cnn" in t and t["fbp"] + t["cnn"] > 0:
            return t["tv"] / (t["fbp"] + t["cnn"])
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "columns": self.columns,
            "rows": self.rows,
            "means": self.means,
            "timings": self.mean_timings,
            "speedup_tv_over_fbp_cnn": self.speedup,
            "missing": self.missing,
        }

    def to_text(self) -> str:
        width = 10
        lines = ["=" * 70, "相对 ℓ² 重建误差", "=" * 70]
        lines.append(f"{'样本':<16}" + "".join(f"{c:>{width}}" for c in self.columns))
        for row in self.rows:
            cells = "".join(
                f"{row['errors'][c]:>{width}.4f}" if c in row["errors"] else f"{'-':>{width}}"
                for c in self.columns
            )
            lines.append(f"{row['case']:<16}{cells}")
        means = self.means
        lines.append("-" * 70)
        lines.append(f"{'平均':<16}" + "".join(
            f"{means[c]:>{width}.4f}" if c in means else f"{'-':>{width}}" for c in self.columns
        ))
        if self.timings:
            lines.append("")
            for method, seconds in self.mean_timings.items():
                lines.append(f"每张耗时 {method:<6}: {seconds * 1000:.1f} ms")
            if self.speedup is not None:
                lines.append(f"TV / (FBP+CNN) 耗时比: {self.speedup:.1f}")
        if self.missing:
            lines.append("")
            for item in self.missing:
                lines.append(f"⚠️ 缺失 {item['item']}: {item['reason']}")
        return "\n".join(lines)

    def save(self, output_dir: str, stem: str = "table") -> Tuple[str, str]:
        os.makedirs(output_dir, exist_ok=True)
        json_path = os.path.join(output_dir, f"{stem}.json")
        text_path = os.path.join(output_dir, f"{stem}.txt")
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)
        with open(text_path, "w", encoding="utf-8") as f:
            f.write(self.to_text() + "\n")
        return json_path, text_path


def cases_from_testset(directory: str, limit: Optional[int] = None) -> Tuple[List[TableCase], List[Dict[str, str]]]:
    """读取测试集；无法读取的样本记入缺失列表"""
    manifest = load_manifest(directory)
    cases, missing = [], []
    count = len(manifest) if limit is None else min(limit, len(manifest))
    for i in range(count):
        name = f"sample_{manifest.samples[i]['index']:05d}"
        try:
            cases.append(TableCase(name, manifest.load_pressure(i), manifest.load_truth(i)))
        except DatasetIOError as e:
            missing.append({"item": name, "reason": str(e)})
    return cases, missing


def fixed_cases(config: ExperimentConfig, names: Sequence[str], noisy: bool = False, seed: int = 0) -> List[TableCase]:
    """固定椭圆算例：解析正演，可选加噪"""
    cases = []
    for index, name in enumerate(names):
        phantom = fixed_case_phantom(name)
        pressure = simulate(phantom, config.geometry, config.forward)
        if noisy:
            pressure = add_noise(pressure, config.dataset.noise_level, seed + index)
        truth = rasterize(phantom, config.grid, config.dataset.supersample)
        cases.append(TableCase(name + ("_noisy" if noisy else ""), pressure, truth))
    return cases


def run_table(
    cases: Sequence[TableCase],
    methods: Sequence[str],
    models: Dict[str, str],
    config: ExperimentConfig,
    missing: Optional[List[Dict[str, str]]] = None,
    progress: bool = True,
) -> ErrorTable:
    """
    误差表：FBP、TV 列，以及每个模型一列（FBP + CNN）

    Args:
        cases: 测试样本
        methods: 包含 fbp / tv 时生成对应列
        models: 列名 -> 模型文件路径（如 ELL、ELLn、SL、SLn）
        config: 实验配置
        missing: 已知缺失项（如读取失败的样本）

    逐样本顺序执行，保证计时互不干扰；缺失的模型记入 missing，其余单元格照常计算。
    """
    for method in methods:
        if method not in METHODS:
            raise ConfigValidationError(f"未知方法: {method}，可选 {METHODS}")
    loaded: Dict[str, UNetModel] = {}
    table_missing = list(missing or [])
    for label, path in models.items():
        try:
            loaded[label] = UNetModel.load(path)
        except (FileNotFoundError, TensorFormatError) as e:
            table_missing.append({"item": label, "reason": str(e)})
            logger.warning("模型 %s 不可用，对应列留空: %s", label, e)

    columns = [m.upper() for m in methods if m in ("fbp", "tv")] + list(loaded)
    table = ErrorTable(columns=columns, missing=table_missing)
    for case in tqdm(cases, desc="评估", unit="样本", disable=not progress):
        errors: Dict[str, float] = {}
        start = time.perf_counter()
        recon = fbp_reconstruct(case.pressure, config.grid, config.fbp)
        table.timings.setdefault("fbp", []).append(time.perf_counter() - start)
        if "fbp" in methods:
            errors["FBP"] = rel_l2_error(recon, case.truth)
        if "tv" in methods:
            start = time.perf_counter()
            tv_image = reconstruct("tv", case.pressure, config)
            table.timings.setdefault("tv", []).append(time.perf_counter() - start)
            errors["TV"] = rel_l2_error(tv_image, case.truth)
        for label, model in loaded.items():
            start = time.perf_counter()
            output = forward(model, recon)
            table.timings.setdefault("cnn", []).append(time.perf_counter() - start)
            errors[label] = rel_l2_error(output, case.truth)
        table.rows.append({"case": case.name, "errors": errors})
    return table


# ==================== 复现记录 ====================

def file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_run_record(
    output_dir: str,
    config: ExperimentConfig,
    inputs: Optional[Dict[str, str]] = None,
    extra: Optional[Dict[str, Any]] = None,
    argv: Optional[Sequence[str]] = None,
    seeds: Optional[Dict[str, int]] = None,
) -> str:
    """
    写入 run_record.json：完整配置、种子、输入文件内容哈希与运行环境

    inputs 为 标签 -> 路径；目录按其中 manifest.json 计算哈希。
    seeds 覆盖配置中的同名种子，记录命令行实际生效的值。
    """
    hashes = {}
    for label, path in (inputs or {}).items():
        target = os.path.join(path, "manifest.json") if os.path.isdir(path) else path
        hashes[label] = file_hash(target) if os.path.exists(target) else None
    record = {
        "created_at": datetime.now().isoformat(),
        "argv": list(argv if argv is not None else sys.argv),
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seeds": {"dataset": config.dataset.seed, "train": config.train.seed, **(seeds or {})},
        "inputs": hashes,
        "environment": {"python": platform.python_version(), "numpy": np.__version__},
        **(extra or {}),
    }
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, "run_record.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, ensure_ascii=False, indent=2)
    return path


# ==================== 子命令 ====================

def _banner(title: str) -> None:
    print("=" * 70)
    print(title)
    print("=" * 70)


def cmd_gen_data(args, config: ExperimentConfig) -> int:
    _banner(f"生成数据集: {args.phantom_class or config.dataset.phantom_class} ({args.split})")
    manifest = gen_dataset(
        config,
        args.out,
        phantom_class=args.phantom_class,
        count=args.count,
        noisy=args.noisy,
        seed=args.seed,
        split=args.split,
        workers=worker_count(),
    )
    seed = config.dataset.seed if args.seed is None else args.seed
    write_run_record(
        args.out, config, seeds={"dataset": seed},
        extra={"command": "gen-data", "noisy": args.noisy, "split": args.split},
    )
    print(f"✅ 已生成 {len(manifest)} 个样本到: {args.out}")
    return EXIT_OK


def cmd_train(args, config: ExperimentConfig) -> int:
    _banner("训练残差 U-net")
    manifest = load_manifest(args.data)
    verify_manifest(manifest, config)
    if args.init_model:
        model = UNetModel.load(args.init_model)
        if model.config != config.unet:
            logger.warning("初始模型结构 %s 与配置 %s 不同，以模型文件为准", model.config, config.unet)
    else:
        model = build(config.unet, seed=config.train.seed)
    model, history = train(model, manifest.pairs(), config.train)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    model.save(args.out)
    with open(args.out + ".loss.json", "w", encoding="utf-8") as f:
        json.dump({"loss_history": history}, f, indent=2)
    inputs = {"data": args.data}
    if args.init_model:
        inputs["init_model"] = args.init_model
    write_run_record(out_dir, config, inputs, extra={"command": "train", "model": args.out})
    print(f"✅ 训练完成，最终损失 {history[-1]:.6f}，模型已保存到: {args.out}")
    return EXIT_OK


def cmd_reconstruct(args, config: ExperimentConfig) -> int:
    _banner(f"重建: {args.method}")
    data = load_pressure(args.data)
    model = UNetModel.load(args.model) if args.method == "cnn" and args.model else None
    if args.method == "tv" and args.diagnostics:
        result = tv_solve(data, data.geometry, config.tv, config.grid, config.forward, config.fbp)
        result.to_json(args.diagnostics)
        image = result.image
    else:
        image = reconstruct(args.method, data, config, model)
    save_image(args.out, image, name=args.method)
    if args.pgm:
        export_pgm(image, args.pgm, tuple(args.window))
    inputs = {"data": args.data}
    if args.model:
        inputs["model"] = args.model
    write_run_record(os.path.dirname(os.path.abspath(args.out)), config, inputs,
                     extra={"command": "reconstruct", "method": args.method})
    print(f"✅ 重建结果已保存到: {args.out}")
    return EXIT_OK


def cmd_eval_table(args, config: ExperimentConfig) -> int:
    _banner("误差表")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    models = {}
    for item in args.model or []:
        if "=" not in item:
            raise ConfigValidationError(f"--model 格式应为 标签=路径: {item}")
        label, path = item.split("=", 1)
        models[label] = path

    cases: List[TableCase] = []
    missing: List[Dict[str, str]] = []
    if args.testset:
        cases, missing = cases_from_testset(args.testset, args.limit)
    if args.cases:
        names = [n.strip() for n in args.cases.split(",") if n.strip()]
        cases += fixed_cases(config, names, noisy=args.noisy)
    if not cases:
        raise ConfigValidationError("没有可评估的样本（需要 --testset 或 --cases）")

    table = run_table(cases, methods, models, config, missing)
    json_path, _ = table.save(args.out)
    inputs = dict(models)
    if args.testset:
        inputs["testset"] = args.testset
    write_run_record(args.out, config, inputs, extra={"command": "eval-table"})
    print(table.to_text())
    print(f"\n✅ 误差表已保存到: {json_path}")
    return EXIT_OK


def cmd_export_pgm(args, config: ExperimentConfig) -> int:
    image = load_image(args.image)
    export_pgm(image, args.out, tuple(args.window))
    write_run_record(
        os.path.dirname(os.path.abspath(args.out)), config, {"image": args.image},
        extra={"command": "export-pgm", "window": list(args.window)},
    )
    print(f"✅ 已导出: {args.out}")
    return EXIT_OK


def cmd_gradcheck(args, config: ExperimentConfig) -> int:
    _banner("梯度检验（float64 有限差分）")
    records = gradcheck_suite(args.configurations, args.seed)
    for record in records:
        mark = "✅" if record.passed else "⚠️"
        print(f"{mark} {record.layer:<10} {str(record.shape):<18} 误差 {record.max_rel_error:.2e} (容差 {record.tolerance:.0e})")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump([r.to_dict() for r in records], f, indent=2)
    record_dir = args.record_dir or (os.path.dirname(os.path.abspath(args.out)) if args.out else ".")
    write_run_record(
        record_dir, config, seeds={"gradcheck": args.seed},
        extra={"command": "gradcheck", "passed": all(r.passed for r in records)},
    )
    if not all(r.passed for r in records):
        raise NumericalFailure("梯度检验未通过")
    return EXIT_OK


def cmd_adjoint_test(args, config: ExperimentConfig) -> int:
    _banner(f"点积检验: d={config.grid.d}, M={config.geometry.detectors}, Nt={config.geometry.time_samples}")
    start = time.perf_counter()
    worst = adjoint_mismatch(config.grid, config.geometry, config.forward, pairs=args.pairs, seed=args.seed)
    print(f"最大相对偏差: {worst:.3e}（{args.pairs} 组随机样本，用时 {time.perf_counter() - start:.1f}s）")
    write_run_record(
        args.record_dir, config, seeds={"adjoint": args.seed},
        extra={"command": "adjoint-test", "pairs": args.pairs, "max_mismatch": worst},
    )
    if worst > ADJOINT_TOLERANCE:
        raise NumericalFailure(f"点积检验未通过: {worst:.3e} > {ADJOINT_TOLERANCE:.0e}")
    print("✅ 点积检验通过")
    return EXIT_OK


# ==================== 参数解析 ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="run_pat_pipeline", description="PAT 稀疏数据重建：FBP + 残差 U-net")
    parser.add_argument("--config", help="JSON 配置文件")
    parser.add_argument("--preset", choices=["full", "desk"], help="配置预设")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="覆盖配置项，可重复")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="生成数据集")
    p.add_argument("--class", dest="phantom_class", choices=["ellipse", "shepplogan", "mixed"])
    p.add_argument("--count", type=int)
    p.add_argument("--noisy", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--out", required=True, help="输出目录")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="训练 U-net")
    p.add_argument("--data", required=True, help="训练集目录")
    p.add_argument("--out", required=True, help="模型文件 (.patw)")
    p.add_argument("--init-model", help="从已有模型继续训练")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("reconstruct", help="重建单个压力数据")
    p.add_argument("--method", required=True, choices=list(METHODS))
    p.add_argument("--data", required=True, help="压力数据文件 (.patt)")
    p.add_argument("--model", help="cnn 方法的模型文件")
    p.add_argument("--out", required=True, help="输出图像 (.patt)")
    p.add_argument("--diagnostics", help="tv 方法的诊断 JSON 输出")
    p.add_argument("--pgm", help="同时导出 PGM")
    p.add_argument("--window", type=float, nargs=2, default=[0.0, 1.0], metavar=("LO", "HI"))
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser("eval-table", help="误差表")
    p.add_argument("--testset", help="测试集目录")
    p.add_argument("--cases", help=f"固定算例，逗号分隔，可选 {','.join(sorted(FIXED_CASES))}")
    p.add_argument("--noisy", action="store_true", help="固定算例加噪")
    p.add_argument("--methods", default="fbp,tv")
    p.add_argument("--model", action="append", metavar="LABEL=PATH", help="模型列，如 ELL=ell.patw，可重复")
    p.add_argument("--limit", type=int, help="只评估前 n 个测试样本")
    p.add_argument("--out", required=True, help="输出目录")
    p.set_defaults(handler=cmd_eval_table)

    p = sub.add_parser("export-pgm", help="导出 PGM")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=float, nargs=2, default=[0.0, 1.0], metavar=("LO", "HI"))
    p.set_defaults(handler=cmd_export_pgm)

    p = sub.add_parser("gradcheck", help="梯度检验")
    p.add_argument("--configurations", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="结果 JSON")
    p.add_argument("--record-dir", help="run_record.json 所在目录（缺省为 --out 所在目录或当前目录）")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("adjoint-test", help="点积检验")
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--record-dir", default=".", help="run_record.json 所在目录")
    p.set_defaults(handler=cmd_adjoint_test)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, args.preset, args.set)
        return args.handler(args, config)
    except NumericalFailure as e:
        print(f"\n数值失败: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigValidationError, TensorFormatError, FileNotFoundError, DatasetIOError) as e:
        print(f"\n错误: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"\n读写错误: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
