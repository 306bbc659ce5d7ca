"""
命令行流程测试：以极小配置跑通 gen-data → train → reconstruct → eval-table
"""

import json
import os

import numpy as np
import pytest

import run_pat_pipeline
from nn_engine import GradcheckRecord
from pat_core import ConfigValidationError, Image, PressureData, load_image, load_pressure, read_pgm, save_image
from run_pat_pipeline import (
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_VALIDATION,
    cases_from_testset,
    fixed_cases,
    main,
    reconstruct,
    run_table,
)
from tv_minimizer import tv_reconstruct
from unet import build


def _record(directory):
    return json.loads(open(os.path.join(str(directory), "run_record.json"), encoding="utf-8").read())


def _args(tiny_overrides, *command):
    args = ["--preset", "desk", "--log-level", "WARNING"]
    for item in tiny_overrides:
        args += ["--set", item]
    return args + list(command)


@pytest.fixture
def workspace(tmp_path, tiny_overrides):
    """生成训练集、测试集并训练一个模型"""
    train_dir = str(tmp_path / "train")
    test_dir = str(tmp_path / "test")
    model_path = str(tmp_path / "models" / "ell.patw")
    assert main(_args(tiny_overrides, "gen-data", "--count", "3", "--out", train_dir)) == EXIT_OK
    assert main(_args(tiny_overrides, "gen-data", "--split", "test", "--count", "2", "--out", test_dir)) == EXIT_OK
    assert main(_args(tiny_overrides, "train", "--data", train_dir, "--out", model_path)) == EXIT_OK
    return tmp_path, train_dir, test_dir, model_path


def test_full_flow(workspace, tiny_overrides):
    root, train_dir, test_dir, model_path = workspace
    assert os.path.exists(os.path.join(train_dir, "manifest.json"))
    assert os.path.exists(os.path.join(train_dir, "run_record.json"))
    loss = json.loads(open(model_path + ".loss.json", encoding="utf-8").read())
    assert len(loss["loss_history"]) == 2

    pressure = os.path.join(test_dir, "sample_00000_pressure.patt")
    for method in ("fbp", "tv", "cnn"):
        out = str(root / f"{method}.patt")
        extra = ["--model", model_path] if method == "cnn" else []
        code = main(_args(tiny_overrides, "reconstruct", "--method", method, "--data", pressure, "--out", out, *extra))
        assert code == EXIT_OK
        assert load_image(out).values.shape == (16, 16)

    table_dir = str(root / "table")
    code = main(_args(
        tiny_overrides, "eval-table", "--testset", test_dir, "--methods", "fbp",
        "--model", f"ELL={model_path}", "--model", f"SL={root / 'missing.patw'}", "--out", table_dir,
    ))
    assert code == EXIT_OK
    table = json.loads(open(os.path.join(table_dir, "table.json"), encoding="utf-8").read())
    assert table["columns"] == ["FBP", "ELL"]
    assert len(table["rows"]) == 2
    assert [m["item"] for m in table["missing"]] == ["SL"]
    assert os.path.exists(os.path.join(table_dir, "table.txt"))

    record = json.loads(open(os.path.join(table_dir, "run_record.json"), encoding="utf-8").read())
    assert record["config"]["grid"]["d"] == 16
    assert set(record["inputs"]) == {"ELL", "SL", "testset"}
    assert record["inputs"]["SL"] is None
    assert record["seeds"] == {"dataset": 0, "train": 0}


def test_tv_diagnostics_and_pgm(workspace, tiny_overrides):
    root, _, test_dir, _ = workspace
    pressure = os.path.join(test_dir, "sample_00001_pressure.patt")
    diagnostics = str(root / "tv.json")
    pgm = str(root / "tv.pgm")
    code = main(_args(
        tiny_overrides, "reconstruct", "--method", "tv", "--data", pressure,
        "--out", str(root / "tv.patt"), "--diagnostics", diagnostics, "--pgm", pgm,
    ))
    assert code == EXIT_OK
    assert "objective_history" in json.loads(open(diagnostics, encoding="utf-8").read())
    assert read_pgm(pgm).shape == (16, 16)


def test_cnn_without_model_fails(workspace, tiny_overrides):
    root, _, test_dir, _ = workspace
    pressure = os.path.join(test_dir, "sample_00000_pressure.patt")
    code = main(_args(tiny_overrides, "reconstruct", "--method", "cnn", "--data", pressure, "--out", str(root / "x.patt")))
    assert code == EXIT_VALIDATION


def test_train_detects_config_drift(workspace, tiny_overrides):
    root, train_dir, _, _ = workspace
    code = main(_args(tiny_overrides + ["fbp.n_rho=150"], "train", "--data", train_dir, "--out", str(root / "m.patw")))
    assert code == EXIT_VALIDATION


def test_train_resumes_from_model(workspace, tiny_overrides):
    root, train_dir, _, model_path = workspace
    out = str(root / "resumed.patw")
    code = main(_args(tiny_overrides, "train", "--data", train_dir, "--init-model", model_path, "--out", out))
    assert code == EXIT_OK
    record = json.loads(open(str(root / "run_record.json"), encoding="utf-8").read())
    assert "init_model" in record["inputs"]


def test_gen_data_records_effective_seed(tmp_path, tiny_overrides):
    out = str(tmp_path / "seeded")
    assert main(_args(tiny_overrides, "gen-data", "--count", "1", "--seed", "7", "--out", out)) == EXIT_OK
    record = _record(out)
    assert record["seeds"]["dataset"] == 7
    assert json.loads(open(os.path.join(out, "manifest.json"), encoding="utf-8").read())["seed"] == 7


# ==================== 重建分派 ====================

def test_reconstruct_zero_data(tiny_config):
    data = PressureData.zeros(tiny_config.geometry)
    for method in ("fbp", "tv"):
        assert np.all(reconstruct(method, data, tiny_config).values == 0.0)


def test_reconstruct_tv_matches_tv_reconstruct(tiny_config):
    case = fixed_cases(tiny_config, ["ellipses3"])[0]
    image = reconstruct("tv", case.pressure, tiny_config)
    expected = tv_reconstruct(
        case.pressure, tiny_config.geometry, tiny_config.tv, tiny_config.grid, tiny_config.forward, tiny_config.fbp
    )
    assert np.array_equal(image.values, expected.values)


def test_reconstruct_cnn_with_zero_model_equals_fbp(tiny_config):
    case = fixed_cases(tiny_config, ["ellipses5"])[0]
    model = build(tiny_config.unet).zero_weights()
    fbp = reconstruct("fbp", case.pressure, tiny_config)
    cnn = reconstruct("cnn", case.pressure, tiny_config, model)
    assert np.array_equal(fbp.values, cnn.values)


def test_reconstruct_rejects_unknown_and_mismatched(tiny_config, small_geometry):
    with pytest.raises(ConfigValidationError):
        reconstruct("art", PressureData.zeros(tiny_config.geometry), tiny_config)
    with pytest.raises(ConfigValidationError):
        reconstruct("fbp", PressureData.zeros(small_geometry), tiny_config)
    with pytest.raises(ConfigValidationError):
        reconstruct("cnn", PressureData.zeros(tiny_config.geometry), tiny_config)


# ==================== 误差表 ====================

def test_run_table_on_fixed_cases(tiny_config):
    cases = fixed_cases(tiny_config, ["ellipses5", "ellipses3"], noisy=True)
    assert [c.name for c in cases] == ["ellipses5_noisy", "ellipses3_noisy"]
    table = run_table(cases, ["fbp", "tv"], {}, tiny_config, progress=False)
    assert table.columns == ["FBP", "TV"]
    assert set(table.means) == {"FBP", "TV"}
    assert table.speedup is None
    text = table.to_text()
    assert "ellipses5_noisy" in text and "FBP" in text


def test_run_table_unknown_method(tiny_config):
    with pytest.raises(ConfigValidationError):
        run_table([], ["art"], {}, tiny_config, progress=False)


def test_unreadable_sample_goes_to_missing(workspace):
    _, _, test_dir, _ = workspace
    os.remove(os.path.join(test_dir, "sample_00001_truth.patt"))
    cases, missing = cases_from_testset(test_dir)
    assert [c.name for c in cases] == ["sample_00000"]
    assert missing[0]["item"] == "sample_00001"


# ==================== 其它子命令 ====================

def test_export_pgm_command(tmp_path, tiny_config):
    path = save_image(str(tmp_path / "img.patt"), Image(tiny_config.grid, np.full((16, 16), 0.5)))
    out = str(tmp_path / "img.pgm")
    assert main(["export-pgm", "--image", path, "--out", out, "--window", "0", "1"]) == EXIT_OK
    assert np.all(read_pgm(out) == 32768)
    record = _record(tmp_path)
    assert record["command"] == "export-pgm"
    assert record["inputs"]["image"] is not None
    assert main(["export-pgm", "--image", path, "--out", out, "--window", "1", "0"]) == EXIT_VALIDATION


def test_gradcheck_command(tmp_path):
    out = str(tmp_path / "grad.json")
    assert main(["gradcheck", "--configurations", "1", "--out", out]) == EXIT_OK
    assert all(r["passed"] for r in json.loads(open(out, encoding="utf-8").read()))
    record = _record(tmp_path)
    assert record["command"] == "gradcheck" and record["passed"] is True
    assert record["seeds"]["gradcheck"] == 0


def test_gradcheck_failure_exit_code(monkeypatch, tmp_path):
    failing = GradcheckRecord(layer="relu", shape=(1, 1, 2, 2), max_rel_error=1.0, tolerance=1e-6)
    monkeypatch.setattr(run_pat_pipeline, "gradcheck_suite", lambda configurations, seed: [failing])
    assert main(["gradcheck", "--configurations", "1", "--record-dir", str(tmp_path)]) == EXIT_NUMERICAL
    assert _record(tmp_path)["passed"] is False


def test_adjoint_test_command(tiny_overrides, tmp_path):
    code = main(_args(tiny_overrides, "adjoint-test", "--pairs", "3", "--seed", "4", "--record-dir", str(tmp_path)))
    assert code == EXIT_OK
    record = _record(tmp_path)
    assert record["command"] == "adjoint-test" and record["max_mismatch"] <= 1e-10
    assert record["seeds"]["adjoint"] == 4


def test_invalid_override_exit_code(tmp_path):
    assert main(["--set", "train.epochs=\"many\"", "adjoint-test"]) == EXIT_VALIDATION
    assert main(["--config", str(tmp_path / "none.json"), "adjoint-test"]) == EXIT_VALIDATION


def test_io_error_exit_code(tmp_path, tiny_config):
    path = save_image(str(tmp_path / "img.patt"), Image(tiny_config.grid, np.zeros((16, 16))))
    out = os.path.join(path, "img.pgm")
    assert main(["export-pgm", "--image", path, "--out", out]) == EXIT_VALIDATION


def test_missing_dataset_exit_code(tmp_path, tiny_overrides):
    code = main(_args(tiny_overrides, "train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "m.patw")))
    assert code == EXIT_VALIDATION


def test_pressure_file_round_trip_from_dataset(workspace):
    _, _, test_dir, _ = workspace
    data = load_pressure(os.path.join(test_dir, "sample_00000_pressure.patt"))
    assert data.values.shape == (30, 60)
