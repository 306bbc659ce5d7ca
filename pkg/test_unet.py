"""
残差 U-net 测试：结构、恒等映射、持久化、反向传播、训练与评估
"""

import numpy as np
import pytest

from dataset_builder import gen_dataset
from nn_engine import TrainConfig, glorot_bound, l1_loss, numerical_gradient, relative_error
from pat_core import (
    ConfigValidationError,
    Grid,
    Image,
    ShapeMismatchError,
    TensorFormatError,
    make_rng,
    save_weight_set,
)
from unet import UNetConfig, UNetModel, build, evaluate, forward, layer_shapes, train


TINY = UNetConfig(channels=2, levels=2, image_size=8)


def test_default_layer_count():
    names = [name for name, _, _ in layer_shapes(UNetConfig())]
    convs3 = [n for n in names if "_conv" in n]
    assert len(convs3) == 18
    assert len([n for n in names if n.startswith("up")]) == 4
    assert names[-1] == "head"
    assert len(convs3) + 1 == 19


def test_channel_progression():
    shapes = dict((name, shape) for name, shape, _ in layer_shapes(UNetConfig()))
    assert shapes["enc1_conv1"] == (32, 1, 3, 3)
    assert shapes["enc5_conv2"] == (512, 512, 3, 3)
    assert shapes["up4"] == (512, 256, 2, 2)
    assert shapes["dec4_conv1"] == (256, 512, 3, 3)
    assert shapes["head"] == (1, 32, 1, 1)


def test_image_size_must_divide():
    with pytest.raises(ConfigValidationError):
        UNetConfig(levels=5, image_size=100)


def test_build_deterministic_and_bounded():
    a = build(TINY, seed=3)
    b = build(TINY, seed=3)
    for name, _, (fan_in, fan_out) in layer_shapes(TINY):
        w = a.weights[f"{name}.weight"]
        assert np.array_equal(w, b.weights[f"{name}.weight"])
        assert np.max(np.abs(w)) <= np.float32(glorot_bound(fan_in, fan_out))
        assert np.all(a.weights[f"{name}.bias"] == 0)
    assert a.dtype == np.float32


def test_zero_weight_model_is_identity():
    model = build(UNetConfig(channels=4, levels=3, image_size=16), seed=0).zero_weights()
    X = Image(Grid(16), make_rng(1).standard_normal((16, 16)))
    assert np.array_equal(forward(model, X).values, X.values)


def test_forward_size_mismatch():
    with pytest.raises(ShapeMismatchError):
        forward(build(TINY), Image.zeros(Grid(16)))


def test_missing_weight_rejected():
    model = build(TINY)
    weights = dict(model.weights)
    del weights["head.bias"]
    with pytest.raises(ShapeMismatchError):
        UNetModel(TINY, weights)


# ==================== 持久化 ====================

def test_save_load_round_trip(tmp_path):
    model = build(TINY, seed=5)
    model.velocity = {k: np.full_like(v, 0.25) for k, v in model.weights.items()}
    path = model.save(str(tmp_path / "m.patw"))
    loaded = UNetModel.load(path)
    assert loaded.config == TINY
    assert list(loaded.weights) == list(model.weights)
    for name in model.weights:
        assert np.array_equal(loaded.weights[name], model.weights[name])
        assert np.array_equal(loaded.velocity[name], model.velocity[name])
    assert loaded.meta == model.meta


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        UNetModel.load(str(tmp_path / "none.patw"))


def test_load_foreign_weight_set(tmp_path):
    path = save_weight_set(str(tmp_path / "x.patw"), {"a": np.zeros(2)}, {"format": "other"})
    with pytest.raises(TensorFormatError):
        UNetModel.load(path)


# ==================== 反向传播 ====================

def test_trunk_backward_matches_finite_differences():
    model = build(TINY, seed=7, dtype=np.float64)
    for name in model.weights:
        if name.endswith(".bias"):
            model.weights[name] = make_rng(8).uniform(0.1, 0.3, size=model.weights[name].shape)
    x = make_rng(9).standard_normal((1, 1, 8, 8))
    out, tape = model.trunk_forward(x)
    proj = make_rng(10).standard_normal(out.shape)
    grads = model.trunk_backward(proj, tape)

    def loss() -> float:
        return float(np.sum(model.trunk_forward(x)[0] * proj))

    for name in ("head.weight", "head.bias", "up1.weight", "dec1_conv2.weight", "enc1_conv1.weight"):
        numeric = numerical_gradient(loss, model.weights[name], 1e-6)
        assert relative_error(grads[name], numeric) < 1e-4, name


def test_first_order_decrease():
    model = build(TINY, seed=11, dtype=np.float64)
    rng = make_rng(12)
    x = rng.standard_normal((1, 1, 8, 8))
    y = x + 0.3 * rng.standard_normal((1, 1, 8, 8))
    pair = [(x[0, 0], y[0, 0])]
    config = TrainConfig(learning_rate=1e-6, momentum=0.0, epochs=1)

    trunk, tape = model.trunk_forward(x)
    loss0, grad = l1_loss(x + trunk, y)
    grads = model.trunk_backward(grad, tape)
    expected = -config.learning_rate * sum(float(np.sum(g * g)) for g in grads.values())

    trained, _ = train(model, pair, config, progress=False)
    trunk1, _ = trained.trunk_forward(x)
    loss1, _ = l1_loss(x + trunk1, y)
    assert loss1 - loss0 == pytest.approx(expected, rel=0.25)


# ==================== 训练 ====================

def test_overfit_single_dataset_pair(tiny_config, tmp_path):
    manifest = gen_dataset(tiny_config, str(tmp_path), count=1, progress=False)
    pair = manifest.pairs()
    model = build(UNetConfig(channels=8, levels=2, image_size=16), seed=0)
    # ℓ¹ 次梯度需要逐步缩小的步长才能在单样本上收敛
    config = TrainConfig(learning_rate=2e-2, momentum=0.9, epochs=200, lr_decay=0.985)
    trained, history = train(model, pair, config, progress=False)
    assert len(history) == 200
    assert history[-1] < 0.1 * history[0]
    assert trained.meta["training"]["epochs"] == 200
    assert trained.meta["training"]["lr_decay"] == 0.985


def test_lr_decay_one_matches_constant_rate():
    rng = make_rng(5)
    pairs = [(rng.standard_normal((8, 8)), rng.standard_normal((8, 8))) for _ in range(2)]
    constant = TrainConfig(learning_rate=1e-3, momentum=0.9, epochs=3)
    _, a = train(build(TINY, seed=2), pairs, constant, progress=False)
    _, b = train(build(TINY, seed=2), pairs, TrainConfig(learning_rate=1e-3, momentum=0.9, epochs=3, lr_decay=1.0), progress=False)
    _, c = train(build(TINY, seed=2), pairs, TrainConfig(learning_rate=1e-3, momentum=0.9, epochs=3, lr_decay=0.5), progress=False)
    assert a == b
    assert a[0] == c[0] and a[1:] != c[1:]


def test_training_deterministic():
    rng = make_rng(2)
    pairs = [(rng.standard_normal((8, 8)), rng.standard_normal((8, 8))) for _ in range(3)]
    config = TrainConfig(learning_rate=1e-3, momentum=0.9, epochs=2, seed=4)
    a, ha = train(build(TINY, seed=1), pairs, config, progress=False)
    b, hb = train(build(TINY, seed=1), pairs, config, progress=False)
    assert ha == hb
    for name in a.weights:
        assert np.array_equal(a.weights[name], b.weights[name])


def test_resume_from_checkpoint(tmp_path):
    rng = make_rng(3)
    pairs = [(rng.standard_normal((8, 8)), rng.standard_normal((8, 8)))]
    one = TrainConfig(learning_rate=1e-3, momentum=0.9, epochs=1)
    two = TrainConfig(learning_rate=1e-3, momentum=0.9, epochs=2)
    straight, _ = train(build(TINY, seed=2), pairs, two, progress=False)

    half, _ = train(build(TINY, seed=2), pairs, one, progress=False)
    path = half.save(str(tmp_path / "half.patw"))
    resumed, _ = train(UNetModel.load(path), pairs, one, progress=False)
    for name in straight.weights:
        assert np.array_equal(straight.weights[name], resumed.weights[name])


def test_train_rejects_empty_and_mismatched():
    with pytest.raises(ConfigValidationError):
        train(build(TINY), [], TrainConfig(epochs=1), progress=False)
    with pytest.raises(ShapeMismatchError):
        train(build(TINY), [(np.zeros((16, 16)), np.zeros((16, 16)))], TrainConfig(epochs=1), progress=False)


# ==================== 评估 ====================

def test_evaluate_identity_matches_input_error():
    rng = make_rng(4)
    pairs = []
    for _ in range(4):
        truth = rng.uniform(0.5, 1.0, size=(8, 8))
        pairs.append((truth + 0.1 * rng.standard_normal((8, 8)), truth))
    model = build(TINY).zero_weights()
    report = evaluate(model, pairs, workers=2)
    assert report.rows["FBP"] == report.rows["CNN"]
    assert set(report.means) == {"FBP", "CNN"}
    assert "FBP" in report.to_text()


def test_evaluate_without_model():
    truth = np.ones((8, 8))
    report = evaluate(None, [(truth * 1.1, truth)])
    assert list(report.rows) == ["FBP"]
    assert report.rows["FBP"][0] == pytest.approx(0.1)
