import json
from types import SimpleNamespace

import numpy as np
import pytest

from ehpower.datagen import FeatureStats
from ehpower.neuralnet import (CheckpointError, MlpArchitecture, MlpParameters, MultiplyCounter,
                               NonFiniteError, TrainConfig, TrainingDiverged, build_architecture,
                               forward, forward_single, gradient_check, init_parameters,
                               kink_distance, load_checkpoint, loss, loss_gradient, params_digest,
                               save_checkpoint, train)


def test_architecture_k5():
    sizes = build_architecture(5).sizes
    assert len(sizes) == 32
    assert sizes[:5] == [15, 150, 150, 140, 140]
    assert sizes[1] == 150 and sizes[29] == 10 and sizes[30] == 10 and sizes[31] == 5


def test_architecture_k1():
    sizes = build_architecture(1).sizes
    assert sizes[:5] == [3, 30, 30, 28, 28] and sizes[-3:] == [2, 2, 1]


def test_multiplication_count():
    arch = build_architecture(5)
    sizes = arch.sizes
    assert arch.multiplications == sum(sizes[j] * sizes[j - 1] for j in range(1, 32)) == 238300
    params = init_parameters(arch, np.random.default_rng(0))
    counter = MultiplyCounter()
    forward(params, np.ones(15), counter)
    assert counter.count == 238300


@pytest.mark.parametrize("h", [0, 31])
def test_architecture_rejects_depth(h):
    with pytest.raises(ValueError):
        build_architecture(1, h)


def test_zero_network_outputs_zero():
    arch = build_architecture(2, 4)
    params = MlpParameters(arch, [np.zeros((b, a)) for a, b in zip(arch.sizes[:-1], arch.sizes[1:])],
                           [np.zeros(b) for b in arch.sizes[1:]])
    x = np.random.default_rng(0).normal(size=(7, 6))
    assert np.array_equal(forward(params, x), np.zeros((7, 2)))


def test_identity_passthrough_and_leaky_branch():
    arch = MlpArchitecture([3, 3, 3], 0.05)
    eye = np.eye(3)
    params = MlpParameters(arch, [eye, eye], [np.zeros(3), np.zeros(3)])
    assert np.array_equal(forward(params, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])
    assert np.allclose(forward(params, np.array([-2.0, 1.0, -4.0])), [-0.1, 1.0, -0.2])


def test_forward_single_matches_batch():
    arch = build_architecture(3, 8)
    params = init_parameters(arch, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=9)
    assert np.allclose(forward_single(params, x), forward(params, x[None])[0], atol=1e-12)


def test_loss_zero_at_labels():
    arch = build_architecture(1, 3)
    params = init_parameters(arch, np.random.default_rng(3))
    X = np.random.default_rng(4).normal(size=(6, 3))
    Y = forward(params, X)
    value, dW, db = loss_gradient(params, X, Y)
    assert value == 0.0 and loss(params, X, Y) == 0.0
    assert all(not g.any() for g in dW + db)


def test_single_linear_neuron_derivative():
    arch = MlpArchitecture([1, 1])
    params = MlpParameters(arch, [np.array([[2.0]])], [np.array([0.5])])
    x, y = np.array([[3.0]]), np.array([[4.0]])
    value, dW, db = loss_gradient(params, x, y)
    yhat = 6.5
    assert value == pytest.approx((yhat - 4.0) ** 2)
    assert db[0][0] == pytest.approx(2 * (yhat - 4.0))
    assert dW[0][0, 0] == pytest.approx(2 * (yhat - 4.0) * 3.0)


def test_tiny_net_gradient_check():
    rng = np.random.default_rng(5)
    arch = MlpArchitecture([3, 4, 2])
    while True:
        params = init_parameters(arch, rng)
        X, Y = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
        if kink_distance(params, X) > 1e-4:
            break
    assert gradient_check(params, X, Y, 1e-6) < 1e-5


def test_nonfinite_reports_layer():
    arch = MlpArchitecture([1, 2, 1])
    params = MlpParameters(arch, [np.array([[np.inf], [1.0]]), np.ones((1, 2))], [np.zeros(2), np.zeros(1)])
    with pytest.raises(NonFiniteError) as err:
        forward(params, np.array([1.0]))
    assert err.value.layer == 2


def _toy(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    Y = np.tanh(X @ np.array([[1.0], [-0.5], [0.25]]))
    return SimpleNamespace(features=X, labels=Y)


def test_memorization():
    data = _toy(64, 0)
    arch = build_architecture(1, 4)
    cfg = TrainConfig(learning_rate=3e-3, batch_size=16, epochs=200, patience=200, seed=1)
    res = train(data, data, arch, cfg)
    assert res.train_loss[-1] < 1e-2 * res.train_loss[0]


def test_best_checkpoint_rule_and_determinism():
    tr, va = _toy(200, 1), _toy(60, 2)
    arch = build_architecture(1, 6)
    cfg = TrainConfig(batch_size=32, epochs=40, patience=5, seed=4)
    a = train(tr, va, arch, cfg)
    b = train(tr, va, arch, cfg)
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
    assert params_digest(a.params) == params_digest(b.params)
    assert loss(a.params, va.features, va.labels) <= loss(a.final_params, va.features, va.labels)
    assert a.val_loss[a.best_epoch - 1] == min(a.val_loss)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_curves():
    tr = _toy(64, 3)
    tr.labels = tr.labels * 1e300
    cfg = TrainConfig(learning_rate=1.0, optimizer="sgd", epochs=5, clip_norm=1e308, seed=0)
    with pytest.raises(TrainingDiverged) as err:
        train(tr, tr, build_architecture(1, 3), cfg)
    assert err.value.result is not None


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_checkpoint_round_trip(tmp_path):
    arch = build_architecture(2, 5)
    params = init_parameters(arch, np.random.default_rng(6))
    stats = FeatureStats(np.arange(6.0), np.full(6, 2.0))
    path = tmp_path / "ck.json"
    save_checkpoint(params, stats, path, {"seed": 1}, {"note": "x"})
    ck = load_checkpoint(path)
    x = np.random.default_rng(7).normal(size=(4, 6))
    assert np.max(np.abs(forward(ck.params, x) - forward(params, x))) <= 1e-10
    assert np.array_equal(ck.stats.mean, stats.mean) and ck.k == 2


def test_checkpoint_truncated(tmp_path):
    params = init_parameters(build_architecture(1, 2), np.random.default_rng(8))
    path = tmp_path / "ck.json"
    save_checkpoint(params, None, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError, match="char"):
        load_checkpoint(path)


def test_checkpoint_k_mismatch(tmp_path):
    params = init_parameters(build_architecture(5, 2), np.random.default_rng(9))
    path = tmp_path / "ck.json"
    save_checkpoint(params, None, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expect_k=1)


def test_checkpoint_bad_shapes(tmp_path):
    params = init_parameters(build_architecture(1, 2), np.random.default_rng(10))
    path = tmp_path / "ck.json"
    save_checkpoint(params, None, path)
    doc = json.loads(path.read_text())
    doc["layers"][0]["bias"] = doc["layers"][0]["bias"][:-1]
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
