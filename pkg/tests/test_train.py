import json

import numpy as np
import pytest

from equilopo import autodiff as ad
from equilopo.conv import rotate_field
from equilopo.so3_math import Rotation, octahedral_group
from equilopo.train import (
    TrainConfig,
    TrainingDiverged,
    build_model,
    load_checkpoint,
    macro_auc,
    model_description,
    predict,
    save_checkpoint,
    train,
)

SMALL = {"blocks": 1, "width": 2, "activation": "adaptive", "downsample_before": [0], "dropout": 0.0}


def _data(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 8, 8, 8)), rng.integers(0, 3, n)


def _params(net):
    return {k: p.data.copy() for k, p in net.named_parameters()}


def test_train_config_validation():
    TrainConfig(lr=0.0).validate()
    for bad in (dict(lr=-1.0), dict(lr=float("nan")), dict(epochs=-1), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_zero_learning_rate_keeps_parameters_bit_identical():
    net = build_model(SMALL)
    before = _params(net)
    train(net, _data(), TrainConfig(lr=0.0, epochs=1, batch_size=4))
    for k, v in _params(net).items():
        np.testing.assert_array_equal(v, before[k])


def test_zero_epochs_checkpoint_equals_initialization(tmp_path):
    net = build_model(SMALL)
    init = net.state_dict()
    records = train(net, _data(), TrainConfig(epochs=0))
    assert records == []
    path = tmp_path / "ck.elpo"
    save_checkpoint(path, net)
    back, manifest = load_checkpoint(path)
    assert manifest["model"] == model_description(net)
    state = back.state_dict()
    for k, v in init.items():
        np.testing.assert_array_equal(state[k], v)


def test_seeded_rerun_reproduces_metric_log(tmp_path):
    logs = []
    for i in range(2):
        net = build_model(SMALL)
        path = tmp_path / f"m{i}.jsonl"
        train(net, _data(), TrainConfig(epochs=2, batch_size=4), val_data=_data(6, 1), metrics_path=path)
        logs.append(path.read_text())
    assert logs[0] == logs[1]
    recs = [json.loads(line) for line in logs[0].splitlines()]
    assert [(r["epoch"], r["split"]) for r in recs] == [(0, "train"), (0, "val"), (1, "train"), (1, "val")]
    assert set(recs[0]) == {"epoch", "split", "loss", "accuracy", "auc"}


def test_training_reduces_loss_on_separable_data():
    rng = np.random.default_rng(2)
    y = np.repeat([0, 1, 2], 4)
    X = rng.standard_normal((12, 8, 8, 8)) * 0.1
    X[y == 1] += 1.0
    X[y == 2, 2:6, 2:6, 2:6] += 2.0
    net = build_model(dict(SMALL, classes=3))
    recs = train(net, (X, y), TrainConfig(epochs=6, batch_size=4, lr=0.01))
    assert recs[-1]["loss"] < recs[0]["loss"]


def test_nan_input_aborts_with_diagnostic():
    X, y = _data()
    X[3, 0, 0, 0] = np.nan
    net = build_model(SMALL)
    with pytest.raises(TrainingDiverged) as err:
        train(net, (X, y), TrainConfig(epochs=1, batch_size=8))
    assert err.value.epoch == 0 and err.value.step == 0
    assert "step 0" in str(err.value) and err.value.layer


def test_loss_and_gradients_invariant_under_octahedral_rotation():
    net = build_model(SMALL)
    X, y = _data(4, 3)

    def loss_and_grads(vols):
        net.zero_grad()
        loss = ad.cross_entropy(net(vols), y)
        loss.backward()
        return loss.item(), {k: p.grad.copy() for k, p in net.named_parameters() if p.grad is not None}

    l0, g0 = loss_and_grads(X)
    for m in octahedral_group()[1:6]:
        l1, g1 = loss_and_grads(rotate_field(X, Rotation.from_matrix(m)))
        assert abs(l1 - l0) <= 1e-6
        for k in g0:
            assert np.abs(g1[k] - g0[k]).max() <= 1e-6 * max(1.0, np.abs(g0[k]).max())


def test_trained_network_stays_invariant():
    net = build_model(SMALL)
    train(net, _data(8, 4), TrainConfig(epochs=1, batch_size=4))
    x = _data(2, 5)[0]
    ref = predict(net, x)
    for m in octahedral_group():
        out = predict(net, rotate_field(x, Rotation.from_matrix(m)))
        assert np.abs(out - ref).max() <= 1e-5 * np.abs(ref).max()


def test_checkpoint_roundtrip_predictions(tmp_path):
    net = build_model(SMALL)
    train(net, _data(), TrainConfig(epochs=1, batch_size=4))
    path = tmp_path / "ck.elpo"
    save_checkpoint(path, net, TrainConfig(epochs=1, batch_size=4))
    back, manifest = load_checkpoint(path)
    assert manifest["train"]["epochs"] == 1
    x = _data(3, 6)[0]
    np.testing.assert_array_equal(predict(back, x), predict(net, x))


def test_plain_cnn_checkpoint_roundtrip(tmp_path):
    net = build_model({"kind": "cnn", "widths": [2, 3], "input_size": 8, "input_pool": 1})
    path = tmp_path / "cnn.elpo"
    save_checkpoint(path, net)
    back, _ = load_checkpoint(path)
    x = _data(2, 7)[0]
    np.testing.assert_array_equal(predict(back, x), predict(net, x))


def test_build_model_rejects_unknown_kind():
    with pytest.raises(ValueError):
        build_model({"kind": "transformer"})


def test_macro_auc_examples():
    labels = np.array([0, 0, 1, 1])
    perfect = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]])
    assert macro_auc(perfect, labels) == 1.0
    assert macro_auc(perfect[:, ::-1], labels) == 0.0
    assert macro_auc(np.full((4, 2), 0.5), labels) == 0.5
