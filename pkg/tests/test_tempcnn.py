import json

import numpy as np
import pytest

from sourcerer.nn import RngStream, ShapeError
from sourcerer.tempcnn import (CheckpointError, TempCNNConfig, build_tempcnn, checkpoint_dict, forward,
                               forward_tape, is_running_stat, load_checkpoint, model_from_dict, predict,
                               save_checkpoint)


def small(**kw):
    base = dict(n_bands=3, n_timesteps=9, n_classes=4, conv_filters=4, fc_units=6)
    base.update(kw)
    return TempCNNConfig(**base)


def test_default_parameter_count():
    model = build_tempcnn(TempCNNConfig(), RngStream(0))
    # per-layer oracle
    conv = (10 * 5 + 1) * 64 + 2 * (64 * 64 * 5 + 64)
    bn = 3 * 2 * 64 + 2 * 256
    fc = 64 * 37 * 256 + 256
    out = 256 * 30 + 30
    assert conv + bn + fc + out == 659_422
    assert model.params.count() == 659_422


def test_tiny_parameter_count():
    cfg = TempCNNConfig(n_bands=1, n_timesteps=3, n_classes=2, conv_filters=1, kernel_len=1, fc_units=1)
    assert build_tempcnn(cfg, RngStream(0)).params.count() == 22


def test_default_checkpoint_tensor_inventory():
    model = build_tempcnn(TempCNNConfig(), RngStream(0))
    entries = checkpoint_dict(model)["tensors"]
    # 3 conv (w, b) + 4 BN (gamma, beta) + fc (w, b) + out (w, b) trainable;
    # 4 BN layers x (running mean, running var)
    assert sum(e["trainable"] for e in entries) == 18
    assert sum(is_running_stat(e["name"]) for e in entries) == 8
    assert len(entries) == 26


def test_forward_shapes_and_errors():
    model = build_tempcnn(small(), RngStream(1))
    x = np.random.default_rng(0).normal(size=(5, 3, 9)).astype(np.float32)
    assert forward(model, x).shape == (5, 4)
    assert predict(model, x).shape == (5,)
    with pytest.raises(ShapeError):
        forward(model, x[:, :2])
    with pytest.raises(ShapeError):
        forward(model, x[:, :, :8])


def test_init_is_deterministic_and_he_uniform():
    a = build_tempcnn(small(), RngStream(3))
    b = build_tempcnn(small(), RngStream(3))
    c = build_tempcnn(small(), RngStream(4))
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params.names())
    assert not np.array_equal(a.params["conv1.weight"], c.params["conv1.weight"])
    w = a.params["conv2.weight"]
    assert np.abs(w).max() <= np.sqrt(6.0 / (4 * 5))
    assert np.all(a.params["conv2.bias"] == 0) and np.all(a.params["bn1.gamma"] == 1)


def test_eval_forward_is_deterministic_and_permutation_equivariant():
    model = build_tempcnn(small(), RngStream(2))
    x = np.random.default_rng(1).normal(size=(7, 3, 9)).astype(np.float32)
    perm = np.random.default_rng(2).permutation(7)
    y = forward(model, x)
    assert np.array_equal(y, forward(model, x))
    np.testing.assert_allclose(forward(model, x[perm]), y[perm], rtol=1e-6, atol=1e-6)


def test_train_mode_updates_running_stats_unless_frozen():
    model = build_tempcnn(small(), RngStream(2))
    x = np.random.default_rng(1).normal(size=(7, 3, 9)).astype(np.float32) * 3 + 1
    before = model.params["bn1.running_mean"].copy()
    forward(model, x, "train", RngStream(0))
    assert not np.array_equal(before, model.params["bn1.running_mean"])
    model.bn_frozen = True
    snap = {n: model.params[n].copy() for n in model.params.names() if is_running_stat(n)}
    for s in range(3):
        forward(model, x, "train", RngStream(s))
    assert all(np.array_equal(snap[n], model.params[n]) for n in snap)


def test_dropout_only_in_train_mode():
    model = build_tempcnn(small(), RngStream(2))
    model.bn_frozen = True
    x = np.random.default_rng(1).normal(size=(4, 3, 9)).astype(np.float32)
    a = forward(model, x, "train", RngStream(0))
    b = forward(model, x, "train", RngStream(1))
    assert not np.array_equal(a, b)
    assert np.array_equal(forward(model, x, "train", RngStream(0)), a)


def test_flatten_is_channel_major():
    model = build_tempcnn(small(), RngStream(5))
    model.bn_frozen = True
    tape: list = []
    forward_tape(model, np.ones((2, 3, 9), np.float32), "eval", None, tape)
    kind, _, inp, _ = next(t for t in tape if t[0] == "flatten")
    flat = inp.reshape(2, -1)
    assert flat[0, 1] == inp[0, 0, 1] and flat[0, 9] == inp[0, 1, 0]


@pytest.mark.parametrize("arch", ["tempcnn", "dann", "mme"])
def test_checkpoint_round_trip_is_byte_identical(tmp_path, arch):
    model = build_tempcnn(small(), RngStream(6), arch=arch)
    model.params["bn2.running_var"] = np.full(4, 1.2345678, np.float32)
    model.bn_frozen = True
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(model, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.bn_frozen and loaded.arch == arch
    assert all(np.array_equal(model.params[n], loaded.params[n]) for n in model.params.names())
    x = np.random.default_rng(0).normal(size=(3, 3, 9)).astype(np.float32)
    assert np.array_equal(forward(model, x), forward(loaded, x))


def test_checkpoint_errors(tmp_path):
    model = build_tempcnn(small(), RngStream(6))
    doc = checkpoint_dict(model)

    bad = json.loads(json.dumps(doc))
    bad["format_version"] = 99
    with pytest.raises(CheckpointError, match="format_version"):
        model_from_dict(bad)

    bad = json.loads(json.dumps(doc))
    bad["tensors"][3]["data"] = "zz" + bad["tensors"][3]["data"][2:]
    with pytest.raises(CheckpointError, match=bad["tensors"][3]["name"]):
        model_from_dict(bad)

    bad = json.loads(json.dumps(doc))
    bad["tensors"][0]["data"] = bad["tensors"][0]["data"][:-8]
    with pytest.raises(CheckpointError):
        model_from_dict(bad)

    bad = json.loads(json.dumps(doc))
    bad["tensors"][0]["shape"] = [1, 2, 3]
    with pytest.raises(CheckpointError):
        model_from_dict(bad)

    bad = json.loads(json.dumps(doc))
    del bad["tensors"][5]
    with pytest.raises(CheckpointError, match="tensor list"):
        model_from_dict(bad)

    path = tmp_path / "x.json"
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_config_validation():
    with pytest.raises(ValueError):
        TempCNNConfig(kernel_len=4)
    with pytest.raises(ValueError):
        TempCNNConfig(conv_filters=0)
    with pytest.raises(ValueError):
        TempCNNConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        build_tempcnn(small(), RngStream(0), arch="resnet")
