import json

import numpy as np
import pytest

from bitforge.data import Dataset
from bitforge.netgraph import (LayerSpec, ModelFileError, ModelGraph, ShapeMismatchError, TrainingDiverged,
                               evaluate, finetune, forward, init_params, layer_features, load_model,
                               loss_and_grads, model_from_dict, save_model)


def build(entries, seed=0):
    return model_from_dict({"layers": entries, "init": f"random:{seed}"})


def conv(c_in, c_out, k, s, feat, bias=False):
    return {"kind": "conv", "c_in": c_in, "c_out": c_out, "kernel": k, "stride": s, "feat": feat, "bias": bias}


def dw(c, k, s, feat, bias=False):
    return {"kind": "depthwise_conv", "c_in": c, "c_out": c, "kernel": k, "stride": s, "feat": feat, "bias": bias}


def fc(h_in, h_out, bias=False):
    return {"kind": "fc", "c_in": h_in, "c_out": h_out, "bias": bias}


# -- independent straight-loop reference ------------------------------------

def ref_conv(x, w, b, stride):
    n, c, h, _ = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    ho = h // stride
    out = np.zeros((n, o, ho, ho))
    for a in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(ho):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                y, xx = i * stride + di - p, j * stride + dj - p
                                if 0 <= y < h and 0 <= xx < h:
                                    acc += x[a, ic, y, xx] * w[oc, ic, di, dj]
                    out[a, oc, i, j] = acc
    return out


def ref_dw(x, w, b, stride):
    n, c, h, _ = x.shape
    k = w.shape[1]
    p = k // 2
    ho = h // stride
    out = np.zeros((n, c, ho, ho))
    for a in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(ho):
                    acc = 0.0 if b is None else b[ch]
                    for di in range(k):
                        for dj in range(k):
                            y, xx = i * stride + di - p, j * stride + dj - p
                            if 0 <= y < h and 0 <= xx < h:
                                acc += x[a, ch, y, xx] * w[ch, di, dj]
                    out[a, ch, i, j] = acc
    return out


def ref_forward(model, x):
    h = x
    for spec, w, b in zip(model.layers, model.weights, model.biases):
        if spec.kind == "conv":
            h = ref_conv(h, w, b, spec.s_stride)
        elif spec.kind == "depthwise_conv":
            h = ref_dw(h, w, b, spec.s_stride)
        else:
            flat = h.reshape(len(h), -1)
            h = np.array([[sum(flat[a, i] * w[o, i] for i in range(flat.shape[1])) + (0 if b is None else b[o])
                           for o in range(w.shape[0])] for a in range(len(flat))])
        if spec.k != len(model) - 1:
            h = np.maximum(h, 0)
    return h


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_loop_oracle(seed):
    model = build([conv(2, 4, 3, 2, 8, True), dw(4, 3, 1, 4, True), conv(4, 3, 1, 1, 4), fc(48, 5, True)], seed)
    for b in model.biases:
        if b is not None:
            b[:] = np.random.default_rng(seed).normal(size=b.shape)
    x = np.random.default_rng(seed + 10).normal(size=(3, 2, 8, 8))
    logits, _ = forward(model, x)
    assert np.max(np.abs(logits - ref_forward(model, x))) <= 1e-5


@pytest.mark.parametrize("kind", ["conv3", "conv1", "dw", "dw_s2", "conv_s2_k5"])
def test_each_layer_kind_matches_oracle(kind):
    entries = {
        "conv3": [conv(3, 2, 3, 1, 6)], "conv1": [conv(3, 2, 1, 1, 6)], "dw": [dw(3, 3, 1, 6)],
        "dw_s2": [dw(3, 3, 2, 6)], "conv_s2_k5": [conv(3, 2, 5, 2, 6)],
    }[kind]
    model = build(entries, 4)
    x = np.random.default_rng(5).normal(size=(2, 3, 6, 6))
    assert np.max(np.abs(forward(model, x)[0] - ref_forward(model, x))) <= 1e-5


def test_zero_weights_give_zero_logits():
    model = build([conv(3, 4, 3, 2, 8), fc(64, 10)])
    for w in model.weights:
        w[...] = 0
    x = np.random.default_rng(0).normal(size=(4, 3, 8, 8))
    assert np.all(forward(model, x)[0] == 0)


def test_pointwise_permutation_is_identity_like():
    model = build([conv(3, 3, 1, 1, 4)])
    perm = [2, 0, 1]
    model.weights[0][...] = np.eye(3)[perm][:, :, None, None]
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(forward(model, x)[0], x[:, perm])


def test_capture_activations_are_layer_inputs():
    model = build([conv(3, 4, 3, 2, 8), dw(4, 3, 1, 4), fc(64, 10)])
    x = np.random.default_rng(2).normal(size=(2, 3, 8, 8))
    logits, acts = forward(model, x, capture_activations=True)
    assert len(acts) == 3
    np.testing.assert_array_equal(acts[0], x)
    assert all(np.all(a >= 0) for a in acts[1:])
    assert forward(model, x)[1] is None


def test_forward_rejects_wrong_batch_shape():
    model = build([conv(3, 4, 3, 2, 8), fc(64, 10)])
    with pytest.raises(ShapeMismatchError):
        forward(model, np.zeros((1, 3, 6, 6)))


# -- loading -----------------------------------------------------------------

def test_separable_toy_net_file(tmp_path):
    entries = [conv(3, 8, 3, 2, 16), dw(8, 3, 1, 8), conv(8, 16, 1, 1, 8), dw(16, 3, 2, 8),
               conv(16, 16, 1, 1, 4), dw(16, 3, 1, 4), fc(256, 10)]
    path = tmp_path / "toy.json"
    path.write_text(json.dumps({"layers": entries, "init": "random:3"}))
    model = load_model(path)
    assert len(model) == 7
    assert [l.i_dw for l in model.layers[1:6]] == [1, 0, 1, 0, 1]


def test_fc_param_count():
    assert LayerSpec(0, "fc", 256, 10, 1, 0, 256).n_params == 2560
    assert LayerSpec(0, "fc", 256, 10, 1, 0, 256, bias=True).n_params == 2570
    assert LayerSpec(0, "conv", 3, 8, 3, 1, 8).n_params == 216
    assert LayerSpec(0, "depthwise_conv", 8, 8, 3, 1, 8).n_params == 72


def test_channel_mismatch_is_rejected():
    entries = [conv(3, 8, 3, 1, 8), conv(8, 8, 1, 1, 8), conv(8, 8, 1, 1, 8), conv(8, 6, 1, 1, 8), conv(5, 4, 1, 1, 8)]
    with pytest.raises(ShapeMismatchError):
        build(entries)


@pytest.mark.parametrize("bad", [
    {"layers": [{"kind": "pool", "c_in": 1, "c_out": 1, "kernel": 1, "stride": 1, "feat": 4}]},
    {"layers": [{"kind": "conv", "c_in": 1, "c_out": 1, "kernel": 3, "stride": 3, "feat": 6}]},
    {"layers": [{"kind": "conv", "c_in": 1, "c_out": 1}]},
    {"layers": [{"kind": "depthwise_conv", "c_in": 2, "c_out": 3, "kernel": 3, "stride": 1, "feat": 4}]},
    {"nolayers": []},
    {"layers": [conv(1, 1, 3, 1, 4)], "init": "zeros"},
])
def test_schema_violations(bad):
    with pytest.raises(ModelFileError):
        model_from_dict(bad)


def test_weights_round_trip(tmp_path):
    model = build([conv(3, 4, 3, 2, 8, True), fc(64, 10, True)], 7)
    save_model(model, tmp_path / "m.json")
    index = json.loads((tmp_path / "m.bin.index.json").read_text())
    assert index["total_bytes"] == 4 * sum(p.size for p in model.parameters())
    assert [(t["layer"], t["tensor"]) for t in index["tensors"]] == [(0, "weight"), (0, "bias"), (1, "weight"), (1, "bias")]
    back = load_model(tmp_path / "m.json")
    for a, b in zip(model.parameters(), back.parameters()):
        np.testing.assert_array_equal(a.astype(np.float32), b)


# -- training ----------------------------------------------------------------

def flat_params(model):
    return np.concatenate([p.ravel() for p in model.parameters()])


def test_gradients_match_finite_differences():
    model = build([conv(2, 3, 3, 2, 6, True), dw(3, 3, 1, 3, True), conv(3, 4, 1, 1, 3, True), fc(36, 3, True)], 11)
    assert sum(p.size for p in model.parameters()) <= 1000
    rng = np.random.default_rng(3)
    for b in model.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(4, 2, 6, 6))
    y = rng.integers(0, 3, size=4)
    _, gw, gb = loss_and_grads(model, x, y)
    analytic = np.concatenate([g.ravel() for pair in zip(gw, gb) for g in pair if g is not None])
    h = 1e-3
    numeric = []
    for p in model.parameters():
        for i in range(p.size):
            old = p.flat[i]
            p.flat[i] = old + h
            lp = loss_and_grads(model, x, y)[0]
            p.flat[i] = old - h
            lm = loss_and_grads(model, x, y)[0]
            p.flat[i] = old
            numeric.append((lp - lm) / (2 * h))
    numeric = np.array(numeric)
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    assert err.max() <= 1e-4


def separable_set(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4))
    y = (x @ np.array([1.0, -2.0, 0.5, 1.0]) > 0).astype(int)
    return Dataset(x, y, 2)


def test_finetune_learns_separable_set():
    model = build([fc(4, 16, True), fc(16, 2, True)], 0)
    data = separable_set()
    finetune(model, data, epochs=5, lr=0.05)
    assert evaluate(model, data) >= 0.95


def test_finetune_zero_lr_is_identity():
    model = build([conv(3, 4, 3, 2, 8, True), fc(64, 10, True)], 1)
    before = flat_params(model).copy()
    rng = np.random.default_rng(0)
    data = Dataset(rng.normal(size=(40, 3, 8, 8)), rng.integers(0, 10, 40))
    finetune(model, data, epochs=2, lr=0.0)
    np.testing.assert_array_equal(flat_params(model), before)


def test_finetune_defaults():
    import inspect
    sig = inspect.signature(finetune)
    assert sig.parameters["lr"].default == 1e-3
    assert sig.parameters["momentum"].default == 0.9
    assert sig.parameters["epochs"].default == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finetune_reports_divergence():
    model = build([fc(4, 16), fc(16, 2)], 0)
    model.weights[0][...] = 1e200
    with pytest.raises(TrainingDiverged):
        finetune(model, separable_set(), lr=1.0)


def test_finetune_rejects_bad_arguments():
    model = build([fc(4, 2)])
    with pytest.raises(ValueError):
        finetune(model, separable_set(), epochs=0)
    with pytest.raises(ValueError):
        finetune(model, separable_set(), requantize="sometimes")


# -- evaluation --------------------------------------------------------------

def test_constant_logits_give_chance_accuracy():
    model = build([fc(4, 10, True)])
    model.weights[0][...] = 0
    data = Dataset(np.random.default_rng(0).normal(size=(100, 4)), np.arange(100) % 10)
    assert evaluate(model, data) == 0.1


def test_memorising_model_is_perfect():
    model = build([fc(10, 10)])
    model.weights[0][...] = np.eye(10)
    data = Dataset(np.eye(10)[np.arange(50) % 10], np.arange(50) % 10)
    assert evaluate(model, data) == 1.0


def test_evaluate_is_deterministic_and_rejects_empty(trained_model, splits):
    assert evaluate(trained_model, splits.val) == evaluate(trained_model, splits.val)
    assert evaluate(trained_model, splits.val, batch_size=7) == evaluate(trained_model, splits.val)
    with pytest.raises(ValueError):
        evaluate(trained_model, splits.val.subset(np.array([], dtype=int)))


# -- features ----------------------------------------------------------------

def test_layer_features():
    model = build([conv(3, 4, 3, 2, 8), dw(4, 3, 1, 4), fc(64, 10)])
    f = layer_features(model, 2, "activation", 0.3)
    assert (f[3], f[4], f[7]) == (1.0, 0.0, 0.0)
    assert f == (2.0, 64.0, 10.0, 1.0, 0.0, 64.0, 640.0, 0.0, 0.0, 0.3)
    f = layer_features(model, 1, "weight", 0.0)
    assert f[7] == 1.0 and f[8] == 1.0
    assert layer_features(model, 0, "weight", 0.0)[9] == 0.0
    with pytest.raises(ValueError):
        layer_features(model, 0, "bias", 0.0)


def test_init_params_are_seeded():
    layers = build([conv(3, 4, 3, 2, 8)]).layers
    a, _ = init_params(layers, 5)
    b, _ = init_params(layers, 5)
    np.testing.assert_array_equal(a[0], b[0])
    assert isinstance(ModelGraph(layers, a, [None]), ModelGraph)
