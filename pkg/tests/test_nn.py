import math

import numpy as np
import pytest

from nsfchain.nn import (
    IDENTITY,
    RELU,
    GlobalModel,
    Layer,
    ModelError,
    OptimizerState,
    ParamGrads,
    ProtocolError,
    SubModel,
    TrainConfig,
    backward,
    forward,
    gaussian_blobs,
    layers_per_submodel,
    load_checkpoint,
    loss_and_grad,
    lr_schedule,
    save_checkpoint,
    sgd_step,
    split_model,
)

from oracles import central_difference, mlp_loss


def _data(n, dim, classes, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, dim)), rng.integers(0, classes, size=n)


def test_uniform_logits_loss():
    for c in (2, 10, 100):
        loss, grad = loss_and_grad(np.zeros((4, c)), np.arange(4) % c)
        assert loss == pytest.approx(math.log(c), rel=1e-12)
        assert grad.sum() == pytest.approx(0.0, abs=1e-12)


def test_peaked_logits():
    logits = np.array([[50.0, 0.0, 0.0]])
    loss, grad = loss_and_grad(logits, np.array([0]))
    assert loss < 1e-20
    assert np.abs(grad).max() < 1e-20


def test_bad_labels():
    with pytest.raises(ModelError):
        loss_and_grad(np.zeros((2, 3)), np.array([0, 3]))


def test_logit_gradient_fd():
    x, y = _data(5, 4, 4)
    logits = x.copy()
    _, grad = loss_and_grad(logits, y)
    fd = central_difference(lambda: loss_and_grad(logits, y)[0], [logits])[0]
    assert np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-4


def test_all_parameter_gradients_fd():
    model = GlobalModel.build((6, 8, 7, 4), seed=3, dtype=np.float64)
    for l in model.layers:
        l.bias[:] = np.random.default_rng(1).normal(scale=0.1, size=l.bias.shape)
    x, y = _data(5, 6, 4, seed=2)
    subs = split_model(model, [1, 2])
    h = x
    for s in subs:
        h = forward(s, h)
    _, g = loss_and_grad(h, y)
    grads = []
    for s in reversed(subs):
        g, pg = backward(s, g)
        grads = list(zip(pg.weights, pg.bias)) + grads
    W = [l.weights for l in model.layers]
    b = [l.bias for l in model.layers]
    relu = [l.activation == RELU for l in model.layers]
    params = [p for pair in zip(W, b) for p in pair]
    fd = central_difference(lambda: mlp_loss(W, b, relu, x, y), params)
    analytic = [p for pair in grads for p in pair]
    for a, n in zip(analytic, fd):
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-7)
        assert rel.max() < 1e-4


def test_identity_layer():
    eye = Layer(np.eye(3), np.zeros(3), IDENTITY)
    sub = SubModel(1, [eye])
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(forward(sub, x), x)
    w = np.arange(6.0).reshape(2, 3)
    sub = SubModel(1, [Layer(w, np.zeros(3), IDENTITY)])
    forward(sub, np.ones((1, 2)))
    g = np.array([[1.0, 2.0, 3.0]])
    gin, _ = backward(sub, g)
    assert np.array_equal(gin, g @ w.T)


def test_backward_before_forward():
    model = GlobalModel.build((3, 4, 2), seed=0)
    sub = split_model(model, [1])[0]
    with pytest.raises(ProtocolError):
        backward(sub, np.zeros((1, 4), dtype=np.float32))


def test_forward_dim_mismatch():
    sub = split_model(GlobalModel.build((3, 4, 2), seed=0), [1])[0]
    with pytest.raises(ModelError):
        forward(sub, np.zeros((1, 5), dtype=np.float32))


def test_wide_submodel_shape():
    model = GlobalModel.build((3072, 4096, 64, 32), seed=0)
    f1 = split_model(model, [1, 2])[0]
    assert forward(f1, np.zeros((1, 3072), dtype=np.float32)).shape == (1, 4096)


def test_lr_schedule():
    cfg = TrainConfig(eta=0.1)
    assert lr_schedule(cfg, 1) == 0.1
    assert lr_schedule(cfg, 60) == 0.1
    assert lr_schedule(cfg, 61) == pytest.approx(0.02)
    assert lr_schedule(cfg, 121) == pytest.approx(0.004)
    assert lr_schedule(cfg, 161) == pytest.approx(8e-4)
    with pytest.raises(ModelError):
        lr_schedule(cfg, 0)


def _one_layer(w):
    return SubModel(1, [Layer(w.copy(), np.zeros(w.shape[1]), IDENTITY)])


def test_sgd_plain_and_zero_rate():
    w = np.array([[1.0, -2.0], [0.5, 3.0]])
    g = np.array([[0.1, 0.2], [-0.3, 0.4]])
    sub = _one_layer(w)
    cfg = TrainConfig(eta=0.5, momentum=0.0, weight_decay=0.0)
    sgd_step(sub, ParamGrads([g], [np.zeros(2)]), OptimizerState.zeros_like(sub.layers), cfg, 1)
    assert np.array_equal(sub.layers[0].weights, w - 0.5 * g)
    with pytest.raises(ModelError):
        TrainConfig(eta=0.0)
    # a vanishing rate after the schedule leaves parameters where they are
    sub = _one_layer(w)
    cfg = TrainConfig(eta=1e-300, momentum=0.0, weight_decay=0.0, schedule=((1, 1e300),))
    sgd_step(sub, ParamGrads([g], [np.zeros(2)]), OptimizerState.zeros_like(sub.layers), cfg, 2)
    assert np.array_equal(sub.layers[0].weights, w)


def test_two_step_momentum():
    eta, mu, wd = 0.1, 0.9, 0.01
    w0 = np.array([[1.0, -2.0], [0.5, 3.0]])
    g0 = np.array([[0.1, 0.2], [-0.3, 0.4]])
    g1 = np.array([[-0.2, 0.0], [0.1, 0.5]])
    sub = _one_layer(w0)
    state = OptimizerState.zeros_like(sub.layers)
    cfg = TrainConfig(eta=eta, momentum=mu, weight_decay=wd)
    sgd_step(sub, ParamGrads([g0], [np.zeros(2)]), state, cfg, 1)
    sgd_step(sub, ParamGrads([g1], [np.zeros(2)]), state, cfg, 1)
    v1 = g0 + wd * w0
    w1 = w0 - eta * v1
    v2 = mu * v1 + g1 + wd * w1
    w2 = w1 - eta * v2
    assert np.allclose(sub.layers[0].weights, w2, rtol=0, atol=1e-15)
    assert np.allclose(state.velocity_w[0], v2, rtol=0, atol=1e-15)


def test_split_counts():
    dims = [4] * 38
    model = GlobalModel.build(dims, seed=0)
    assert layers_per_submodel(split_model(model, [2, 10, 19])) == [2, 8, 9, 18]
    small = GlobalModel.build([4] * 8, seed=0)
    assert layers_per_submodel(split_model(small, [2, 4, 5])) == [2, 2, 1, 2]
    assert layers_per_submodel(split_model(small, range(1, 7))) == [1] * 7
    subs = split_model(small, [2, 4, 5])
    assert [s.first_layer for s in subs] == [1, 3, 5, 6]


def test_split_errors():
    model = GlobalModel.build([4] * 6, seed=0)
    for cuts in ([], [3, 3], [4, 2], [0, 2], [2, 5], [1, 2, 3, 4, 5]):
        with pytest.raises(ModelError):
            split_model(model, cuts)


def test_init_is_seeded_and_bounded():
    a = GlobalModel.build((20, 30, 5), seed=7)
    b = GlobalModel.build((20, 30, 5), seed=7)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la.weights, lb.weights)
    assert np.abs(a.layers[0].weights).max() <= math.sqrt(6 / 20)
    assert np.abs(a.layers[1].weights).max() <= math.sqrt(6 / 35)
    assert a.layers[0].activation == RELU and a.layers[1].activation == IDENTITY


def test_checkpoint_round_trip():
    model = GlobalModel.build((5, 6, 3), seed=1, dtype=np.float64)
    blob = save_checkpoint(model.layers)
    assert blob[:4] == b"NSFM"
    back = load_checkpoint(blob, dtype=np.float64)
    for a, b in zip(model.layers, back):
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.bias, b.bias)
        assert a.activation == b.activation
    with pytest.raises(ModelError):
        load_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(ModelError):
        load_checkpoint(blob + b"\0")


def test_dataset_batches_deterministic():
    ds = gaussian_blobs(50, 8, 3, seed=4)
    a = [y.tolist() for _, y in ds.batches(16, 1, 9)]
    b = [y.tolist() for _, y in ds.batches(16, 1, 9)]
    c = [y.tolist() for _, y in ds.batches(16, 2, 9)]
    assert a == b and a != c
    assert sum(len(y) for y in a) == 50
