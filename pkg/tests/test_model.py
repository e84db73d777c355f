import numpy as np
import pytest
from scipy.stats import norm

from s2d.model import (
    Attention,
    Linear,
    ToyModel,
    backward,
    forward,
    gelu,
    init_model,
    mse_loss,
    xent_loss,
)
from s2d.quant import QuantContext, QuantScheme


def test_identity_forward():
    x = np.random.default_rng(0).normal(size=(5, 3))
    model = ToyModel([Linear("fc1", np.eye(3), np.zeros(3), "none")])
    np.testing.assert_array_equal(forward(model, x)[0], x)


def test_gelu_matches_gaussian_cdf():
    z = np.linspace(-6, 6, 101)
    np.testing.assert_allclose(gelu(z), z * norm.cdf(z), atol=1e-15)
    model = ToyModel([Linear("fc1", np.ones((2, 2)), np.zeros(2), "gelu")])
    np.testing.assert_array_equal(forward(model, np.zeros((1, 2)))[0], 0.0)


def test_two_layer_unrolled():
    rng = np.random.default_rng(1)
    w1, b1 = rng.normal(size=(4, 3)), rng.normal(size=4)
    w2, b2 = rng.normal(size=(2, 4)), rng.normal(size=2)
    x = rng.normal(size=(6, 3))
    model = ToyModel([Linear("fc1", w1, b1, "gelu"), Linear("fc2", w2, b2, "none")])
    out = forward(model, x)[0]
    for j in range(6):
        h = [x[j] @ w1[i] + b1[i] for i in range(4)]
        h = [v * norm.cdf(v) for v in h]
        y = [sum(w2[o, i] * h[i] for i in range(4)) + b2[o] for o in range(2)]
        np.testing.assert_allclose(out[j], y, atol=1e-12)


def test_shape_errors():
    model = ToyModel([Linear("fc1", np.eye(3), np.zeros(3), "none")])
    with pytest.raises(ValueError):
        forward(model, np.ones((2, 4)))
    with pytest.raises(ValueError):
        ToyModel([Linear("fc1", np.eye(3), np.zeros(3)), Linear("fc2", np.eye(2), np.zeros(2))])
    with pytest.raises(ValueError):
        Linear("fc1", np.eye(3), np.zeros(2))
    with pytest.raises(ValueError):
        backward(model, None, np.ones((2, 3)))


def test_linear_mse_closed_form():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 5))
    x, y = rng.normal(size=(7, 5)), rng.normal(size=(7, 3))
    model = ToyModel([Linear("fc1", w, np.zeros(3), "none")])
    pred, cache = forward(model, x)
    _, dloss = mse_loss(pred, y)
    g = backward(model, cache, dloss)
    # samples as rows: X is x.T, Y is y.T
    oracle = 2 / 7 * (w @ x.T - y.T) @ x
    np.testing.assert_allclose(g["fc1.weight"], oracle, atol=1e-10)


def test_zero_loss_gradient():
    rng = np.random.default_rng(3)
    model = init_model([6, 5, 4], rng, attention_tokens=2)
    _, cache = forward(model, rng.normal(size=(3, 6)))
    grads = backward(model, cache, np.zeros((3, 4)))
    assert all(not g.any() for g in grads.values())


def _fd_check(model, x, target, loss_fn, h=1e-6):
    pred, cache = forward(model, x)
    _, dloss = loss_fn(pred, target)
    grads = backward(model, cache, dloss)
    for name, p in model.params().items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = loss_fn(forward(model, x)[0], target)[0]
            p[idx] = old - h
            lm = loss_fn(forward(model, x)[0], target)[0]
            p[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        err = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(num), 1e-12)
        assert err <= 1e-4, (name, err)


@pytest.mark.parametrize("tokens", [None, 2])
def test_finite_differences_mse(tokens):
    rng = np.random.default_rng(4)
    model = init_model([6, 5, 4, 3], rng, attention_tokens=tokens)
    for layer in model.layers:
        layer.bias[:] = rng.normal(size=layer.bias.shape)
    _fd_check(model, rng.normal(size=(4, 6)), rng.normal(size=(4, 3)), mse_loss)


def test_finite_differences_xent():
    rng = np.random.default_rng(5)
    model = init_model([6, 5, 4, 3], rng, attention_tokens=3)
    _fd_check(model, rng.normal(size=(4, 6)), rng.integers(0, 3, size=4), xent_loss)


def test_input_gradient_through_attention():
    rng = np.random.default_rng(6)
    model = init_model([4, 3, 2], rng, attention_tokens=2)
    x = rng.normal(size=(2, 4))
    pred, cache = forward(model, x)
    g = backward(model, cache, np.ones_like(pred))["input"]
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = 1e-6
        num[idx] = (forward(model, x + e)[0].sum() - forward(model, x - e)[0].sum()) / 2e-6
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-8)


def test_passthrough_quant_matches_plain():
    rng = np.random.default_rng(7)
    model = init_model([6, 5, 3], rng, attention_tokens=3)
    x = rng.normal(size=(4, 6))
    ctx = QuantContext(QuantScheme.for_weights(64), QuantScheme.for_activations(64))
    a, ca = forward(model, x)
    b, cb = forward(model, x, ctx)
    np.testing.assert_array_equal(a, b)
    ga, gb = backward(model, ca, np.ones_like(a)), backward(model, cb, np.ones_like(b))
    for k in ga:
        np.testing.assert_array_equal(ga[k], gb[k])


def test_quant_sites_and_names():
    model = init_model([4, 3, 2], np.random.default_rng(8), attention_tokens=2)
    assert list(model.weight_matrices()) == ["attn.q", "attn.k", "attn.v", "attn.o", "fc1", "fc2"]
    assert model.quant_sites() == ["attn.input", "attn.o.input", "fc1.input", "fc2.input", "output"]
    assert isinstance(model.attention, Attention) and model.attention.dim == 2


def test_xent_loss_value():
    logits = np.array([[0.0, 0.0], [2.0, 0.0]])
    loss, grad = xent_loss(logits, [1, 0])
    expected = (np.log(2) + np.log(1 + np.exp(-2))) / 2
    assert loss == pytest.approx(expected)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)
