"""Tensor ops, gradients, Adam and the seeded generator."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hcflow import numerics as nx
from hcflow.errors import NonFiniteError, ShapeError


def test_conv_1x1_identity_kernel_returns_input():
    x = torch.randn(2, 3, 5, 5)
    w = torch.eye(3).reshape(3, 3, 1, 1)
    assert torch.equal(nx.conv2d(x, w, torch.zeros(3)), x)


def test_conv_all_ones_kernel_interior_sum():
    c, in_ch = 0.7, 4
    x = torch.full((1, in_ch, 6, 6), c)
    w = torch.ones(2, in_ch, 3, 3)
    out = nx.conv2d(x, w)
    # hand-evaluated: 9 taps x in_ch channels of value c
    assert torch.allclose(out[:, :, 1:-1, 1:-1], torch.full_like(out[:, :, 1:-1, 1:-1], 9 * c * in_ch))
    # corner sees 4 of the 9 taps (zero padding)
    assert out[0, 0, 0, 0].item() == pytest.approx(4 * c * in_ch, rel=1e-6)


def test_conv_zero_weights_annihilate():
    x = torch.randn(1, 3, 4, 4)
    assert torch.count_nonzero(nx.conv2d(x, torch.zeros(5, 3, 3, 3), torch.zeros(5))) == 0


def test_conv_rejects_bad_shapes():
    x = torch.randn(1, 3, 4, 4)
    with pytest.raises(ShapeError, match="channels"):
        nx.conv2d(x, torch.zeros(2, 4, 3, 3))
    with pytest.raises(ShapeError, match="kernel size"):
        nx.conv2d(x, torch.zeros(2, 3, 2, 2))
    with pytest.raises(ShapeError, match="padding"):
        nx.conv2d(x, torch.zeros(2, 3, 3, 3), padding=0)
    with pytest.raises(ShapeError, match="rank"):
        nx.conv2d(torch.zeros(3, 4, 4), torch.zeros(2, 3, 3, 3))


def test_shape_error_is_value_error_with_fields():
    err = ShapeError("op", "channels", 3, 4)
    assert isinstance(err, ValueError)
    assert str(err) == "op: bad channels: expected 3, got 4"


def test_nearest_upsample():
    t = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    want = torch.tensor([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=torch.float32)
    assert torch.equal(nx.nearest_upsample_x2(t)[0, 0], want)


def test_concat_and_split():
    a, b = torch.randn(1, 2, 4, 4), torch.randn(1, 3, 4, 4)
    cat = nx.channel_concat(a, b)
    assert cat.shape == (1, 5, 4, 4)
    lo, hi = nx.channel_split(cat, 2)
    assert torch.equal(lo, a) and torch.equal(hi, b)
    with pytest.raises(ShapeError, match="height"):
        nx.channel_concat(a, torch.randn(1, 3, 5, 4))
    with pytest.raises(ShapeError):
        nx.channel_split(cat, 5)


def test_elementwise_shape_checks():
    with pytest.raises(ShapeError, match="width"):
        nx.add(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))
    with pytest.raises(ShapeError):
        nx.mul(torch.zeros(1, 1, 2, 2), torch.zeros(2, 1, 2, 2))


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_exp_log_inverse(v):
    t = torch.full((1, 1, 2, 2), v, dtype=torch.float64)
    assert torch.allclose(nx.exp(nx.log(t)), t, rtol=1e-6)


def test_backward_linear_and_quadratic():
    t = torch.nn.Parameter(torch.randn(1, 2, 3, 3))
    nx.backward(t.sum(), [t])
    assert torch.equal(t.grad, torch.ones_like(t))
    nx.backward((t * t).sum(), [t])
    assert torch.allclose(t.grad, 2 * t.detach())


def test_backward_unused_parameter_gets_zero_gradient():
    a = torch.nn.Parameter(torch.ones(3))
    b = torch.nn.Parameter(torch.ones(2))
    nx.backward((a * 2).sum(), [a, b])
    assert torch.equal(b.grad, torch.zeros(2))


def test_toy_network_gradient_matches_finite_differences():
    # 6 parameters: a 2 -> 2 linear layer with tanh, then a weighted sum
    rng = np.random.default_rng(3)
    theta0 = rng.normal(size=6)
    x = torch.tensor(rng.normal(size=(5, 2)))

    def f(theta):
        w = theta[:4].reshape(2, 2)
        h = torch.tanh(x @ w)
        return (h @ theta[4:6]).pow(2).mean()

    theta = torch.tensor(theta0, requires_grad=True)
    (g,) = torch.autograd.grad(f(theta), theta)
    h = 1e-3
    for i in range(6):
        e = torch.zeros(6, dtype=torch.float64)
        e[i] = h
        fd = (f(torch.tensor(theta0) + e) - f(torch.tensor(theta0) - e)).item() / (2 * h)
        assert abs(g[i].item() - fd) / max(abs(fd), 1e-12) < 1e-3


def test_adam_zero_gradient_is_fixed_point():
    p = torch.nn.Parameter(torch.randn(3, 3))
    before = p.detach().clone()
    opt = nx.Adam([("p", p)])
    p.grad = torch.zeros_like(p)
    for _ in range(3):
        opt.step(1e-2)
    assert torch.equal(p.detach(), before)


@pytest.mark.parametrize("g", [0.1, -3.0, 1e-4])
def test_adam_first_step_moves_by_learning_rate(g):
    # bias correction: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    p = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
    opt = nx.Adam([("p", p)])
    p.grad = torch.full_like(p, g)
    opt.step(1e-3)
    assert p.item() == pytest.approx(-1e-3 * math.copysign(1, g), rel=1e-3)


def test_adam_rejects_nonfinite_gradient_by_name():
    p = torch.nn.Parameter(torch.zeros(2))
    opt = nx.Adam([("layer.weight", p)])
    p.grad = torch.tensor([0.0, float("nan")])
    with pytest.raises(NonFiniteError, match="layer.weight"):
        opt.step(1e-3)


def test_adam_state_round_trip():
    p = torch.nn.Parameter(torch.randn(4))
    opt = nx.Adam([("p", p)])
    p.grad = torch.randn(4)
    opt.step(1e-3)
    q = torch.nn.Parameter(p.detach().clone())
    opt2 = nx.Adam([("p", q)])
    opt2.load_state_tensors(opt.state_tensors())
    g = torch.randn(4)
    p.grad, q.grad = g.clone(), g.clone()
    opt.step(1e-3)
    opt2.step(1e-3)
    assert torch.equal(p, q)


def test_adam_identical_runs_are_bitwise_identical():
    def run():
        torch.manual_seed(0)
        w = torch.nn.Parameter(torch.randn(3, 3))
        opt = nx.Adam([("w", w)])
        rng = nx.CounterRNG(11)
        for _ in range(20):
            x = rng.normal_tensor((3,))
            nx.backward((w @ x).pow(2).sum(), [w])
            opt.step(1e-2)
        return w.detach()

    assert torch.equal(run(), run())


def test_rng_is_deterministic_and_spawns_independent_streams():
    a, b = nx.CounterRNG(5), nx.CounterRNG(5)
    assert np.array_equal(a.normal((100,)), b.normal((100,)))
    assert not np.array_equal(nx.CounterRNG(5).spawn(1).uniform((10,)),
                              nx.CounterRNG(5).spawn(2).uniform((10,)))
    assert np.array_equal(nx.CounterRNG(5).spawn(1).uniform((10,)),
                          nx.CounterRNG(5).spawn(1).uniform((10,)))


def test_rng_normal_statistics():
    z = nx.CounterRNG(0).normal((200_000,), 2.0)
    assert abs(z.mean()) < 0.02
    assert z.std() == pytest.approx(2.0, rel=0.01)


def test_rng_uniform_range():
    u = nx.CounterRNG(1).uniform((10_000,), 0.0, 1.0 / 256)
    assert u.min() >= 0 and u.max() < 1.0 / 256
