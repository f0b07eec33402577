"""Invertible layers: closed forms, round trips and logdet oracles."""

import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from hcflow import numerics as nx
from hcflow.checks import layer_logdet_error, randomize_parameters
from hcflow.errors import ShapeError, SingularMatrixError
from hcflow.flow_layers import (ActNorm, AffineCoupling, ChannelReverse, FlowSequence, FlowStep,
                                HaarSqueeze, InvConv1x1, Squeeze, split)


def _rand(*shape, seed=0):
    return nx.CounterRNG(seed).uniform_tensor(shape)


class TestSqueeze:
    def test_shape(self):
        out, ld = Squeeze()(_rand(1, 3, 8, 8))
        assert out.shape == (1, 12, 4, 4)
        assert torch.count_nonzero(ld) == 0

    def test_channel_layout(self):
        x = torch.arange(16.0).reshape(1, 1, 4, 4)
        out = Squeeze()(x).output
        # channel 2i + j holds pixel (i, j) of every 2x2 block
        assert out[0, :, 0, 0].tolist() == [0.0, 1.0, 4.0, 5.0]
        assert out[0, :, 1, 1].tolist() == [10.0, 11.0, 14.0, 15.0]

    def test_round_trip_bitwise(self):
        x = _rand(2, 3, 8, 6)
        layer = Squeeze()
        assert torch.equal(layer.inverse(layer(x).output).output, x)

    def test_odd_size_rejected(self):
        with pytest.raises(ShapeError, match="height"):
            Squeeze()(torch.zeros(1, 3, 5, 4))


class TestHaar:
    def test_constant_image(self):
        out = HaarSqueeze()(torch.full((1, 3, 4, 4), 0.3)).output
        assert torch.allclose(out[:, :3], torch.full((1, 3, 2, 2), 0.6))
        assert torch.count_nonzero(out[:, 3:]) == 0

    def test_round_trip_and_volume(self):
        x = _rand(2, 3, 8, 8)
        fwd = HaarSqueeze()(x)
        assert torch.count_nonzero(fwd.logdet_delta) == 0
        assert (HaarSqueeze().inverse(fwd.output).output - x).abs().max() < 1e-6
        # orthonormal: energy preserved
        assert fwd.output.pow(2).sum().item() == pytest.approx(x.pow(2).sum().item(), rel=1e-6)


class TestActNorm:
    def test_identity_at_construction(self):
        x = _rand(1, 3, 4, 4)
        out, ld = ActNorm(3)(x)
        assert torch.equal(out, x) and torch.count_nonzero(ld) == 0

    def test_closed_form_logdet(self):
        layer = ActNorm(3)
        with torch.no_grad():
            layer.scale.fill_(2.0)
        ld = layer(_rand(1, 3, 4, 4)).logdet_delta.item()
        assert ld == pytest.approx(16 * 3 * math.log(2), rel=1e-6)
        assert ld == pytest.approx(33.271, abs=1e-3)
        assert layer_logdet_error(layer, _rand(1, 3, 4, 4)) < 1e-6

    def test_data_init_statistics(self):
        x = nx.CounterRNG(2).normal_tensor((4, 5, 6, 6), 4.0) + 7.0
        layer = ActNorm(5)
        layer.request_init()
        out = layer(x).output.double()
        flat = out.transpose(0, 1).reshape(5, -1)
        assert flat.mean(1).abs().max() < 1e-5
        assert (flat.std(1, unbiased=False) - 1).abs().max() < 1e-4

    def test_zero_scale_rejected(self):
        layer = ActNorm(2)
        with torch.no_grad():
            layer.scale[0, 1] = 0
        with pytest.raises(ShapeError, match="scale"):
            layer(torch.zeros(1, 2, 2, 2))


class TestInvConv:
    def test_identity(self):
        x = _rand(1, 4, 3, 3)
        out, ld = InvConv1x1(4)(x)
        assert torch.equal(out, x) and torch.count_nonzero(ld) == 0

    def test_scaled_identity_logdet(self):
        layer = InvConv1x1(4)
        with torch.no_grad():
            layer.weight.mul_(2.0)
        ld = layer(_rand(1, 4, 4, 4)).logdet_delta.item()
        assert ld == pytest.approx(16 * math.log(2 ** 4), rel=1e-6)
        assert ld == pytest.approx(44.361, abs=1e-3)
        assert layer_logdet_error(layer, _rand(1, 4, 2, 2)) < 1e-6

    def test_orthogonal_has_zero_logdet(self):
        q, _ = torch.linalg.qr(torch.randn(6, 6, generator=torch.Generator().manual_seed(0)))
        layer = InvConv1x1(6)
        with torch.no_grad():
            layer.weight.copy_(q)
        assert abs(layer(_rand(1, 6, 4, 4)).logdet_delta.item()) < 1e-4

    def test_singular_rejected(self):
        layer = InvConv1x1(3)
        with torch.no_grad():
            layer.weight[2] = layer.weight[0]
        with pytest.raises(SingularMatrixError):
            layer(_rand(1, 3, 2, 2))

    def test_round_trip(self):
        layer = InvConv1x1(5)
        randomize_parameters(layer, nx.CounterRNG(1), strength=1.0)
        x = _rand(2, 5, 4, 4)
        fwd = layer(x)
        back = layer.inverse(fwd.output)
        assert (back.output - x).abs().max() < 1e-5
        assert torch.allclose(fwd.logdet_delta, -back.logdet_delta)


class TestAffineCoupling:
    def test_fresh_init_is_identity(self):
        x = _rand(1, 4, 4, 4)
        out, ld = AffineCoupling(4)(x)
        assert torch.equal(out, x) and torch.count_nonzero(ld) == 0

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([(2, 0), (3, 0), (5, 2), (4, 3)]))
    def test_round_trip_random_weights(self, seed, dims):
        channels, cond = dims
        rng = nx.CounterRNG(seed)
        layer = AffineCoupling(channels, cond, hidden=8)
        randomize_parameters(layer, rng, strength=1.0)
        x = rng.uniform_tensor((2, channels, 4, 4))
        c = rng.uniform_tensor((2, cond, 4, 4)) if cond else None
        fwd = layer(x, c)
        back = layer.inverse(fwd.output, c)
        assert (back.output - x).abs().max() < 1e-4
        assert torch.allclose(fwd.logdet_delta, -back.logdet_delta)

    def test_jacobian_oracle_small(self):
        rng = nx.CounterRNG(4)
        layer = AffineCoupling(2, 0, hidden=4)
        randomize_parameters(layer, rng, strength=1.0)
        x = rng.uniform_tensor((1, 2, 2, 2))
        with torch.no_grad():
            analytic = layer(x).logdet_delta.item()
        assert abs(analytic) > 1e-3  # non-trivial case
        # layer_logdet_error returns |error| / dims
        assert layer_logdet_error(layer, x) * x.numel() / abs(analytic) < 1e-3

    def test_conditioning_is_used_and_validated(self):
        rng = nx.CounterRNG(5)
        layer = AffineCoupling(4, 2, hidden=8)
        randomize_parameters(layer, rng, strength=1.0)
        x = rng.uniform_tensor((1, 4, 4, 4))
        a = layer(x, rng.uniform_tensor((1, 2, 4, 4))).output
        b = layer(x, rng.uniform_tensor((1, 2, 4, 4))).output
        assert not torch.allclose(a, b)
        with pytest.raises(ShapeError, match="cond channels"):
            layer(x, torch.zeros(1, 3, 4, 4))
        with pytest.raises(ShapeError, match="cond spatial size"):
            layer(x, torch.zeros(1, 2, 2, 2))
        with pytest.raises(ShapeError):
            layer(x)


def test_split_rules():
    h = _rand(1, 8, 4, 4)
    lo, hi = split(h, 4)
    assert lo.shape == (1, 4, 4, 4) and hi.shape == (1, 4, 4, 4)
    assert torch.equal(torch.cat([lo, hi], 1), h)
    lo, hi = split(_rand(1, 12, 4, 4), 3)
    assert lo.shape == (1, 3, 4, 4) and hi.shape == (1, 9, 4, 4)
    with pytest.raises(ShapeError):
        split(h, 8)


def test_channel_reverse_is_involution():
    x = _rand(1, 5, 2, 2)
    r = ChannelReverse()
    assert torch.equal(r.inverse(r(x).output).output, x)


@pytest.mark.parametrize("use_1x1", [True, False])
def test_flow_sequence_round_trip_and_logdet_sum(use_1x1):
    rng = nx.CounterRNG(8)
    seq = FlowSequence(6, 3, cond_channels=2, hidden=8, use_1x1_conv=use_1x1)
    randomize_parameters(seq, rng)
    x = rng.uniform_tensor((2, 6, 4, 4))
    c = rng.uniform_tensor((2, 2, 4, 4))
    fwd = seq(x, c)
    back = seq.inverse(fwd.output, c)
    assert (back.output - x).abs().max() < 1e-4
    assert torch.allclose(fwd.logdet_delta + back.logdet_delta, torch.zeros(2), atol=1e-4)
    total = sum(step(h, c).logdet_delta for step, h in _step_inputs(seq, x, c))
    assert torch.allclose(total, fwd.logdet_delta, atol=1e-5)


def _step_inputs(seq, x, c):
    h = x
    for step in seq.steps:
        yield step, h
        h = step(h, c).output


def test_flow_step_jacobian_oracle():
    rng = nx.CounterRNG(9)
    step = FlowStep(4, 0, hidden=4)
    randomize_parameters(step, rng, strength=1.0)
    assert layer_logdet_error(step, rng.uniform_tensor((1, 4, 2, 2))) < 1e-5
