"""The assembled bijection: shapes, conditioning paths and round trips."""

import pytest
import torch

from hcflow import numerics as nx
from hcflow.checks import model_logdet_error, randomize_parameters
from hcflow.errors import ConfigError, ShapeError
from hcflow.flow_layers import HaarSqueeze, Squeeze
from hcflow.model import HCFlow, HCFlowConfig, level_channels
from hcflow.runner.selftest import invertibility_configs, tiny_config


def _model(seed=0, **kw):
    m = HCFlow(HCFlowConfig(**kw), seed=seed)
    randomize_parameters(m, nx.CounterRNG(seed))
    return m


def test_two_level_shapes_and_dimension_count():
    m = HCFlow(HCFlowConfig(levels=2))
    d = m.forward_decompose(torch.rand(1, 3, 32, 32))
    assert d.y.shape == (1, 3, 8, 8)
    assert [tuple(z.shape) for z in d.z] == [(1, 6, 16, 16), (1, 21, 8, 8)]
    assert d.y.numel() + sum(z.numel() for z in d.z) == 3 * 32 * 32


@pytest.mark.parametrize("levels", [1, 2, 3])
def test_bijectivity_dimension_count(levels):
    m = HCFlow(HCFlowConfig(levels=levels, flow_steps=1, cond_flow_steps=1))
    x = torch.rand(2, 3, 32, 32)
    d = m.forward_decompose(x)
    assert d.y.shape == (2, 3, 32 >> levels, 32 >> levels)
    assert d.y.numel() + sum(z.numel() for z in d.z) == x.numel()
    assert [tuple(z.shape) for z in d.z] == m.latent_shapes(d.y.shape)


def test_level_channels_follow_split_rules():
    assert level_channels(HCFlowConfig(levels=3)) == [(12, 6, 6), (24, 12, 12), (48, 3, 45)]
    assert level_channels(HCFlowConfig(levels=1)) == [(12, 3, 9)]


def test_identity_model_is_squeeze_permutation():
    cfg = HCFlowConfig(levels=2, conv_init="identity")
    m = HCFlow(cfg)
    x = torch.rand(1, 3, 16, 16)
    d = m.forward_decompose(x)
    assert torch.count_nonzero(d.logdet) == 0
    h = Squeeze()(x).output
    y1, a1 = h[:, :6], h[:, 6:]
    h2 = Squeeze()(y1).output
    assert torch.equal(d.z[0], a1)
    assert torch.equal(d.y, h2[:, :3]) and torch.equal(d.z[1], h2[:, 3:])


def test_identity_haar_model_low_band():
    m = HCFlow(HCFlowConfig.rescaling(levels=1))
    x = torch.rand(1, 3, 8, 8)
    d = m.forward_decompose(x)
    assert torch.allclose(d.y, HaarSqueeze()(x).output[:, :3])


@pytest.mark.parametrize("cfg", list(invertibility_configs()), ids=lambda c: f"L{c.levels}-{c.squeeze}-{c.conditioning}")
def test_round_trip_all_configs(cfg):
    m = HCFlow(cfg, seed=1)
    rng = nx.CounterRNG(7)
    randomize_parameters(m, rng)
    x = rng.uniform_tensor((2, 3, 16, 16))
    with torch.no_grad():
        d = m.forward_decompose(x)
        assert (m.inverse_generate(d.y, d.z) - x).abs().max() < 1e-4


def test_inverse_output_size_and_determinism():
    m = _model(levels=2)
    y = torch.rand(1, 3, 5, 7)
    z = [torch.zeros(s) for s in m.latent_shapes(y.shape)]
    with torch.no_grad():
        a, b = m.inverse_generate(y, z), m.inverse_generate(y, z)
    assert a.shape == (1, 3, 20, 28)
    assert torch.equal(a, b)


def test_inverse_names_bad_level():
    m = _model(levels=2)
    y = torch.rand(1, 3, 4, 4)
    z = [torch.zeros(s) for s in m.latent_shapes(y.shape)]
    z[1] = torch.zeros(1, 20, 4, 4)
    with pytest.raises(ShapeError, match="z_2 shape"):
        m.inverse_generate(y, z)


def test_indivisible_input_rejected():
    with pytest.raises(ShapeError, match="divisible by 4"):
        _model(levels=2).forward_decompose(torch.rand(1, 3, 18, 16))


def test_config_validation():
    with pytest.raises(ConfigError):
        HCFlowConfig(levels=0)
    with pytest.raises(ConfigError):
        HCFlowConfig(conditioning="sideways")
    with pytest.raises(ConfigError):
        HCFlowConfig(lr_sigma=0.0)
    assert HCFlowConfig(levels=3).scale_factor == 8


def test_hierarchical_features_use_coarser_level():
    m = _model(levels=2)
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        d = m.forward_decompose(x)
        ys = [t.clone() for t in d.y_levels]
        base = m.conditional_features(ys)
        ys2 = [ys[0], ys[1] + 0.5]
        moved = m.conditional_features(ys2)
    # c_1 depends on y_2 through upsampled c_2
    assert not torch.allclose(base[0], moved[0])
    # explicit composition: c_1 = phi_1([up(phi_2(y_2)), y_1])
    with torch.no_grad():
        c2 = m.extractors[1](ys[1])
        c1 = m.extractors[0](torch.cat([nx.nearest_upsample_x2(c2), ys[0]], 1))
    assert torch.allclose(base[1], c2) and torch.allclose(base[0], c1)


def test_same_level_features_ignore_coarser_level():
    m = _model(levels=2, conditioning="same_level")
    ys = [torch.rand(1, 6, 8, 8), torch.rand(1, 3, 4, 4)]
    with torch.no_grad():
        a = m.conditional_features(ys)
        b = m.conditional_features([ys[0], ys[1] + 1.0])
    assert torch.equal(a[0], b[0])
    assert m.extractors[0].in_channels == 6


def test_none_mode_conditional_flows_ignore_y():
    m = _model(levels=2, conditioning="none")
    y = torch.rand(1, 3, 4, 4)
    z = [nx.CounterRNG(1).normal_tensor(s) for s in m.latent_shapes(y.shape)]
    with torch.no_grad():
        a = [m.cond_flows[i].inverse(z[i]).output for i in range(2)]
    assert len(m.extractors) == 0
    for i in range(2):
        assert torch.equal(a[i], m.cond_flows[i].inverse(z[i], None).output)


def test_zeroed_conditioners_decouple_z_from_y():
    m = _model(levels=2)
    for phi in m.extractors:
        with torch.no_grad():
            phi.conv_out.weight.zero_()
            phi.conv_out.bias.zero_()
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        d = m.forward_decompose(x)
        ys = [t + 0.3 for t in d.y_levels]
        feats = m.conditional_features(ys)
        a1 = m.cond_flows[0].inverse(d.z[0], feats[0]).output
        a1_ref = m.cond_flows[0].inverse(d.z[0], torch.zeros_like(feats[0])).output
    assert torch.equal(a1, a1_ref)


def test_tiny_model_jacobian_oracle():
    m = HCFlow(tiny_config(), seed=1)
    rng = nx.CounterRNG(3)
    randomize_parameters(m, rng)
    assert model_logdet_error(m, rng.uniform_tensor((1, 3, 4, 4))) < 1e-3


def test_data_init_normalises_first_actnorm():
    m = HCFlow(HCFlowConfig(levels=2))
    x = torch.rand(8, 3, 16, 16) * 0.3 + 0.2
    m.data_init(x)
    first = m.levels[0].steps[0].actnorm
    with torch.no_grad():
        h = first(Squeeze()(x).output).output.double()
    flat = h.transpose(0, 1).reshape(12, -1)
    assert flat.mean(1).abs().max() < 1e-5
    assert (flat.std(1, unbiased=False) - 1).abs().max() < 1e-4


def test_seeded_construction_is_deterministic():
    a, b = HCFlow(HCFlowConfig(), seed=3), HCFlow(HCFlowConfig(), seed=3)
    c = HCFlow(HCFlowConfig(), seed=4)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))
