import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from oracles import finite_difference_check
from semc.backbone import FeaturePyramid
from semc.config import SSFMConfig
from semc.errors import ConfigError, ShapeError
from semc.ssfm import (ACE, SAMC, SSFM, ChannelAttention, SpatialAttention, ace_stages,
                       channel_shuffle, fuse_add, shallow_level)


def shuffle_oracle(c, g):
    """Output position j*g + k holds input channel k*(c/g) + j."""
    order = [0] * c
    for k in range(g):
        for j in range(c // g):
            order[j * g + k] = k * (c // g) + j
    return order


# --- ACE --------------------------------------------------------------------

def test_ace_f1_chain():
    ace = ACE(64, 3, 512)
    assert ace.stage_channels == [64, 128, 256, 512]
    assert ace(torch.randn(1, 64, 128, 128)).shape == (1, 512, 16, 16)


def test_ace_f3_single_stage():
    assert ACE(256, 1, 512)(torch.randn(1, 256, 32, 32)).shape == (1, 512, 16, 16)


def test_ace_zero_stages_keeps_spatial_size():
    ace = ACE(8, 0, 16)
    assert len(ace.stages) == 0
    assert ace(torch.randn(2, 8, 5, 5)).shape == (2, 16, 5, 5)


def test_ace_indivisible_size():
    with pytest.raises(ShapeError):
        ACE(4, 2, 8)(torch.randn(1, 4, 6, 6))


def test_ace_double_norm_switch():
    with_bn = sum(isinstance(m, nn.BatchNorm2d) for m in ACE(4, 2, 16, True).modules())
    without = sum(isinstance(m, nn.BatchNorm2d) for m in ACE(4, 2, 16, False).modules())
    assert with_bn - without == 2


def test_ace_stage_count():
    assert [ace_stages(s) for s in (4, 8, 16, 32)] == [3, 2, 1, 0]
    with pytest.raises(ShapeError):
        ace_stages(12)


# --- fusion -------------------------------------------------------------------

def test_fuse_add_identities_and_oracle():
    d = torch.randn(2, 4, 4, dtype=torch.float64)
    assert torch.equal(fuse_add(torch.zeros_like(d), d), d)
    assert torch.equal(fuse_add(d, d), 2 * d)
    a = torch.randn(2, 4, 4, dtype=torch.float64)
    out = fuse_add(a, d)
    for idx in torch.cartesian_prod(torch.arange(2), torch.arange(4), torch.arange(4)):
        i, j, k = idx.tolist()
        assert out[i, j, k].item() == a[i, j, k].item() + d[i, j, k].item()
    with pytest.raises(ShapeError):
        fuse_add(torch.zeros(1, 2, 2), torch.zeros(1, 2, 3))


# --- attention ---------------------------------------------------------------

def test_channel_attention_zero_input_is_half():
    ca = ChannelAttention(8, 4)
    nn.init.zeros_(ca.fc1.bias)
    nn.init.zeros_(ca.fc2.bias)
    assert torch.equal(ca(torch.zeros(2, 8, 3, 3)), torch.full((2, 8), 0.5))


def test_channel_attention_constant_per_channel():
    ca = ChannelAttention(4, 2)
    v = torch.tensor([0.5, -1.0, 2.0, 0.0])
    x = v.view(1, 4, 1, 1).expand(1, 4, 3, 3)
    fc1, fc2 = ca.fc1, ca.fc2
    hidden = torch.relu(fc1.weight @ v + fc1.bias)
    pre = 2 * (fc2.weight @ hidden + fc2.bias)
    assert torch.allclose(ca(x)[0], torch.sigmoid(pre), atol=1e-6)


def test_channel_attention_open_interval():
    ca = ChannelAttention(8, 2)
    w = ca(torch.randn(3, 8, 4, 4))
    assert ((w > 0) & (w < 1)).all()


def test_spatial_attention_zero_input_is_half():
    sa = SpatialAttention(7)
    nn.init.zeros_(sa.conv.bias)
    assert torch.equal(sa(torch.zeros(1, 5, 4, 4)), torch.full((1, 1, 4, 4), 0.5))
    assert sa(torch.randn(2, 3, 6, 5)).shape == (2, 1, 6, 5)


def test_spatial_attention_manual_1x1():
    sa = SpatialAttention(1)
    with torch.no_grad():
        sa.conv.weight.copy_(torch.tensor([1.0, 0.0]).view(1, 2, 1, 1))
        sa.conv.bias.zero_()
    x = torch.arange(9.0).view(1, 1, 3, 3) / 9
    expected = torch.tensor([[1 / (1 + torch.exp(torch.tensor(-v / 9))).item() for v in range(r * 3, r * 3 + 3)]
                             for r in range(3)])
    assert torch.allclose(sa(x)[0, 0], expected, atol=1e-6)


# --- channel shuffle --------------------------------------------------------------

def test_shuffle_six_two():
    x = torch.arange(6.0).view(1, 6, 1, 1)
    assert channel_shuffle(x, 2).flatten().tolist() == [0, 3, 1, 4, 2, 5]


@pytest.mark.parametrize("c", [4, 6, 8, 16])
@pytest.mark.parametrize("g", [1, 2, 4])
def test_shuffle_closed_form(c, g):
    if c % g:
        with pytest.raises(ShapeError):
            channel_shuffle(torch.zeros(1, c, 1, 1), g)
        return
    x = torch.arange(float(c)).view(1, c, 1, 1)
    assert channel_shuffle(x, g).flatten().long().tolist() == shuffle_oracle(c, g)


def test_shuffle_inverse():
    x = torch.randn(2, 12, 3, 3)
    assert torch.equal(channel_shuffle(channel_shuffle(x, 3), 4), x)
    assert torch.equal(channel_shuffle(x, 1), x)


@settings(max_examples=30, deadline=None)
@given(g=st.sampled_from([1, 2, 3, 4]), per=st.integers(1, 5), seed=st.integers(0, 1000))
def test_shuffle_linear(g, per, seed):
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(1, g * per, 2, 2, generator=gen)
    b = torch.randn(1, g * per, 2, 2, generator=gen)
    assert torch.allclose(channel_shuffle(a + b, g), channel_shuffle(a, g) + channel_shuffle(b, g))


# --- SAMC / SSFM ---------------------------------------------------------------

def test_samc_shapes_full_width():
    samc = SAMC(512, SSFMConfig())
    out, c, s, enhanced = samc(torch.randn(1, 512, 16, 16))
    assert out.shape == (1, 512, 16, 16)
    assert c.shape == (1, 512) and s.shape == (1, 1, 16, 16)
    assert sum(conv.out_channels for conv in samc.scales) == 2048


def test_samc_unit_attention_hook():
    samc = SAMC(8, SSFMConfig(reduction=4))
    samc.force_unit_attention = True
    m = torch.randn(2, 8, 4, 4)
    assert torch.equal(samc(m)[3], m)


def test_samc_enhanced_bounded_by_input():
    samc = SAMC(8, SSFMConfig(reduction=2))
    m = torch.randn(3, 8, 5, 5) * 4
    _, c, s, enhanced = samc(m)
    assert (enhanced.abs() <= m.abs()).all()
    assert ((c > 0) & (c < 1)).all() and ((s > 0) & (s < 1)).all()


def test_samc_config_errors():
    with pytest.raises(ConfigError):
        SAMC(6, SSFMConfig(reduction=4))
    with pytest.raises(ConfigError):
        SAMC(8, SSFMConfig(reduction=2, scale_kernels=(1, 3, 5), shuffle_groups=5))


def test_samc_input_gradient_finite_difference():
    torch.manual_seed(1)
    samc = SAMC(8, SSFMConfig(reduction=4)).double()
    m = torch.randn(1, 8, 4, 4, dtype=torch.float64, requires_grad=True)
    ok, total, worst = finite_difference_check(lambda: samc(m)[0].sum(), [m])
    assert ok == total, worst


def test_shallow_level_cycles():
    assert [shallow_level(i) for i in range(5)] == [0, 1, 2, 0, 1]


def _pyramid(b=2, chans=(4, 8, 16, 32), size=64, n=3):
    return FeaturePyramid(
        torch.randn(b, chans[0], size // 4, size // 4),
        torch.randn(b, chans[1], size // 8, size // 8),
        torch.randn(b, chans[2], size // 16, size // 16),
        [torch.randn(b, chans[3], size // 32, size // 32) for _ in range(n)],
    )


@pytest.mark.parametrize("ace_on,samc_on", [(True, True), (True, False), (False, True), (False, False)])
def test_ssfm_shapes_and_ablation(ace_on, samc_on):
    ssfm = SSFM((4, 8, 16, 32), (4, 8, 16, 32), 3, SSFMConfig(reduction=4), ace_on, samc_on)
    p = _pyramid()
    out = ssfm(p)
    for i in range(3):
        assert out.M[i].shape == p.D[i].shape == out.O[i].shape
    if not ace_on:
        assert all(torch.equal(m, d) for m, d in zip(out.M, p.D))
    if not samc_on:
        assert all(o is m for o, m in zip(out.O, out.M))
        assert out.C_attn == []
    else:
        assert len(out.S_attn) == 3


def test_ssfm_branches_use_levels_and_independent_params():
    ssfm = SSFM((4, 8, 16, 32), (4, 8, 16, 32), 4, SSFMConfig(reduction=4))
    assert [b.ace.num_stages for b in ssfm.branches] == [3, 2, 1, 3]
    ids = [{id(p) for p in b.parameters()} for b in ssfm.branches]
    assert not ids[0] & ids[3]

