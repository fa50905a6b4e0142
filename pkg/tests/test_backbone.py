import pytest
import torch

from conftest import tiny_config
from semc.backbone import MoEBackbone
from semc.config import BackboneConfig
from semc.errors import ConfigError, NumericalError, ShapeError


def small(**kw):
    base = dict(input_size=64, stage_channels=(4, 8, 16, 32), blocks=(1, 1, 1, 1))
    base.update(kw)
    return BackboneConfig(**base)


@pytest.mark.parametrize("size", [224, 256, 512])
def test_default_shapes(size):
    net = MoEBackbone(BackboneConfig(input_size=size)).eval()
    with torch.no_grad():
        p = net(torch.randn(1, 1, size, size))
    assert tuple(p.F1.shape[1:]) == (64, size // 4, size // 4)
    assert tuple(p.F2.shape[1:]) == (128, size // 8, size // 8)
    assert tuple(p.F3.shape[1:]) == (256, size // 16, size // 16)
    assert len(p.D) == 3
    for d in p.D:
        assert tuple(d.shape[1:]) == (512, size // 32, size // 32)
    assert net.output_shapes()["D"] == (512, size // 32, size // 32)


def test_rgb_input_switch():
    net = MoEBackbone(small(in_channels=3))
    assert net(torch.randn(2, 3, 64, 64)).F1.shape == (2, 4, 16, 16)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_parameter_groups_partition(n):
    net = MoEBackbone(small(num_experts=n))
    experts, shared = net.expert_parameter_groups()
    assert len(experts) + 1 == n + 1
    ids = [{id(p) for p in g} for g in experts] + [{id(p) for p in shared}]
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            assert not ids[i] & ids[j]
    assert set().union(*ids) == {id(p) for p in net.parameters()}
    count = lambda ps: sum(p.numel() for p in ps)
    assert count(net.parameters()) == count(shared) + sum(count(g) for g in experts)


def test_gradient_isolation_between_experts():
    net = MoEBackbone(small())
    p = net(torch.randn(2, 1, 64, 64))
    p.D[1].square().sum().backward()
    experts, shared = net.expert_parameter_groups()
    for m in (0, 2):
        assert all(q.grad is None or torch.count_nonzero(q.grad) == 0 for q in experts[m])
    assert any(q.grad is not None and q.grad.abs().sum() > 0 for q in experts[1])
    assert any(q.grad is not None and q.grad.abs().sum() > 0 for q in shared)


def test_clone_init_gives_identical_expert_outputs():
    net = MoEBackbone(small(clone_init_experts=True)).eval()
    with torch.no_grad():
        p = net(torch.randn(2, 1, 64, 64))
    assert torch.equal(p.D[0], p.D[1]) and torch.equal(p.D[1], p.D[2])


def test_independent_init_differs():
    net = MoEBackbone(small()).eval()
    with torch.no_grad():
        p = net(torch.randn(1, 1, 64, 64))
    assert not torch.equal(p.D[0], p.D[1])


def test_shape_and_value_errors():
    net = MoEBackbone(small())
    with pytest.raises(ShapeError):
        net(torch.randn(1, 1, 96, 96))
    with pytest.raises(ShapeError):
        net(torch.randn(1, 3, 64, 64))
    x = torch.randn(1, 1, 64, 64)
    x[0, 0, 3, 3] = float("inf")
    with pytest.raises(NumericalError):
        net(x)


@pytest.mark.parametrize("kw", [
    dict(num_experts=1),
    dict(input_size=100),
    dict(stage_channels=(4, 8, 12, 24)),
    dict(stage_strides=(4, 8, 16, 16)),
])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        small(**kw).validate()


def test_forward_is_bitwise_reproducible():
    torch.manual_seed(5)
    a = MoEBackbone(small())
    torch.manual_seed(5)
    b = MoEBackbone(small())
    x = torch.randn(2, 1, 64, 64)
    pa, pb = a(x), b(x)
    for u, v in zip([pa.F1, pa.F2, pa.F3, *pa.D], [pb.F1, pb.F2, pb.F3, *pb.D]):
        assert torch.equal(u, v)


def test_full_model_parameter_groups():
    from semc.model import SEMC

    model = SEMC(tiny_config())
    experts, shared = model.expert_parameter_groups()
    assert len(experts) == 3
    total = sum(p.numel() for p in model.parameters())
    assert total == sum(p.numel() for p in shared) + sum(p.numel() for g in experts for p in g)
