"""Residual encoder with shared stages 1-3 and N independent stage-4 experts."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import BackboneConfig
from .errors import NumericalError, ShapeError


@dataclass
class FeaturePyramid:
    F1: torch.Tensor
    F2: torch.Tensor
    F3: torch.Tensor
    D: list[torch.Tensor]

    @property
    def shallow(self) -> list[torch.Tensor]:
        return [self.F1, self.F2, self.F3]


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU()
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


def make_stage(in_ch, out_ch, blocks, stride):
    layers = [BasicBlock(in_ch, out_ch, stride)]
    layers += [BasicBlock(out_ch, out_ch) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


def init_weights(module: nn.Module) -> None:
    """He fan-out init for convolutions, unit gain / zero shift for norms."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class MoEBackbone(nn.Module):
    """Shared stem + layer1..layer3, then ``num_experts`` parallel layer4 copies."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.stage_channels
        b1, b2, b3, b4 = cfg.blocks
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c1, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.layer1 = make_stage(c1, c1, b1, 1)
        self.layer2 = make_stage(c1, c2, b2, 2)
        self.layer3 = make_stage(c2, c3, b3, 2)
        self.experts = nn.ModuleList(make_stage(c3, c4, b4, 2) for _ in range(cfg.num_experts))
        init_weights(self)
        if cfg.clone_init_experts:
            self.clone_experts()

    def clone_experts(self) -> None:
        state = copy.deepcopy(self.experts[0].state_dict())
        for expert in self.experts[1:]:
            expert.load_state_dict(state)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected input (B, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise NumericalError("backbone input contains non-finite values")
        f1 = self.layer1(self.stem(x))
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        return FeaturePyramid(f1, f2, f3, [expert(f3) for expert in self.experts])

    def expert_parameter_groups(self) -> tuple[list[list[nn.Parameter]], list[nn.Parameter]]:
        """Return (per-expert parameter lists, shared parameter list)."""
        experts = [list(e.parameters()) for e in self.experts]
        expert_ids = {id(p) for group in experts for p in group}
        shared = [p for p in self.parameters() if id(p) not in expert_ids]
        return experts, shared

    def output_shapes(self) -> dict[str, tuple[int, int, int]]:
        s = self.cfg.input_size
        chans = self.cfg.stage_channels
        shapes = {f"F{k + 1}": (chans[k], s // st, s // st) for k, st in enumerate(self.cfg.stage_strides[:3])}
        shapes["D"] = (chans[3], s // 32, s // 32)
        return shapes
