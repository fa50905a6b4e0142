"""Semantic-structure fusion: ACE alignment, additive fusion and SAMC refinement."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FeaturePyramid, init_weights
from .config import SSFMConfig
from .errors import ShapeError


@dataclass
class FusedFeatureSet:
    M: list[torch.Tensor]
    O: list[torch.Tensor]
    C_attn: list[torch.Tensor] = field(default_factory=list)
    S_attn: list[torch.Tensor] = field(default_factory=list)


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    """Output channel ``j*g + k`` takes input channel ``k*(C/g) + j``."""
    b, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise ShapeError(f"{c} channels cannot be shuffled into {groups} groups")
    return x.reshape(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


def fuse_add(aligned: torch.Tensor, deep: torch.Tensor) -> torch.Tensor:
    if aligned.shape != deep.shape:
        raise ShapeError(f"cannot fuse {tuple(aligned.shape)} with {tuple(deep.shape)}")
    return aligned + deep


class ACE(nn.Module):
    """Adaptive compression-expansion: ``num_stages`` x (stride-2 depthwise, BN, ReLU,
    1x1 doubling channels, BN), then 1x1 + BN + ReLU to ``out_channels``."""

    def __init__(self, in_channels, num_stages, out_channels, double_norm=True):
        super().__init__()
        self.num_stages = num_stages
        stages = []
        c = in_channels
        for _ in range(num_stages):
            layers = [
                nn.Conv2d(c, c, 3, stride=2, padding=1, groups=c, bias=False),
                nn.BatchNorm2d(c),
                nn.ReLU(),
                nn.Conv2d(c, 2 * c, 1, bias=False),
            ]
            if double_norm:
                layers.append(nn.BatchNorm2d(2 * c))
            stages.append(nn.Sequential(*layers))
            c *= 2
        self.stages = nn.Sequential(*stages)
        self.project = nn.Sequential(
            nn.Conv2d(c, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(),
        )
        self.stage_channels = [in_channels * 2 ** i for i in range(num_stages + 1)]

    def forward(self, x):
        factor = 2 ** self.num_stages
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ShapeError(f"spatial size {tuple(x.shape[-2:])} not divisible by 2^{self.num_stages}")
        return self.project(self.stages(x))


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def mlp(self, v):
        return self.fc2(F.relu(self.fc1(v)))

    def forward(self, x):
        """Per-channel weights in (0, 1), shape (B, C)."""
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=(kernel_size - 1) // 2)

    def forward(self, x):
        """Spatial map in (0, 1), shape (B, 1, H, W)."""
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class SAMC(nn.Module):
    """Channel then spatial attention, K parallel same-width convolutions,
    concat, channel shuffle, 1x1 compression back to C channels."""

    def __init__(self, channels, cfg: SSFMConfig):
        super().__init__()
        cfg.validate(channels)
        self.channel_attn = ChannelAttention(channels, cfg.reduction)
        self.spatial_attn = SpatialAttention(cfg.spatial_kernel)
        self.scales = nn.ModuleList(nn.Conv2d(channels, channels, k, padding=k // 2) for k in cfg.scale_kernels)
        self.compress = nn.Conv2d(channels * len(cfg.scale_kernels), channels, 1)
        self.groups = cfg.groups
        # test hook: replace both attention maps by ones
        self.force_unit_attention = False

    def forward(self, m):
        if self.force_unit_attention:
            c = torch.ones(m.shape[:2], dtype=m.dtype, device=m.device)
            s = torch.ones((m.shape[0], 1, *m.shape[2:]), dtype=m.dtype, device=m.device)
        else:
            c = self.channel_attn(m)
            s = self.spatial_attn(c[:, :, None, None] * m)
        enhanced = s * (c[:, :, None, None] * m)
        multi = torch.cat([conv(enhanced) for conv in self.scales], dim=1)
        out = self.compress(channel_shuffle(multi, self.groups))
        return out, c, s, enhanced


def ace_stages(shallow_stride: int, deep_stride: int = 32) -> int:
    ratio = deep_stride // shallow_stride
    if ratio * shallow_stride != deep_stride or ratio & (ratio - 1):
        raise ShapeError(f"stride {shallow_stride} does not divide {deep_stride} by a power of two")
    return int(math.log2(ratio))


class SSFMBranch(nn.Module):
    def __init__(self, shallow_channels, num_stages, channels, cfg: SSFMConfig, ace_on=True, samc_on=True):
        super().__init__()
        self.ace = ACE(shallow_channels, num_stages, channels, cfg.ace_double_norm) if ace_on else None
        self.samc = SAMC(channels, cfg) if samc_on else None

    def forward(self, shallow, deep):
        m = fuse_add(self.ace(shallow), deep) if self.ace is not None else deep
        if self.samc is None:
            return m, m, None, None
        o, c, s, _ = self.samc(m)
        return m, o, c, s


def shallow_level(branch: int) -> int:
    """Index into (F1, F2, F3) feeding expert branch ``branch``; cycles past three."""
    return branch % 3


class SSFM(nn.Module):
    """One independent fusion branch per expert; branch i pairs D_i with F_{i mod 3}."""

    def __init__(self, stage_channels, stage_strides, num_experts, cfg: Optional[SSFMConfig] = None,
                 ace_on=True, samc_on=True):
        super().__init__()
        cfg = cfg or SSFMConfig()
        channels = stage_channels[3]
        self.branches = nn.ModuleList()
        for i in range(num_experts):
            level = shallow_level(i)
            stages = ace_stages(stage_strides[level], stage_strides[3])
            self.branches.append(SSFMBranch(stage_channels[level], stages, channels, cfg, ace_on, samc_on))
        init_weights(self)

    def forward(self, pyramid: FeaturePyramid) -> FusedFeatureSet:
        out = FusedFeatureSet(M=[], O=[])
        shallow = pyramid.shallow
        for i, (branch, deep) in enumerate(zip(self.branches, pyramid.D)):
            m, o, c, s = branch(shallow[shallow_level(i)], deep)
            out.M.append(m)
            out.O.append(o)
            if c is not None:
                out.C_attn.append(c)
                out.S_attn.append(s)
        return out
