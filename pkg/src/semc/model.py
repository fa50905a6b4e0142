"""Full SEMC network: MoE backbone -> SSFM -> MCRM."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import FeaturePyramid, MoEBackbone
from .config import RunConfig
from .mcrm import MCRM, MCRMOutput
from .ssfm import SSFM, FusedFeatureSet


@dataclass
class SEMCOutput:
    pyramid: FeaturePyramid
    fused: FusedFeatureSet
    head: MCRMOutput

    @property
    def logits(self) -> torch.Tensor:
        return self.head.logits


class SEMC(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        b, s, m = cfg.backbone, cfg.ssfm, cfg.mcrm
        self.backbone = MoEBackbone(b)
        self.ssfm = SSFM(b.stage_channels, b.stage_strides, b.num_experts, s,
                         ace_on=cfg.model.ace_on, samc_on=cfg.model.samc_on)
        self.mcrm = MCRM(b.stage_channels[3], b.num_experts, cfg.model.num_classes, m.embed_dim,
                         m.gate_tau, m.gate_hard, m.ema_keys, m.ema_momentum)
        self.num_experts = b.num_experts
        self.num_classes = cfg.model.num_classes

    def forward(self, x: torch.Tensor, gate_noise=None, project=True) -> SEMCOutput:
        pyramid = self.backbone(x)
        fused = self.ssfm(pyramid)
        return SEMCOutput(pyramid, fused, self.mcrm(fused.O, gate_noise, project))

    def expert_parameter_groups(self) -> tuple[list[list[nn.Parameter]], list[nn.Parameter]]:
        """Expert n owns its layer4 copy, SSFM branch n and classifier n; the rest is shared."""
        experts = []
        for n in range(self.num_experts):
            group = list(self.backbone.experts[n].parameters())
            group += list(self.ssfm.branches[n].parameters())
            group += list(self.mcrm.heads[n].parameters())
            experts.append(group)
        owned = {id(p) for g in experts for p in g}
        shared = [p for p in self.parameters() if id(p) not in owned]
        return experts, shared
