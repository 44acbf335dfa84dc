"""Full network: three-branch backbone plus optional CSPN++ refinement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneOutput
from .config import RunConfig
from .cspn import DEFAULT_SCHEDULE, check_schedule, refine


@dataclass
class Prediction:
    backbone: BackboneOutput
    affinity: torch.Tensor | None = None
    refined: torch.Tensor | None = None

    @property
    def output(self) -> torch.Tensor:
        return self.refined if self.refined is not None else self.backbone.fused


class SemAttNet(nn.Module):
    def __init__(
        self,
        widths: Sequence[int],
        fusion: str = "sammafb",
        three_branch: bool = True,
        refinement: bool = True,
        kernel_size: int = 3,
        schedule: Sequence[int] = DEFAULT_SCHEDULE,
        attention_kernel: int = 7,
    ):
        super().__init__()
        self.backbone = Backbone(widths, fusion, three_branch, attention_kernel)
        self.schedule = check_schedule(schedule)
        self.kernel_size = kernel_size
        # affinity generator: one conv off the DG decoder's last feature map
        self.affinity_head = None
        if refinement:
            self.affinity_head = nn.Conv2d(widths[0], kernel_size * kernel_size - 1, 3, 1, 1)
            # start from near-uniform positive affinities: plain diffusion, which cannot amplify
            nn.init.normal_(self.affinity_head.weight, std=1e-3)
            nn.init.constant_(self.affinity_head.bias, 1.0)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SemAttNet":
        return cls(
            cfg.widths,
            cfg.fusion,
            cfg.three_branch,
            cfg.refinement,
            cfg.kernel_size,
            cfg.dilation_schedule,
            cfg.attention_kernel,
        )

    @property
    def has_refinement(self) -> bool:
        return self.affinity_head is not None

    @property
    def three_branch(self) -> bool:
        return self.backbone.three_branch

    def forward(
        self,
        rgb: torch.Tensor,
        sparse: torch.Tensor,
        semantic: torch.Tensor | None = None,
        refine_output: bool = True,
    ) -> Prediction:
        out = self.backbone(rgb, sparse, semantic)
        if not (self.has_refinement and refine_output):
            return Prediction(out)
        affinity = self.affinity_head(out.dg_feature)
        refined = refine(out.fused, sparse, affinity, self.schedule)
        return Prediction(out, affinity, refined)
