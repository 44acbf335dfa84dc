"""Color-, semantic- and depth-guided encoder-decoder branches.

Every branch is a ResNet encoder (stem + five stages of two basic blocks,
each stage halving resolution) and a transpose-convolution decoder with
additive skips.  Later branches absorb the decoder features of earlier ones
at every encoder stage through one of three fusion modes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import SAMMAFB
from .errors import ConfigError, DimensionError, ShapeError
from .fusion import confidence_fuse

FULL_WIDTHS = (32, 64, 128, 256, 512, 1024)
TINY_WIDTHS = (4, 8, 16, 32, 64, 128)
FUSION_MODES = ("add", "concat", "sammafb")
STRIDES = (16, 8, 4, 2, 1)  # decoder feature order
DOWNSAMPLE = 32
# the linear depth head regresses depth in units of DEPTH_SCALE meters
DEPTH_SCALE = 10.0


def conv_bn_relu(in_channels, out_channels, kernel_size=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size, stride, kernel_size // 2, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


def deconv_bn_relu(in_channels, out_channels):
    return nn.Sequential(
        nn.ConvTranspose2d(in_channels, out_channels, 5, stride=2, padding=2, output_padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, inplanes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = None
        if stride != 1 or inplanes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(inplanes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes)
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class StageFusion(nn.Module):
    """Merge a branch's own encoder features with injected decoder features.

    Injected maps come first in the concatenation so the order is always
    [color; semantic; depth].
    """

    def __init__(self, mode: str, channels: int, n_injected: int, **sammafb_kwargs):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
        self.mode = mode
        self.channels = channels
        self.n_injected = n_injected
        self.block = SAMMAFB(channels, n_injected + 1, **sammafb_kwargs) if mode == "sammafb" else None

    @property
    def out_channels(self) -> int:
        return self.channels if self.mode == "add" else self.channels * (self.n_injected + 1)

    def forward(self, own: torch.Tensor, injected: Sequence[torch.Tensor]) -> torch.Tensor:
        if self.mode == "add":
            out = own
            for t in injected:
                out = out + t
            return out
        maps = [*injected, own]
        if self.mode == "concat":
            return torch.cat(maps, dim=1)
        return self.block(maps)


@dataclass
class BranchOutput:
    depth: torch.Tensor
    confidence: torch.Tensor
    features: list[torch.Tensor] = field(default_factory=list)  # strides 16, 8, 4, 2, 1
    final_feature: torch.Tensor | None = None


class Branch(nn.Module):
    """One encoder-decoder branch emitting a depth map and a confidence map.

    ``n_injected`` is the number of earlier branches whose decoder features
    join this branch's encoder.  ``absorb`` adds the two extra layers of the
    depth-guided branch: a bottleneck layer that takes pooled injected
    features, and an extra decoder convolution before the output head.
    """

    def __init__(
        self,
        in_channels: int,
        widths: Sequence[int] = FULL_WIDTHS,
        fusion: str = "sammafb",
        n_injected: int = 0,
        absorb: bool = False,
        attention_kernel: int = 7,
    ):
        super().__init__()
        if len(widths) != 6:
            raise ConfigError(f"need six channel widths, got {len(widths)}")
        if fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {fusion!r}; expected one of {FUSION_MODES}")
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.fusion = fusion
        self.n_injected = n_injected
        self.absorb = absorb

        self.stem = conv_bn_relu(in_channels, widths[0], kernel_size=5)
        self.fusions = nn.ModuleList()
        stages = []
        for i in range(5):
            in_ch = widths[i]
            if n_injected:
                fuse = StageFusion(fusion, widths[i], n_injected, kernel_size=attention_kernel)
                self.fusions.append(fuse)
                in_ch = fuse.out_channels
            stages.append(nn.Sequential(BasicBlock(in_ch, widths[i + 1], 2), BasicBlock(widths[i + 1], widths[i + 1])))
        self.stages = nn.ModuleList(stages)

        self.bottleneck_absorb = None
        self.extra_decoder = None
        if absorb:
            pooled = sum(widths[1:5])
            self.bottleneck_absorb = conv_bn_relu(widths[5] + pooled, widths[5], kernel_size=1)
            self.extra_decoder = conv_bn_relu(widths[0], widths[0])

        self.decoder = nn.ModuleList(deconv_bn_relu(widths[i + 1], widths[i]) for i in reversed(range(5)))
        self.head = nn.Conv2d(widths[0], 2, 3, 1, 1)

    @property
    def bottleneck_channels(self) -> int:
        if self.absorb:
            return self.widths[5] + sum(self.widths[1:5])
        return self.widths[5]

    def _check_input(self, x, injected):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"branch expects B x {self.in_channels} x H x W input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ShapeError(f"input {h}x{w} is not divisible by {DOWNSAMPLE}")
        if len(injected) != self.n_injected:
            raise DimensionError(f"branch expects {self.n_injected} injected feature sets, got {len(injected)}")
        for src, feats in enumerate(injected):
            if len(feats) != len(STRIDES):
                raise DimensionError(f"injected set {src} has {len(feats)} stages, expected {len(STRIDES)}")
            for stride, t in zip(STRIDES, feats):
                i = STRIDES[::-1].index(stride)
                expected = (x.shape[0], self.widths[i], h // stride, w // stride)
                if tuple(t.shape) != expected:
                    raise DimensionError(
                        f"injected set {src} at stride {stride} has shape {tuple(t.shape)}, expected {expected}"
                    )

    def forward(self, x: torch.Tensor, injected: Sequence[Sequence[torch.Tensor]] = ()) -> BranchOutput:
        self._check_input(x, injected)
        # injected[src] is ordered by stride 16..1; flip to encoder order 1..16
        by_stage = [list(reversed(feats)) for feats in injected]

        skips = []
        feat = self.stem(x)
        for i, stage in enumerate(self.stages):
            skips.append(feat)
            if self.n_injected:
                feat = self.fusions[i](feat, [src[i] for src in by_stage])
            feat = stage(feat)

        if self.absorb:
            pooled = []
            for i in range(1, 5):
                inj = by_stage[0][i]
                for src in by_stage[1:]:
                    inj = inj + src[i]
                inj = inj / len(by_stage)
                pooled.append(F.avg_pool2d(inj, DOWNSAMPLE >> i))
            feat = self.bottleneck_absorb(torch.cat([feat, *pooled], dim=1))

        features = []
        for deconv, skip in zip(self.decoder, reversed(skips)):
            feat = deconv(feat) + skip
            features.append(feat)
        final = self.extra_decoder(feat) if self.extra_decoder is not None else feat
        out = self.head(final)
        return BranchOutput(out[:, 0:1] * DEPTH_SCALE, out[:, 1:2], features, final)


@dataclass
class BackboneOutput:
    depths: dict[str, torch.Tensor]
    confidences: dict[str, torch.Tensor]
    fused: torch.Tensor
    dg_feature: torch.Tensor


class Backbone(nn.Module):
    """CG -> SG -> DG (or CG -> DG) with confidence fusion of the branch depths."""

    def __init__(
        self,
        widths: Sequence[int] = FULL_WIDTHS,
        fusion: str = "sammafb",
        three_branch: bool = True,
        attention_kernel: int = 7,
    ):
        super().__init__()
        self.three_branch = three_branch
        self.widths = tuple(widths)
        self.cg = Branch(4, widths, fusion, n_injected=0, attention_kernel=attention_kernel)
        self.sg = (
            Branch(5, widths, fusion, n_injected=1, attention_kernel=attention_kernel) if three_branch else None
        )
        self.dg = Branch(
            3 if three_branch else 2,
            widths,
            fusion,
            n_injected=2 if three_branch else 1,
            absorb=True,
            attention_kernel=attention_kernel,
        )

    @property
    def branch_names(self) -> tuple[str, ...]:
        return ("cg", "sg", "dg") if self.three_branch else ("cg", "dg")

    def forward(self, rgb: torch.Tensor, sparse: torch.Tensor, semantic: torch.Tensor | None = None) -> BackboneOutput:
        if self.three_branch and semantic is None:
            raise ConfigError("three-branch backbone requires a semantic image")
        if not self.three_branch and semantic is not None:
            raise ConfigError("two-branch (cg_dg) backbone does not accept a semantic image")

        cg = self.cg(torch.cat([rgb, sparse], dim=1))
        outputs = {"cg": cg}
        if self.three_branch:
            sg = self.sg(torch.cat([cg.depth, semantic, sparse], dim=1), [cg.features])
            outputs["sg"] = sg
            dg = self.dg(torch.cat([cg.depth, sg.depth, sparse], dim=1), [cg.features, sg.features])
        else:
            dg = self.dg(torch.cat([cg.depth, sparse], dim=1), [cg.features])
        outputs["dg"] = dg

        depths = {k: v.depth for k, v in outputs.items()}
        confidences = {k: v.confidence for k, v in outputs.items()}
        fused = confidence_fuse(list(depths.values()), list(confidences.values()))
        return BackboneOutput(depths, confidences, fused, dg.final_feature)
