"""Shared encoder: strided stem, grouped-conv ELAN stages, SPP and FPN."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..config import ConfigError, ModelConfig


class StructureError(ValueError):
    """Feature maps arrived with strides/shapes the module cannot fuse."""


@dataclass
class FeatureMap:
    data: torch.Tensor
    stride: int

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def grid(self) -> tuple[int, int]:
        """(height, width) of the feature grid."""
        return tuple(self.data.shape[-2:])


@dataclass
class PyramidFeatures:
    levels: list[FeatureMap]
    pre_fpn_tap: FeatureMap | None = None

    @property
    def strides(self) -> list[int]:
        return [lvl.stride for lvl in self.levels]


def autopad(k: int) -> int:
    return k // 2


class ConvBNAct(nn.Module):
    """Conv2d -> BatchNorm -> SiLU."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, s: int = 1, g: int = 1, act: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, s, autopad(k), groups=g, bias=False)
        self.bn = nn.BatchNorm2d(c_out, eps=1e-3, momentum=0.03)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.bn(self.conv(x)))


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    if groups == 1:
        return x
    b, c, h, w = x.shape
    return x.view(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


class GroupedBranch(nn.Module):
    """One computational branch of the ELAN block: a grouped 3x3 conv."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.cv = ConvBNAct(channels, channels, 3, 1, g=groups)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.cv(x)


class ElanBlock(nn.Module):
    """E-ELAN style aggregation block.

    Two grouped 1x1 expansions feed a chain of grouped 3x3 branches; every
    intermediate output is concatenated, channel-shuffled across the groups
    and merged back with a 1x1 projection.

    Args:
        c_in: Input channels, divisible by ``groups``.
        c_out: Output channels, divisible by ``2 * groups``.
        groups: Group count for every convolution except the final merge.
        depth: Number of chained 3x3 branches.
    """

    def __init__(self, c_in: int, c_out: int, groups: int = 1, depth: int = 2):
        super().__init__()
        if groups < 1 or c_in % groups or c_out % (2 * groups):
            raise ConfigError(
                f"ELAN block channels ({c_in} -> {c_out}) incompatible with group_count={groups}"
            )
        hidden = c_out // 2
        self.groups = groups
        self.c_in = c_in
        self.cv1 = ConvBNAct(c_in, hidden, 1, g=groups)
        self.cv2 = ConvBNAct(c_in, hidden, 1, g=groups)
        self.branches = nn.ModuleList(GroupedBranch(hidden, groups) for _ in range(depth))
        self.merge = ConvBNAct(hidden * (2 + depth), c_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.c_in:
            raise ConfigError(f"ELAN block expects {self.c_in} channels, got {x.shape[1]}")
        outs = [self.cv1(x), self.cv2(x)]
        y = outs[-1]
        for branch in self.branches:
            y = branch(y)
            outs.append(y)
        return self.merge(channel_shuffle(torch.cat(outs, 1), self.groups))


def elan_block(x: FeatureMap, block: ElanBlock) -> FeatureMap:
    return FeatureMap(block(x.data), x.stride)


class SPP(nn.Module):
    """Identity plus same-padded max-pools at each kernel size, concatenated and projected."""

    def __init__(self, c_in: int, c_out: int, kernels=(5, 9, 13)):
        super().__init__()
        if any(k < 1 or k % 2 == 0 for k in kernels):
            raise ConfigError(f"SPP kernel sizes must be odd and >= 1, got {list(kernels)}")
        hidden = c_in // 2
        self.cv1 = ConvBNAct(c_in, hidden, 1)
        self.pools = nn.ModuleList(nn.MaxPool2d(k, 1, k // 2) for k in kernels)
        self.cv2 = ConvBNAct(hidden * (len(kernels) + 1), c_out, 1)

    def pooled(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [x] + [pool(x) for pool in self.pools]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.cv1(x)
        return self.cv2(torch.cat(self.pooled(x), 1))


def spp_fuse(x: FeatureMap, spp: SPP) -> FeatureMap:
    return FeatureMap(spp(x.data), x.stride)


class FPN(nn.Module):
    """Top-down pathway over three stage features (strides 8, 16, 32).

    The deepest level is projected laterally, upsampled x2 (nearest),
    concatenated with the lateral projection of the next shallower level and
    fused by an ELAN block. Outputs share ``out_channels``.
    """

    def __init__(self, in_channels: tuple[int, int, int], out_channels: int, groups: int):
        super().__init__()
        c3, c4, c5 = in_channels
        self.lat5 = ConvBNAct(c5, out_channels, 1)
        self.lat4 = ConvBNAct(c4, out_channels, 1)
        self.lat3 = ConvBNAct(c3, out_channels, 1)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.fuse4 = ElanBlock(2 * out_channels, out_channels, groups)
        self.fuse3 = ElanBlock(2 * out_channels, out_channels, groups)

    def forward(self, stage_feats: list[FeatureMap]) -> PyramidFeatures:
        if len(stage_feats) != 3:
            raise StructureError(f"FPN needs 3 levels, got {len(stage_feats)}")
        for lo, hi in zip(stage_feats, stage_feats[1:]):
            if hi.stride != 2 * lo.stride:
                raise StructureError(f"consecutive strides must double, got {lo.stride} -> {hi.stride}")
            if tuple(2 * d for d in hi.grid) != lo.grid:
                raise StructureError(f"grid {hi.grid} does not upsample onto {lo.grid}")
        c3, c4, c5 = stage_feats
        p5 = self.lat5(c5.data)
        p4 = self.fuse4(torch.cat([self.up(p5), self.lat4(c4.data)], 1))
        p3 = self.fuse3(torch.cat([self.up(p4), self.lat3(c3.data)], 1))
        return PyramidFeatures(
            levels=[FeatureMap(p3, c3.stride), FeatureMap(p4, c4.stride), FeatureMap(p5, c5.stride)],
            pre_fpn_tap=c3,
        )


def fpn_fuse(stage_feats: list[FeatureMap], fpn: FPN) -> PyramidFeatures:
    return fpn(stage_feats)


class Stage(nn.Module):
    """Stride-2 downsample followed by ``n`` ELAN blocks."""

    def __init__(self, c_in: int, c_out: int, n: int, groups: int):
        super().__init__()
        self.down = ConvBNAct(c_in, c_out, 3, 2)
        self.blocks = nn.Sequential(*(ElanBlock(c_out, c_out, groups) for _ in range(n)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(self.down(x))


class Encoder(nn.Module):
    """stem (s2) -> four stages (s4, s8, s16, s32) -> SPP on s32 -> FPN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        g = cfg.group_count
        c = cfg.stage_channels
        self.stem = ConvBNAct(3, cfg.stem_channels, 3, 2)
        self.stages = nn.ModuleList(
            Stage(cin, cout, cfg.blocks_per_stage, g)
            for cin, cout in zip((cfg.stem_channels, *c[:-1]), c)
        )
        self.spp = SPP(c[3], c[3], cfg.spp_kernels)
        self.fpn = FPN((c[1], c[2], c[3]), cfg.neck_channels, g)

    def forward(self, image: torch.Tensor) -> PyramidFeatures:
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input spatial dims {w}x{h} must be divisible by 32")
        x = self.stem(image)
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 1:
                feats.append(x)
        feats[-1] = self.spp(feats[-1])
        return self.fpn([FeatureMap(f, s) for f, s in zip(feats, (8, 16, 32))])


def forward_encoder(image: torch.Tensor, encoder: Encoder) -> PyramidFeatures:
    return encoder(image)
