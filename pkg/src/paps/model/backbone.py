"""Shared multi-resolution backbone.

A small four-branch trunk stands in for HRNet. It keeps the same interface:
branch outputs at strides 4/8/16/32, their stride-4 concatenation reduced to
``width`` channels (C4), and one 3x3-processed level per stride (P4..P32).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from paps.model.layers import ConvNormAct, norm_layer, upsample_to

STRIDES = (4, 8, 16, 32)


class ShapeError(ValueError):
    pass


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    stage_depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    width: int = 256
    norm: str = "group"
    toy_preset: bool = True

    def validate(self) -> None:
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ValueError("backbone needs exactly four stages")
        if min(self.stage_channels) < 1 or min(self.stage_depths) < 1 or self.width < 1:
            raise ValueError("channel and block counts must be >= 1")


@dataclass
class FeaturePyramid:
    B4: torch.Tensor
    B8: torch.Tensor
    B16: torch.Tensor
    B32: torch.Tensor
    C4: torch.Tensor
    P4: torch.Tensor
    P8: torch.Tensor
    P16: torch.Tensor
    P32: torch.Tensor

    @property
    def B(self) -> list[torch.Tensor]:
        return [self.B4, self.B8, self.B16, self.B32]

    @property
    def P(self) -> list[torch.Tensor]:
        return [self.P4, self.P8, self.P16, self.P32]


class BasicBlock(nn.Module):
    def __init__(self, ch, norm):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.n1 = norm_layer(norm, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.n2 = norm_layer(norm, ch)

    def forward(self, x):
        y = F.relu(self.n1(self.conv1(x)))
        return F.relu(x + self.n2(self.conv2(y)))


class MultiScaleBackbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        ch, norm = config.stage_channels, config.norm
        stem_ch = max(ch[0] // 2, 8)
        self.stem = nn.Sequential(
            ConvNormAct(3, stem_ch, 3, stride=2, norm=norm),
            ConvNormAct(stem_ch, ch[0], 3, stride=2, norm=norm),
        )
        self.transitions = nn.ModuleList(
            [ConvNormAct(ch[i - 1], ch[i], 3, stride=2, norm=norm) for i in range(1, 4)]
        )
        self.branches = nn.ModuleList(
            [nn.Sequential(*[BasicBlock(ch[i], norm) for _ in range(config.stage_depths[i])]) for i in range(4)]
        )
        # one exchange unit: every branch receives every other branch, resampled
        self.exchange = nn.ModuleList(
            [
                nn.ModuleList(
                    [ConvNormAct(ch[j], ch[i], 1, norm=norm, act=False) if j != i else nn.Identity() for j in range(4)]
                )
                for i in range(4)
            ]
        )
        self.reduce = ConvNormAct(sum(ch), config.width, 1, norm=norm)
        self.levels = nn.ModuleList([ConvNormAct(config.width, config.width, 3, norm=norm) for _ in range(4)])

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w} is not divisible by 32; pad it first")
        x = self.stem(image - 0.5)
        xs = [x]
        for t in self.transitions:
            xs.append(t(xs[-1]))
        xs = [b(x) for b, x in zip(self.branches, xs)]
        bs = []
        for i in range(4):
            acc = xs[i]
            for j in range(4):
                if j != i:
                    acc = acc + upsample_to(self.exchange[i][j](xs[j]), xs[i].shape[-2:])
            bs.append(F.relu(acc))
        size4 = bs[0].shape[-2:]
        c4 = self.reduce(torch.cat([upsample_to(b, size4) for b in bs], dim=1))
        ps = [self.levels[k](upsample_to(c4, bs[k].shape[-2:])) for k in range(4)]
        return FeaturePyramid(*bs, c4, *ps)


def extract_features(image: torch.Tensor, backbone: MultiScaleBackbone) -> FeaturePyramid:
    """Run the backbone on a (B, 3, H, W) or (H, W, 3) image."""
    if image.dim() == 3 and image.shape[-1] == 3:
        image = image.permute(2, 0, 1).unsqueeze(0)
    return backbone(image)


def pad_to_multiple(image: torch.Tensor, multiple: int = 32) -> torch.Tensor:
    h, w = image.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    return F.pad(image, (0, pw, 0, ph))
