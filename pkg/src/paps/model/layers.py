import math

import torch
from torch import nn
from torch.nn import functional as F


def norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        # at least two channels per group so 1x1 maps still normalize
        groups = math.gcd(channels, min(8, max(channels // 2, 1)))
        return nn.GroupNorm(groups, channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


class ConvNormAct(nn.Sequential):
    def __init__(self, in_ch, out_ch, kernel_size=1, stride=1, norm="group", act=True):
        layers = [
            nn.Conv2d(
                in_ch,
                out_ch,
                kernel_size,
                stride=stride,
                padding=kernel_size // 2,
                bias=norm == "none",
            ),
            norm_layer(norm, out_ch),
        ]
        if act:
            layers.append(nn.ReLU())
        super().__init__(*layers)


class DepthwiseSeparableConv(nn.Module):
    """3x3 depthwise conv + norm + ReLU, then 1x1 pointwise conv + norm + ReLU.

    ``dilation`` may be an (h, w) pair. ``padding_mode="replicate"`` keeps a
    spatially constant input constant at the borders.
    """

    def __init__(
        self, in_ch, out_ch, kernel_size=3, dilation=(1, 1), norm="group", padding_mode="zeros"
    ):
        super().__init__()
        if isinstance(dilation, int):
            dilation = (dilation, dilation)
        pad = (dilation[0] * (kernel_size // 2), dilation[1] * (kernel_size // 2))
        self.depthwise = nn.Conv2d(
            in_ch,
            in_ch,
            kernel_size,
            padding=pad,
            dilation=dilation,
            groups=in_ch,
            bias=norm == "none",
            padding_mode=padding_mode,
        )
        self.norm1 = norm_layer(norm, in_ch)
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1, bias=norm == "none")
        self.norm2 = norm_layer(norm, out_ch)

    def forward(self, x):
        x = F.relu(self.norm1(self.depthwise(x)))
        return F.relu(self.norm2(self.pointwise(x)))


def ds_block(in_ch, out_ch, norm="group", n=2) -> nn.Sequential:
    """``n`` sequential depthwise-separable convs."""
    return nn.Sequential(
        *[DepthwiseSeparableConv(in_ch if i == 0 else out_ch, out_ch, norm=norm) for i in range(n)]
    )


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def global_pool(x: torch.Tensor) -> torch.Tensor:
    """Global average pool broadcast back to the input's spatial size."""
    return x.mean(dim=(2, 3), keepdim=True).expand_as(x)
