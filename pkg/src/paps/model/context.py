"""Context extractor and the cross-task feature exchange between decoders."""

from __future__ import annotations

from typing import Callable

import torch
from torch import nn

from paps.model.backbone import ShapeError
from paps.model.layers import ConvNormAct, DepthwiseSeparableConv, global_pool


class ContextExtractor(nn.Module):
    """Within-scale context: a 1x1 branch plus two anisotropic atrous branches.

    Output channels are ``width/2`` from the 1x1 branch and ``width/8`` from
    each atrous branch and from each of their globally pooled copies, i.e.
    128 + 4 x 32 = 256 at the default width.
    """

    def __init__(self, in_ch: int, width: int = 256, dilations=((1, 6), (3, 1)), norm="group"):
        super().__init__()
        if width % 8:
            raise ValueError("context extractor width must be divisible by 8")
        self.in_ch = in_ch
        self.width = width
        self.direct = ConvNormAct(in_ch, width // 2, 1, norm=norm)
        self.reducer = ConvNormAct(in_ch, width // 2, 1, norm=norm)
        self.atrous = nn.ModuleList(
            [
                DepthwiseSeparableConv(width // 2, width // 8, dilation=d, norm=norm, padding_mode="replicate")
                for d in dilations
            ]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"context extractor expects {self.in_ch} channels, got {x.shape[1]}")
        r = self.reducer(x)
        a = [conv(r) for conv in self.atrous]
        return torch.cat([self.direct(x), *a, *[global_pool(t) for t in a]], dim=1)


def context_extract(x: torch.Tensor, module: ContextExtractor) -> torch.Tensor:
    return module(x)


class ConfidenceGate(nn.Module):
    """Global pool -> 1x1 reduce -> ReLU -> 1x1 expand -> sigmoid, per channel."""

    def __init__(self, width: int = 256, reduced: int = 64):
        super().__init__()
        self.reduce = nn.Conv2d(width, reduced, 1)
        self.expand = nn.Conv2d(reduced, width, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.expand(torch.relu(self.reduce(s))))


# name -> ablation model code
CROSS_TASK_VARIANTS = {
    "none": "M61",
    "concat": "M62",
    "sum": "M63",
    "self_only": "M64",
    "per_input_self": "M65",
    "cross_only": "M66",
    "full": "M67",
}

Gate = Callable[[torch.Tensor], torch.Tensor]


class ConfigurationError(ValueError):
    pass


def cross_task_fuse(
    f_i: torch.Tensor,
    f_s: torch.Tensor,
    g1: Gate,
    g2: Gate,
    g3: Gate,
    variant: str = "full",
    side: str = "instance",
) -> torch.Tensor:
    """Exchange features between the instance (``f_i``) and semantic (``f_s``) decoders.

    ``side`` only matters for ``concat``, where each decoder receives the
    other decoder's features unchanged.
    """
    if variant not in CROSS_TASK_VARIANTS:
        raise ConfigurationError(f"unknown cross-task variant {variant!r}")
    if f_i.shape != f_s.shape:
        raise ShapeError(f"feature shapes differ: {tuple(f_i.shape)} vs {tuple(f_s.shape)}")
    if variant == "none":
        return torch.zeros_like(f_i)
    if variant == "concat":
        if side not in ("instance", "semantic"):
            raise ConfigurationError(f"unknown side {side!r}")
        return f_s if side == "instance" else f_i
    if variant == "sum":
        return f_i + f_s
    if variant == "self_only":
        f_r = f_i + f_s
        return g3(f_r) * f_r
    if variant == "per_input_self":
        return g1(f_i) * f_i + g2(f_s) * f_s
    f_r = (1 - g1(f_s)) * f_i + (1 - g2(f_i)) * f_s
    if variant == "cross_only":
        return f_r
    return g3(f_r) * f_r


class CrossTaskModule(nn.Module):
    def __init__(self, width: int = 256, variant: str = "full", reduced: int = 64):
        super().__init__()
        if variant not in CROSS_TASK_VARIANTS:
            raise ConfigurationError(f"unknown cross-task variant {variant!r}")
        self.variant = variant
        self.g1 = ConfidenceGate(width, reduced)
        self.g2 = ConfidenceGate(width, reduced)
        self.g3 = ConfidenceGate(width, reduced)

    def forward(self, f_i: torch.Tensor, f_s: torch.Tensor):
        """Returns (output for the semantic decoder, output for the instance decoder)."""
        if self.variant == "concat":
            return f_i, f_s
        out = cross_task_fuse(f_i, f_s, self.g1, self.g2, self.g3, self.variant)
        return out, out
