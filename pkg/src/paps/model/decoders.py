"""Semantic and instance decoders and their prediction heads."""

from __future__ import annotations

import torch
from torch import nn

from paps.model.backbone import FeaturePyramid
from paps.model.context import ContextExtractor
from paps.model.layers import DepthwiseSeparableConv, ds_block, upsample_to


class Head(nn.Module):
    """Two depthwise-separable convs then a 1x1 predictor.

    ``forward`` returns ``(prediction, features)`` where ``features`` is the
    output of the second conv, reused by other modules.
    """

    def __init__(self, in_ch, out_ch, head_channels=(128, 32), norm="group"):
        super().__init__()
        c1, c2 = head_channels
        self.conv1 = DepthwiseSeparableConv(in_ch, c1, norm=norm)
        self.conv2 = DepthwiseSeparableConv(c1, c2, norm=norm)
        self.predictor = nn.Conv2d(c2, out_ch, 1)

    @property
    def feature_channels(self) -> int:
        return self.conv2.pointwise.out_channels

    def forward(self, x):
        feats = self.conv2(self.conv1(x))
        return self.predictor(feats), feats


class CenterHead(nn.Module):
    """Shared trunk with a heatmap branch and an occlusion-flag branch."""

    def __init__(self, in_ch, head_channels=(128, 32), norm="group"):
        super().__init__()
        c1, c2 = head_channels
        self.conv1 = DepthwiseSeparableConv(in_ch, c1, norm=norm)
        self.conv2 = DepthwiseSeparableConv(c1, c2, norm=norm)
        self.heatmap = nn.Conv2d(c2, 1, 1)
        self.occluded = nn.Conv2d(c2, 1, 1)

    def forward(self, x):
        feats = self.conv2(self.conv1(x))
        return self.heatmap(feats), self.occluded(feats), feats


class SemanticDecoder(nn.Module):
    def __init__(
        self,
        stage_channels,
        width: int,
        n_classes: int,
        n_layers: int,
        head_channels=(128, 32),
        norm="group",
    ):
        super().__init__()
        # context block in the dense-prediction-cell slot
        self.context = ContextExtractor(stage_channels[3] + stage_channels[2], width, norm=norm)
        self.block8 = ds_block(width, width, norm)
        self.block4 = ds_block(2 * width, width, norm)
        self.sem_head = Head(2 * width, n_classes, head_channels, norm)
        self.roo_head = Head(2 * width, n_layers, head_channels, norm)
        self.occ_head = Head(2 * width, 1, head_channels, norm)

    def features(self, pyr: FeaturePyramid) -> torch.Tensor:
        x = torch.cat([upsample_to(pyr.B32, pyr.B16.shape[-2:]), pyr.B16], dim=1)
        x = self.context(x)
        x = self.block8(upsample_to(x, pyr.B8.shape[-2:]))
        x = torch.cat([upsample_to(x, pyr.C4.shape[-2:]), pyr.C4], dim=1)
        return self.block4(x)

    def heads(self, f_s: torch.Tensor, f_o: torch.Tensor) -> dict:
        x = torch.cat([f_s, f_o], dim=1)
        sem, _ = self.sem_head(x)
        roo, roo_feats = self.roo_head(x)
        occ, occ_feats = self.occ_head(x)
        return {
            "sem_logits": sem,
            "roo_seg_logits": roo,
            "occ_seg_logits": occ,
            "roo_seg_features": roo_feats,
            "occ_features": occ_feats,
        }


class InstanceDecoder(nn.Module):
    def __init__(
        self,
        stage_channels,
        width: int,
        n_thing: int,
        n_layers: int,
        head_channels=(128, 32),
        norm="group",
    ):
        super().__init__()
        self.n_layers = n_layers
        self.context = nn.ModuleList([ContextExtractor(c, width, norm=norm) for c in stage_channels])
        # index 0 works at stride 32, then 16, 8, 4
        self.blocks = nn.ModuleList([ds_block(width if i == 0 else 2 * width, width, norm) for i in range(4)])
        self.post = ds_block(2 * width, width, norm)
        occ_ch = head_channels[1]
        io_ch = width + occ_ch
        self.center_head = CenterHead(io_ch, head_channels, norm)
        self.thing_head = Head(io_ch, n_thing + 1, head_channels, norm)
        self.offset_head = Head(io_ch, 2, head_channels, norm)
        self.aco_head = Head(io_ch + head_channels[1], 2, head_channels, norm)
        self.roo_offset_head = Head(io_ch + head_channels[1], 2 * n_layers, head_channels, norm)

    def features(self, pyr: FeaturePyramid) -> torch.Tensor:
        levels = [p + ce(b) for p, ce, b in zip(pyr.P, self.context, pyr.B)]
        x = self.blocks[0](levels[3])
        for i, level in zip(range(1, 4), reversed(levels[:3])):
            x = torch.cat([level, upsample_to(x, level.shape[-2:])], dim=1)
            x = self.blocks[i](x)
        return x

    def heads(self, f_i: torch.Tensor, f_o: torch.Tensor, occ_features: torch.Tensor) -> dict:
        x = self.post(torch.cat([f_i, f_o], dim=1))
        f_io = torch.cat([x, occ_features], dim=1)
        heat, center_occ, center_feats = self.center_head(f_io)
        thing, _ = self.thing_head(f_io)
        offsets, offset_feats = self.offset_head(f_io)
        amodal_in = torch.cat([f_io, center_feats], dim=1)
        aco, _ = self.aco_head(amodal_in)
        roo_off, roo_off_feats = self.roo_offset_head(amodal_in)
        b, _, h, w = roo_off.shape
        return {
            "center_heatmap": heat,
            "center_occ_logits": center_occ,
            "thing_sem_logits": thing,
            "inmodal_offsets": offsets,
            "amodal_center_offsets": aco,
            "roo_amodal_offsets": roo_off.view(b, self.n_layers, 2, h, w),
            "offset_features": offset_feats,
            "roo_offset_features": roo_off_feats,
        }

