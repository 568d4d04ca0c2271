from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from paps.model.backbone import BackboneConfig, MultiScaleBackbone
from paps.model.context import CrossTaskModule
from paps.model.decoders import InstanceDecoder, SemanticDecoder
from paps.model.refiner import AmodalMaskRefiner

HEAD_KEYS = (
    "sem_logits",
    "roo_seg_logits",
    "occ_seg_logits",
    "thing_sem_logits",
    "center_heatmap",
    "center_occ_logits",
    "inmodal_offsets",
    "amodal_center_offsets",
    "roo_amodal_offsets",
)


@dataclass
class ModelConfig:
    n_stuff: int = 4
    n_thing: int = 3
    n_layers: int = 4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head_channels: tuple[int, int] = (128, 32)
    cross_task: str = "full"
    gate_channels: int = 64
    use_refiner: bool = True
    refiner_memory: int = 128
    refiner_channels: int = 64
    crop_size: tuple[int, int] = (64, 64)

    @property
    def width(self) -> int:
        return self.backbone.width

    @property
    def norm(self) -> str:
        return self.backbone.norm


def _upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


class PAPSNet(nn.Module):
    """Shared backbone, dual decoders with cross-task exchange, optional refiner.

    ``forward`` returns full-resolution head outputs plus the stride-4
    features the refiner consumes. The refiner runs separately through
    :meth:`refine` because its input depends on instance grouping.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        bb = config.backbone
        self.backbone = MultiScaleBackbone(bb)
        self.semantic = SemanticDecoder(
            bb.stage_channels, bb.width, config.n_stuff + config.n_thing, config.n_layers, config.head_channels, bb.norm
        )
        self.instance = InstanceDecoder(
            bb.stage_channels, bb.width, config.n_thing, config.n_layers, config.head_channels, bb.norm
        )
        self.cross = CrossTaskModule(bb.width, config.cross_task, config.gate_channels)
        self.refiner = None
        if config.use_refiner:
            c2 = config.head_channels[1]
            self.refiner = AmodalMaskRefiner(
                amodal_ch=2 * c2,
                unoccluded_ch=c2,
                crop_size=config.crop_size,
                n_layers=config.n_layers,
                n_memory=config.refiner_memory,
                channels=config.refiner_channels,
                head_channels=config.head_channels,
                norm=bb.norm,
            )

    def stage1_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("refiner."):
                yield name, p

    def refiner_parameters(self):
        for name, p in self.named_parameters():
            if name.startswith("refiner."):
                yield name, p

    def forward(self, images: torch.Tensor):
        pyr = self.backbone(images)
        f_s = self.semantic.features(pyr)
        f_i = self.instance.features(pyr)
        o_sem, o_inst = self.cross(f_i, f_s)
        sem = self.semantic.heads(f_s, o_sem)
        inst = self.instance.heads(f_i, o_inst, sem["occ_features"])
        raw = {**sem, **inst}
        out = {}
        for key in HEAD_KEYS:
            t = raw[key]
            if t.dim() == 5:
                b, n, two, h, w = t.shape
                out[key] = _upsample(t.reshape(b, n * two, h, w), 4).view(b, n, two, 4 * h, 4 * w)
            else:
                out[key] = _upsample(t, 4)
        feats = {
            "amodal_features": torch.cat([raw["roo_seg_features"], raw["roo_offset_features"]], dim=1),
            "offset_features": raw["offset_features"],
        }
        return out, feats

    def refine(self, amodal_features: torch.Tensor, unoccluded_features: torch.Tensor) -> dict:
        if self.refiner is None:
            raise RuntimeError("model was built without the amodal mask refiner")
        r = self.refiner(amodal_features, unoccluded_features)
        b, n, two, h, w = r["roo_amodal_offsets"].shape
        return {
            "roo_seg_logits": _upsample(r["roo_seg_logits"], 4),
            "roo_amodal_offsets": _upsample(r["roo_amodal_offsets"].reshape(b, n * two, h, w), 4).view(
                b, n, two, 4 * h, 4 * w
            ),
            "attention": r["attention"],
            "f_amr": r["f_amr"],
        }
