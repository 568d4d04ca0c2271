"""Amodal mask refiner: memory attention over unoccluded-instance embeddings."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from paps.model.context import ConfigurationError
from paps.model.decoders import Head
from paps.model.layers import ConvNormAct, ds_block


class StrideEncoder(nn.Module):
    """Three conv stages taking stride-4 features to stride 16."""

    def __init__(self, in_ch: int, out_ch: int, norm="group"):
        super().__init__()
        mid = max(out_ch // 2, 8)
        self.stages = nn.Sequential(
            ConvNormAct(in_ch, mid, 3, stride=2, norm=norm),
            ConvNormAct(mid, out_ch, 3, stride=2, norm=norm),
            ConvNormAct(out_ch, out_ch, 3, stride=1, norm=norm),
        )

    def forward(self, x):
        return self.stages(x)


def memory_readout(
    keys: torch.Tensor, query_key: torch.Tensor, embedding: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax attention of one query key over N memory keys.

    Args:
        keys: (B, N, D) memory keys.
        query_key: (B, D) query key.
        embedding: (B, N, D) memory values.

    Returns:
        (weights (B, N), readout (B, D))
    """
    logits = torch.einsum("bnd,bd->bn", keys, query_key)
    weights = torch.softmax(logits, dim=1)
    return weights, torch.einsum("bn,bnd->bd", weights, embedding)


class AmodalMaskRefiner(nn.Module):
    """Correlates amodal query features against an embedding of unoccluded objects.

    The embedding matrix and the memory keys are learned ``N x D`` matrices
    modulated additively by a pointwise linear projection of the inmodal
    embedding encoding; ``D = (H/16)(W/16)C`` is fixed by ``crop_size``.
    """

    def __init__(
        self,
        amodal_ch: int,
        unoccluded_ch: int,
        crop_size: tuple[int, int],
        n_layers: int,
        n_memory: int = 128,
        channels: int = 64,
        head_channels=(128, 32),
        norm="group",
    ):
        super().__init__()
        h, w = crop_size
        if h % 16 or w % 16:
            raise ConfigurationError("refiner crop size must be divisible by 16")
        self.crop_size = (h, w)
        self.n_memory = n_memory
        self.channels = channels
        self.grid = (h // 16, w // 16)
        self.dim = self.grid[0] * self.grid[1] * channels
        self.n_layers = n_layers

        self.ie_enc = StrideEncoder(unoccluded_ch, channels, norm)
        self.q_enc = StrideEncoder(amodal_ch, channels, norm)
        self.embedding = nn.Parameter(torch.randn(n_memory, self.dim) * 0.02)
        self.keys = nn.Parameter(torch.randn(n_memory, self.dim) / self.dim)
        self.embed_proj = nn.Conv2d(channels, n_memory * channels, 1)
        self.key_proj = nn.Conv2d(channels, n_memory * channels, 1)
        self.query_proj = nn.Conv2d(channels, channels, 1)
        for conv in (self.embed_proj, self.key_proj, self.query_proj):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)
        self.decoder = nn.ModuleList([ds_block(2 * channels, channels, norm), ds_block(channels, channels, norm)])
        self.roo_head = Head(channels + amodal_ch, n_layers, head_channels, norm)
        self.roo_offset_head = Head(channels + amodal_ch, 2 * n_layers, head_channels, norm)

    def _memory(self, proj: nn.Conv2d, base: torch.Tensor, enc: torch.Tensor) -> torch.Tensor:
        b = enc.shape[0]
        gh, gw = self.grid
        # (B, N*C, h, w) -> (B, N, C*h*w), flattened like the readout reshape
        m = proj(enc).view(b, self.n_memory, self.channels * gh * gw)
        return base.unsqueeze(0) + m

    def encode(self, amodal_features: torch.Tensor, unoccluded_features: torch.Tensor) -> dict:
        ie = self.ie_enc(unoccluded_features)
        q = self.q_enc(amodal_features)
        if tuple(ie.shape[-2:]) != self.grid or tuple(q.shape[-2:]) != self.grid:
            raise ConfigurationError(
                f"refiner configured for a {self.grid} stride-16 grid, got {tuple(q.shape[-2:])}; "
                "rebuild it for the new crop size"
            )
        b = q.shape[0]
        embedding = self._memory(self.embed_proj, self.embedding, ie)
        keys = self._memory(self.key_proj, self.keys, ie)
        query_key = self.query_proj(q).reshape(b, self.dim)
        weights, readout = memory_readout(keys, query_key, embedding)
        return {"query": q, "weights": weights, "readout": readout.view(b, self.channels, *self.grid)}

    def forward(self, amodal_features: torch.Tensor, unoccluded_features: torch.Tensor) -> dict:
        enc = self.encode(amodal_features, unoccluded_features)
        x = torch.cat([enc["readout"], enc["query"]], dim=1)
        for block in self.decoder:
            x = F.interpolate(block(x), scale_factor=2, mode="bilinear", align_corners=False)
        f_amr = x
        joint = torch.cat([f_amr, amodal_features], dim=1)
        roo, _ = self.roo_head(joint)
        off, _ = self.roo_offset_head(joint)
        b, _, h, w = off.shape
        return {
            "f_amr": f_amr,
            "attention": enc["weights"],
            "roo_seg_logits": roo,
            "roo_amodal_offsets": off.view(b, self.n_layers, 2, h, w),
        }


def unoccluded_mask(
    instance_id_map: np.ndarray, occlusion_scores: dict[int, float], threshold: float = 0.5
) -> np.ndarray:
    """Union of inmodal masks whose predicted occlusion score is below ``threshold``."""
    keep = [i for i, s in occlusion_scores.items() if s < threshold]
    return np.isin(instance_id_map, keep) & (instance_id_map > 0)


def build_unoccluded_features(
    instance_id_map: np.ndarray,
    occlusion_scores: dict[int, float],
    features: torch.Tensor,
    threshold: float = 0.5,
) -> torch.Tensor:
    """Mask (C, h, w) or (B, C, h, w) features to unoccluded instance pixels.

    The mask is resized with nearest sampling when the feature map is coarser.
    """
    mask = unoccluded_mask(instance_id_map, occlusion_scores, threshold)
    m = torch.as_tensor(mask, dtype=features.dtype, device=features.device)[None, None]
    if tuple(m.shape[-2:]) != tuple(features.shape[-2:]):
        m = F.interpolate(m, size=features.shape[-2:], mode="nearest")
    if features.dim() == 3:
        m = m[0]
    return features * m
