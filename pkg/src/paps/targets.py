"""Dense training targets for every head, as tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from paps.ordering import OrderingStack, ordering_for_scene
from paps.scenegen import AmodalScene, DenseTargets, derive_dense_targets


@dataclass
class TargetConfig:
    sigma: float = 8.0
    small_instance_area: int = 64 * 64
    small_instance_weight: float = 3.0
    center_window: int = 3


def _window(h: int, w: int, center: np.ndarray, size: int) -> tuple[slice, slice]:
    cy, cx = (int(v) for v in np.round(center))
    r = size // 2
    return slice(max(cy - r, 0), min(cy + r + 1, h)), slice(max(cx - r, 0), min(cx + r + 1, w))


def scene_targets(
    scene: AmodalScene,
    n_stuff: int,
    n_layers: int,
    config: TargetConfig | None = None,
    dense: DenseTargets | None = None,
    stack: OrderingStack | None = None,
) -> dict[str, torch.Tensor]:
    """Per-image target tensors (no batch dimension)."""
    config = config or TargetConfig()
    dense = dense or derive_dense_targets(scene, config.sigma)
    stack = stack or ordering_for_scene(scene, n_layers)
    h, w = scene.height, scene.width
    semantic = scene.semantic_map.astype(np.int64)
    thing_semantic = np.where(semantic >= n_stuff, semantic - n_stuff + 1, 0)

    weights = np.ones((h, w), dtype=np.float32)
    center_occ = np.zeros((h, w), dtype=np.float32)
    center_occ_mask = np.zeros((h, w), dtype=bool)
    aco = np.zeros((2, h, w), dtype=np.float32)
    aco_mask = np.zeros((h, w), dtype=bool)
    visible = [i for i in scene.instances if not i.fully_occluded]
    for inst in visible:
        if inst.inmodal_mask.sum() < config.small_instance_area:
            weights[inst.inmodal_mask] = config.small_instance_weight
        center_occ[inst.inmodal_mask] = float(inst.occluded_flag)
        center_occ_mask |= inst.inmodal_mask
    # center windows override the mask-wide flags
    for inst in visible:
        iid = inst.instance_id
        win = _window(h, w, dense.centers[iid], config.center_window)
        center_occ[win] = float(dense.center_occluded[iid])
        center_occ_mask[win] = True
        # fusion reads the offset at the integer peak, so regress from there
        to_amodal = dense.amodal_centers[iid] - np.round(dense.centers[iid])
        aco[(slice(None), *win)] = to_amodal[:, None, None]
        aco_mask[win] = True
    for inst in visible:
        # the exact center pixel always carries its own instance's value
        iid = inst.instance_id
        cy, cx = (int(v) for v in np.round(dense.centers[iid]))
        if 0 <= cy < h and 0 <= cx < w:
            aco[:, cy, cx] = dense.amodal_centers[iid] - np.round(dense.centers[iid])
            center_occ[cy, cx] = float(dense.center_occluded[iid])

    t = torch.from_numpy
    return {
        "semantic": t(semantic),
        "thing_semantic": t(thing_semantic),
        "pixel_weights": t(weights),
        "center_heatmap": t(dense.center_heatmap[None].copy()),
        "inmodal_offsets": t(dense.inmodal_offsets.copy()),
        "offset_mask": t(dense.offset_mask[None].astype(np.float32)),
        "occlusion_map": t(dense.occlusion_map[None].copy()),
        "center_occ": t(center_occ[None]),
        "center_occ_mask": t(center_occ_mask[None].astype(np.float32)),
        "amodal_center_offsets": t(aco),
        "aco_mask": t(aco_mask[None].astype(np.float32)),
        "roo_masks": t(stack.layer_masks.astype(np.float32)),
        "roo_offsets": t(stack.layer_offsets.copy()),
    }


def collate(targets: list[dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    return {k: torch.stack([t[k] for t in targets]) for k in targets[0]}
