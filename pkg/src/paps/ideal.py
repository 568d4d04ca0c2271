"""Encode known masks as the head outputs a perfect network would emit.

Used to exercise fusion independently of any trained weights: fusing the
encoding of a ground-truth scene must give the scene back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from paps.fusion import AmodalPanopticPrediction, HeadOutputs, PredictedInstance
from paps.ordering import ordering_for_scene
from paps.scenegen import AmodalScene, mass_center

LOGIT = 20.0


@dataclass
class LayeredInstance:
    class_id: int
    inmodal_mask: np.ndarray
    amodal_mask: np.ndarray
    layer: int
    occluded: bool = False
    amodal_center: np.ndarray | None = None


def _signed(mask: np.ndarray, magnitude: float) -> np.ndarray:
    return np.where(mask, magnitude, -magnitude)


def encode_ideal_outputs(
    semantic_map: np.ndarray,
    instances: list[LayeredInstance],
    n_stuff: int,
    n_thing: int,
    n_layers: int,
    magnitude: float = LOGIT,
) -> HeadOutputs:
    h, w = semantic_map.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    n_classes = n_stuff + n_thing
    sem = np.stack([_signed(semantic_map == c, magnitude) for c in range(n_classes)])
    thing = np.concatenate(
        [
            _signed(semantic_map < n_stuff, magnitude)[None],
            np.stack([_signed(semantic_map == n_stuff + t, magnitude) for t in range(n_thing)]),
        ]
    )
    heat = np.zeros((1, h, w))
    center_occ = np.full((1, h, w), -magnitude)
    occ_seg = np.full((1, h, w), -magnitude)
    inm_off = np.zeros((2, h, w))
    aco = np.zeros((2, h, w))
    roo = np.full((n_layers, h, w), -magnitude)
    roo_off = np.zeros((n_layers, 2, h, w))
    for inst in instances:
        if not inst.inmodal_mask.any():
            continue
        peak = np.round(mass_center(inst.inmodal_mask))
        py, px = int(peak[0]), int(peak[1])
        a = inst.amodal_center if inst.amodal_center is not None else mass_center(inst.amodal_mask)
        heat[0, py, px] = 1.0
        m = inst.inmodal_mask
        inm_off[0][m] = peak[0] - yy[m]
        inm_off[1][m] = peak[1] - xx[m]
        aco[:, py, px] = a - peak
        if inst.occluded:
            center_occ[0, py, px] = magnitude
        occ_seg[0][inst.amodal_mask & ~inst.inmodal_mask] = magnitude
        k, am = inst.layer, inst.amodal_mask
        roo[k][am] = magnitude
        roo_off[k, 0][am] = a[0] - yy[am]
        roo_off[k, 1][am] = a[1] - xx[am]
    return HeadOutputs(
        sem_logits=sem,
        roo_seg_logits=roo,
        occ_seg_logits=occ_seg,
        thing_sem_logits=thing,
        center_heatmap=heat,
        center_occ_logits=center_occ,
        inmodal_offsets=inm_off,
        amodal_center_offsets=aco,
        roo_amodal_offsets=roo_off,
    )


def ideal_outputs_for_scene(scene: AmodalScene, n_stuff: int, n_thing: int, n_layers: int) -> HeadOutputs:
    stack = ordering_for_scene(scene, n_layers)
    instances = [
        LayeredInstance(
            i.class_id, i.inmodal_mask, i.amodal_mask, stack.layer_assignment[i.instance_id], bool(i.occluded_flag)
        )
        for i in scene.visible_instances
    ]
    return encode_ideal_outputs(scene.semantic_map, instances, n_stuff, n_thing, n_layers)


def ideal_outputs_for_prediction(
    pred: AmodalPanopticPrediction, n_stuff: int, n_thing: int, n_layers: int
) -> HeadOutputs:
    instances = [
        LayeredInstance(
            i.class_id,
            i.inmodal_mask,
            i.amodal_mask,
            i.layer_index,
            bool(i.occluded_mask.any()),
            np.asarray(i.amodal_center, dtype=np.float64),
        )
        for i in pred.instances
    ]
    return encode_ideal_outputs(pred.semantic_map, instances, n_stuff, n_thing, n_layers)


def scene_to_prediction(scene: AmodalScene, n_layers: int) -> AmodalPanopticPrediction:
    """Ground truth expressed as a prediction (fully occluded instances omitted)."""
    stack = ordering_for_scene(scene, n_layers)
    instances = []
    for i in scene.visible_instances:
        c = mass_center(i.inmodal_mask)
        a = mass_center(i.amodal_mask)
        instances.append(
            PredictedInstance(
                i.instance_id,
                i.class_id,
                i.inmodal_mask.copy(),
                i.amodal_mask.copy(),
                i.inmodal_mask.copy(),
                i.amodal_mask & ~i.inmodal_mask,
                (float(c[0]), float(c[1])),
                (float(a[0]), float(a[1])),
                stack.layer_assignment[i.instance_id],
            )
        )
    return AmodalPanopticPrediction(scene.semantic_map.astype(np.int64), instances)
