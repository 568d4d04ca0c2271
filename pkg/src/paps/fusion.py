"""Deterministic fusion of head outputs into an amodal panoptic prediction.

Everything here is numpy on single images; head arrays are channel-first.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from paps.model.network import HEAD_KEYS

CONF_THRESHOLD = 0.1
TOP_K = 200
NMS_KERNEL = 7
SEG_THRESHOLD = 0.5
OCCLUSION_THRESHOLD = 0.5


class FusionShapeError(ValueError):
    pass


@dataclass
class HeadOutputs:
    sem_logits: np.ndarray  # (S+T, H, W)
    roo_seg_logits: np.ndarray  # (N, H, W)
    occ_seg_logits: np.ndarray  # (1, H, W)
    thing_sem_logits: np.ndarray  # (1+T, H, W), channel 0 = void/stuff
    center_heatmap: np.ndarray  # (1, H, W)
    center_occ_logits: np.ndarray  # (1, H, W)
    inmodal_offsets: np.ndarray  # (2, H, W), (dy, dx)
    amodal_center_offsets: np.ndarray  # (2, H, W)
    roo_amodal_offsets: np.ndarray  # (N, 2, H, W)

    @classmethod
    def from_batch(cls, outputs: dict, index: int) -> "HeadOutputs":
        return cls(**{k: outputs[k][index].detach().cpu().double().numpy() for k in HEAD_KEYS})

    def with_refined(self, refined: dict, index: int) -> "HeadOutputs":
        """Copy with the layered heads replaced by the refiner's predictions."""
        kw = {k: getattr(self, k) for k in HEAD_KEYS}
        for k in ("roo_seg_logits", "roo_amodal_offsets"):
            kw[k] = refined[k][index].detach().cpu().double().numpy()
        return HeadOutputs(**kw)


@dataclass
class FusionConfig:
    conf_threshold: float = CONF_THRESHOLD
    top_k: int = TOP_K
    nms_kernel: int = NMS_KERNEL
    seg_threshold: float = SEG_THRESHOLD
    occlusion_threshold: float = OCCLUSION_THRESHOLD


@dataclass
class InstanceCandidate:
    instance_id: int
    center: tuple[int, int]  # inmodal center (y, x)
    score: float
    inmodal_mask: np.ndarray
    class_id: int = -1
    occlusion_score: float = 0.0


@dataclass
class PredictedInstance:
    instance_id: int
    class_id: int
    inmodal_mask: np.ndarray
    amodal_mask: np.ndarray
    visible_mask: np.ndarray
    occluded_mask: np.ndarray
    inmodal_center: tuple[float, float]
    amodal_center: tuple[float, float]
    layer_index: int
    score: float = 1.0
    occlusion_score: float = 0.0


@dataclass
class AmodalPanopticPrediction:
    semantic_map: np.ndarray
    instances: list[PredictedInstance]
    warnings: list[str] = field(default_factory=list)

    def check_invariants(self) -> list[str]:
        """Return a list of violated invariants (empty when consistent)."""
        problems = []
        seen = np.zeros(self.semantic_map.shape, dtype=bool)
        for inst in self.instances:
            if not np.array_equal(inst.visible_mask, inst.inmodal_mask):
                problems.append(f"{inst.instance_id}: visible != inmodal")
            if not np.array_equal(inst.occluded_mask, inst.amodal_mask & ~inst.inmodal_mask):
                problems.append(f"{inst.instance_id}: occluded != amodal minus inmodal")
            if (inst.inmodal_mask & ~inst.amodal_mask).any():
                problems.append(f"{inst.instance_id}: inmodal not inside amodal")
            if (seen & inst.inmodal_mask).any():
                problems.append(f"{inst.instance_id}: inmodal overlaps another instance")
            seen |= inst.inmodal_mask
        return problems


def merge_semantics(sem_logits: np.ndarray, thing_sem_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Add the thing head to the semantic head, repeating its void logit per stuff class."""
    n_classes = sem_logits.shape[0]
    n_thing = thing_sem_logits.shape[0] - 1
    n_stuff = n_classes - n_thing
    if n_thing < 1 or n_stuff < 1 or sem_logits.shape[1:] != thing_sem_logits.shape[1:]:
        raise FusionShapeError(
            f"incompatible channels: semantic {sem_logits.shape}, thing {thing_sem_logits.shape}"
        )
    void = np.repeat(thing_sem_logits[:1], n_stuff, axis=0)
    logits = sem_logits + np.concatenate([void, thing_sem_logits[1:]], axis=0)
    # softmax is monotone per pixel; argmax of the logits is the same label
    semantic = np.argmax(logits, axis=0)
    return semantic.astype(np.int64), semantic >= n_stuff


def _max_filter(a: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    padded = np.pad(a, r, mode="constant", constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return windows.max(axis=(-2, -1))


def find_centers(
    center_heatmap: np.ndarray,
    k_max: int = TOP_K,
    conf_threshold: float = CONF_THRESHOLD,
    nms_kernel: int = NMS_KERNEL,
) -> list[tuple[int, int, float]]:
    """Local maxima over a ``nms_kernel`` window, thresholded, top ``k_max`` by score.

    Ties in score are ordered by raster position.
    """
    hm = np.asarray(center_heatmap, dtype=np.float64)
    if hm.ndim == 3:
        hm = hm[0]
    if nms_kernel % 2 == 0:
        raise ValueError("nms_kernel must be odd")
    keep = (hm == _max_filter(hm, nms_kernel)) & (hm >= conf_threshold)
    ys, xs = np.nonzero(keep)
    scores = hm[ys, xs]
    order = np.lexsort((xs, ys, -scores))[:k_max]
    return [(int(ys[i]), int(xs[i]), float(scores[i])) for i in order]


def _nearest_center(points: np.ndarray, centers: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Index of the nearest center for each point; ties go to the lower index."""
    out = np.empty(len(points), dtype=np.int64)
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk]
        d = ((p[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        out[s : s + chunk] = d.argmin(axis=1)
    return out


def group_pixels(centers: np.ndarray, offsets: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Assign each pixel of ``region`` to the center nearest ``p + offset(p)``.

    Returns an id map with 1-based center indices, 0 outside the region.
    """
    ids = np.zeros(region.shape, dtype=np.int32)
    if len(centers) == 0 or not region.any():
        return ids
    ys, xs = np.nonzero(region)
    votes = np.stack([ys + offsets[0, ys, xs], xs + offsets[1, ys, xs]], axis=1)
    ids[ys, xs] = _nearest_center(votes, np.asarray(centers, dtype=np.float64)) + 1
    return ids


def group_inmodal(
    centers: list[tuple[int, int, float]], inmodal_offsets: np.ndarray, foreground_mask: np.ndarray
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    pts = np.array([(y, x) for y, x, *_ in centers], dtype=np.float64).reshape(-1, 2)
    id_map = group_pixels(pts, inmodal_offsets, foreground_mask)
    masks = {i + 1: id_map == i + 1 for i in range(len(pts))}
    return id_map, masks


def vote_labels(instance_id_map: np.ndarray, semantic_map: np.ndarray, ids=None) -> dict[int, int]:
    """Majority semantic label per instance; ties go to the lower class id."""
    if ids is None:
        ids = [int(i) for i in np.unique(instance_id_map) if i > 0]
    labels = {}
    for iid in ids:
        values = semantic_map[instance_id_map == iid]
        if values.size == 0:
            warnings.warn(f"instance {iid} has no pixels and was dropped", stacklevel=2)
            continue
        labels[iid] = int(np.bincount(values.astype(np.int64)).argmax())
    return labels


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _layer_distance(mask: np.ndarray, point: np.ndarray) -> float:
    if not mask.any():
        return np.inf
    ys, xs = np.nonzero(mask)
    return float(np.min((ys - point[0]) ** 2 + (xs - point[1]) ** 2))


def assign_and_group_amodal(
    instances: list[InstanceCandidate],
    amodal_center_offsets: np.ndarray,
    roo_seg_logits: np.ndarray,
    roo_amodal_offsets: np.ndarray,
    seg_threshold: float = SEG_THRESHOLD,
):
    """Layer assignment and per-layer amodal grouping.

    An instance goes to a layer whose thresholded mask contains its amodal
    center. When several layers contain it, the layer whose regression at
    that pixel points closest back to the instance's amodal center wins
    (ties to the lower layer). With no containing layer the instance keeps
    its inmodal mask as amodal mask and takes the nearest non-empty layer.

    Returns ``(amodal_masks, layers, amodal_centers, messages)`` keyed by id.
    """
    n_layers, h, w = roo_seg_logits.shape
    # sigmoid(x) > t  <=>  x > logit(t)
    if 0.0 < seg_threshold < 1.0:
        layer_masks = roo_seg_logits > np.log(seg_threshold / (1.0 - seg_threshold))
    else:
        layer_masks = _sigmoid(roo_seg_logits) > seg_threshold
    amodal_centers, layers, messages, fallback = {}, {}, [], set()
    for inst in instances:
        cy, cx = inst.center
        c = np.array([cy + amodal_center_offsets[0, cy, cx], cx + amodal_center_offsets[1, cy, cx]])
        amodal_centers[inst.instance_id] = c
        py, px = int(np.round(c[0])), int(np.round(c[1]))
        inside = 0 <= py < h and 0 <= px < w
        candidates = [k for k in range(n_layers) if inside and layer_masks[k, py, px]]
        if candidates:
            def miss(k):
                vote = np.array([py, px]) + roo_amodal_offsets[k, :, py, px]
                return float(np.sum((vote - c) ** 2))

            layers[inst.instance_id] = min(candidates, key=lambda k: (miss(k), k))
        else:
            dists = [_layer_distance(layer_masks[k], c) for k in range(n_layers)]
            layers[inst.instance_id] = int(np.argmin(dists)) if np.isfinite(min(dists)) else 0
            fallback.add(inst.instance_id)
            messages.append(f"instance {inst.instance_id}: amodal center in no layer mask")

    amodal_masks = {}
    for k in range(n_layers):
        members = [i for i in instances if layers[i.instance_id] == k and i.instance_id not in fallback]
        if not members:
            continue
        pts = np.stack([amodal_centers[i.instance_id] for i in members])
        ids = group_pixels(pts, roo_amodal_offsets[k], layer_masks[k])
        for j, inst in enumerate(members):
            amodal_masks[inst.instance_id] = (ids == j + 1) | inst.inmodal_mask
    for inst in instances:
        if inst.instance_id in fallback:
            amodal_masks[inst.instance_id] = inst.inmodal_mask.copy()
    return amodal_masks, layers, amodal_centers, messages


def finalize(semantic_map: np.ndarray, instances: list[PredictedInstance], messages=()) -> AmodalPanopticPrediction:
    out = []
    for inst in instances:
        amodal = inst.amodal_mask | inst.inmodal_mask
        inst.amodal_mask = amodal
        inst.visible_mask = inst.inmodal_mask.copy()
        inst.occluded_mask = amodal & ~inst.inmodal_mask
        out.append(inst)
    return AmodalPanopticPrediction(semantic_map=semantic_map, instances=out, warnings=list(messages))


def group_instances(head: HeadOutputs, config: FusionConfig | None = None):
    """Semantic map, foreground, id map and labelled inmodal instance candidates."""
    config = config or FusionConfig()
    semantic, fg = merge_semantics(head.sem_logits, head.thing_sem_logits)
    heat = np.clip(head.center_heatmap[0], 0.0, 1.0)
    centers = find_centers(heat, config.top_k, config.conf_threshold, config.nms_kernel)
    id_map, masks = group_inmodal(centers, head.inmodal_offsets, fg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        labels = vote_labels(id_map, semantic, ids=list(masks))
    messages = [str(w.message) for w in caught]
    occ = _sigmoid(head.center_occ_logits[0])
    candidates = []
    for (y, x, score), (iid, mask) in zip(centers, masks.items()):
        if iid not in labels:
            continue
        candidates.append(
            InstanceCandidate(iid, (y, x), score, mask, labels[iid], float(occ[y, x]))
        )
    return semantic, fg, id_map, candidates, messages


def occlusion_scores(candidates: list[InstanceCandidate]) -> dict[int, float]:
    return {c.instance_id: c.occlusion_score for c in candidates}


def fuse(head: HeadOutputs, config: FusionConfig | None = None) -> AmodalPanopticPrediction:
    config = config or FusionConfig()
    semantic, _, _, candidates, messages = group_instances(head, config)
    amodal, layers, amodal_centers, more = assign_and_group_amodal(
        candidates,
        head.amodal_center_offsets,
        head.roo_seg_logits,
        head.roo_amodal_offsets,
        config.seg_threshold,
    )
    instances = [
        PredictedInstance(
            instance_id=c.instance_id,
            class_id=c.class_id,
            inmodal_mask=c.inmodal_mask,
            amodal_mask=amodal[c.instance_id],
            visible_mask=c.inmodal_mask,
            occluded_mask=amodal[c.instance_id] & ~c.inmodal_mask,
            inmodal_center=(float(c.center[0]), float(c.center[1])),
            amodal_center=tuple(float(v) for v in amodal_centers[c.instance_id]),
            layer_index=int(layers[c.instance_id]),
            score=c.score,
            occlusion_score=c.occlusion_score,
        )
        for c in candidates
    ]
    return finalize(semantic, instances, messages + more)
