"""Shared fixtures and oracles for the test suite."""

from __future__ import annotations

import time
from contextlib import contextmanager

import numpy as np
import torch

from paps.model.backbone import BackboneConfig
from paps.model.network import ModelConfig
from paps.fusion import AmodalPanopticPrediction, PredictedInstance
from paps.ideal import scene_to_prediction
from paps.scenegen import SceneGenConfig, ShapeSpec, compose_scene

N_STUFF, N_THING = 2, 3
GEN_STUFF, GEN_THING = SceneGenConfig().n_stuff, SceneGenConfig().n_thing

# criterion id -> (passed, title, details); printed by conftest at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str, dict]] = {}


@contextmanager
def criterion(cid: str, title: str):
    """Record one acceptance criterion as passed or failed, with its details and runtime."""
    details: dict = {}
    start = time.perf_counter()
    try:
        yield details
    except BaseException:
        details.setdefault("runtime_s", round(time.perf_counter() - start, 1))
        ACCEPTANCE[cid] = (False, title, details)
        raise
    details.setdefault("runtime_s", round(time.perf_counter() - start, 1))
    ACCEPTANCE[cid] = (True, title, details)


def make_scene(shapes, h=32, w=32, n_stuff=N_STUFF, n_thing=N_THING, stuff=None):
    """Compose a noise-free scene from ``(kind, thing_index, (cy, cx), (sh, sw), depth)`` tuples."""
    specs = [ShapeSpec(k, n_stuff + t, c, s, d) for k, t, c, s, d in shapes]
    stuff_map = np.zeros((h, w), dtype=np.int64) if stuff is None else stuff
    return compose_scene(specs, stuff_map, n_stuff, n_thing)


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(
        n_stuff=N_STUFF,
        n_thing=N_THING,
        n_layers=3,
        backbone=BackboneConfig(stage_channels=(4, 4, 8, 8), width=16, norm="group"),
        head_channels=(8, 4),
        gate_channels=4,
        refiner_memory=8,
        refiner_channels=4,
        crop_size=(32, 32),
    )
    base.update(kw)
    return ModelConfig(**base)


def relative_error(fd: torch.Tensor, ad: torch.Tensor) -> float:
    """max |fd - ad| / max(|fd|, |ad|, 1e-3 * max|ad|), elementwise."""
    fd, ad = fd.reshape(-1).double(), ad.reshape(-1).double()
    floor = max(1e-3 * float(ad.abs().max()), 1e-12)
    denom = torch.maximum(torch.maximum(fd.abs(), ad.abs()), torch.full_like(ad, floor))
    return float(((fd - ad).abs() / denom).max())


def finite_difference(fn, tensor: torch.Tensor, indices, eps: float = 1e-6) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. selected flat entries of ``tensor``."""
    flat = tensor.data.view(-1)
    out = []
    for i in indices:
        orig = float(flat[i])
        flat[i] = orig + eps
        plus = float(fn())
        flat[i] = orig - eps
        minus = float(fn())
        flat[i] = orig
        out.append((plus - minus) / (2 * eps))
    return torch.tensor(out, dtype=torch.float64)


def gradient_error(fn, tensor: torch.Tensor, n: int = 10, seed: int = 0, eps: float = 1e-6) -> float:
    """Relative error between autograd and central differences on ``n`` random entries."""
    if tensor.grad is not None:
        tensor.grad = None
    fn().backward()
    grad = tensor.grad.detach().reshape(-1).clone()
    g = torch.Generator().manual_seed(seed)
    idx = torch.randperm(tensor.numel(), generator=g)[:n].tolist()
    with torch.no_grad():
        fd = finite_difference(fn, tensor, idx, eps)
    return relative_error(fd, grad[idx])


def brute_force_layers(nodes, edges):
    """Longest occluder chain ending at each node, by exhaustive path enumeration."""
    preds = {n: [u for (u, v) in edges if v == n] for n in nodes}

    def longest(n, seen):
        best = 0
        for u in preds[n]:
            if u in seen:
                raise ValueError("cycle")
            best = max(best, 1 + longest(u, seen | {u}))
        return best

    return {n: longest(n, {n}) for n in nodes}


def brute_force_centers(heat: np.ndarray, k_max: int, thr: float, kernel: int):
    """Sliding-window local maxima by explicit loops, sorted by (-score, y, x)."""
    h, w = heat.shape
    r = kernel // 2
    found = []
    for y in range(h):
        for x in range(w):
            v = heat[y, x]
            if v < thr:
                continue
            window = heat[max(0, y - r) : y + r + 1, max(0, x - r) : x + r + 1]
            if v >= window.max():
                found.append((-v, y, x))
    found.sort()
    return [(y, x, -s) for s, y, x in found[:k_max]]


def panoptic_quality(gt_ids: np.ndarray, gt_cls: dict, pr_ids: np.ndarray, pr_cls: dict, classes) -> float:
    """Textbook PQ from two non-overlapping segment-id maps (0 = unlabeled).

    Matches are found from the joint histogram of segment ids; with
    disjoint segments an IoU above 0.5 identifies a unique pair.
    """
    pairs, counts = np.unique(np.stack([gt_ids.ravel(), pr_ids.ravel()]), axis=1, return_counts=True)
    area_g = dict(zip(*np.unique(gt_ids, return_counts=True)))
    area_p = dict(zip(*np.unique(pr_ids, return_counts=True)))
    stats = {c: [0.0, 0, 0, 0] for c in classes}  # iou sum, tp, fp, fn
    matched_g, matched_p = set(), set()
    for (g, p), inter in zip(pairs.T, counts):
        if g == 0 or p == 0 or gt_cls[g] != pr_cls[p]:
            continue
        union = area_g[g] + area_p[p] - inter
        v = inter / union
        if v > 0.5:
            stats[gt_cls[g]][0] += v
            stats[gt_cls[g]][1] += 1
            matched_g.add(g)
            matched_p.add(p)
    for g in area_g:
        if g != 0 and g not in matched_g:
            stats[gt_cls[g]][3] += 1
    for p in area_p:
        if p != 0 and p not in matched_p:
            stats[pr_cls[p]][2] += 1
    values = []
    for c, (s, tp, fp, fn) in stats.items():
        if tp + fp + fn:
            values.append(s / (tp + 0.5 * fp + 0.5 * fn))
    return float(np.mean(values)) if values else 1.0


def literal_merge(sem: np.ndarray, thing: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of exp(semantic + thing-or-void logit), void repeated per stuff class."""
    n_classes, h, w = sem.shape
    n_stuff = n_classes - (thing.shape[0] - 1)
    out = np.zeros((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            best, label = -np.inf, -1
            for c in range(n_classes):
                t = thing[0, y, x] if c < n_stuff else thing[1 + c - n_stuff, y, x]
                v = np.exp(sem[c, y, x] + t)
                if v > best:
                    best, label = v, c
            out[y, x] = label
    return out


def gate_reference(gate, x: np.ndarray) -> np.ndarray:
    w1 = gate.reduce.weight.detach().double().numpy()[:, :, 0, 0]
    b1 = gate.reduce.bias.detach().double().numpy()
    w2 = gate.expand.weight.detach().double().numpy()[:, :, 0, 0]
    b2 = gate.expand.bias.detach().double().numpy()
    out = []
    for img in x:
        s = img.mean(axis=(1, 2))
        hidden = np.maximum(w1 @ s + b1, 0.0)
        out.append(1.0 / (1.0 + np.exp(-(w2 @ hidden + b2))))
    return np.array(out)[:, :, None, None]


def cross_task_reference(variant, f_i, f_s, gates, side):
    """Straight-line numpy version of every cross-task variant."""
    g1 = lambda x: gate_reference(gates[0], x)  # noqa: E731
    g2 = lambda x: gate_reference(gates[1], x)  # noqa: E731
    g3 = lambda x: gate_reference(gates[2], x)  # noqa: E731
    if variant == "none":
        return np.zeros_like(f_i)
    if variant == "concat":
        return f_s if side == "instance" else f_i
    if variant == "sum":
        return f_i + f_s
    if variant == "self_only":
        r = f_i + f_s
        return g3(r) * r
    if variant == "per_input_self":
        return g1(f_i) * f_i + g2(f_s) * f_s
    f_r = (1 - g1(f_s)) * f_i + (1 - g2(f_i)) * f_s
    return f_r if variant == "cross_only" else g3(f_r) * f_r


def predicted_instance(iid, cls, inmodal, amodal=None, layer=0):
    amodal = inmodal if amodal is None else amodal
    return PredictedInstance(iid, cls, inmodal, amodal, inmodal, amodal & ~inmodal, (0.0, 0.0), (0.0, 0.0), layer)


def perturbed_prediction(scene, seed, n_layers=4, n_stuff=GEN_STUFF, n_thing=GEN_THING):
    """A plausible imperfect prediction: shifted, relabelled, dropped and spurious instances."""
    S, T = n_stuff, n_thing
    rng = np.random.default_rng(seed)
    gt = scene_to_prediction(scene, n_layers)
    h, w = scene.semantic_map.shape
    stuff = np.where(scene.semantic_map < S, scene.semantic_map, 0)
    stuff = np.roll(stuff, tuple(rng.integers(-3, 4, size=2)), axis=(0, 1))
    shapes = []
    for inst in gt.instances:
        if rng.random() < 0.15:
            continue
        shift = tuple(rng.integers(-3, 4, size=2)) if rng.random() < 0.6 else (0, 0)
        cls = int(rng.integers(S, S + T)) if rng.random() < 0.15 else inst.class_id
        amodal = np.roll(inst.amodal_mask, shift, axis=(0, 1))
        if rng.random() < 0.3:
            amodal = np.roll(amodal, int(rng.integers(-2, 3)), axis=1) | amodal
        shapes.append((cls, np.roll(inst.inmodal_mask, shift, axis=(0, 1)), amodal))
    if rng.random() < 0.5:
        box = np.zeros((h, w), dtype=bool)
        y, x = rng.integers(0, h - 8), rng.integers(0, w - 8)
        box[y : y + 8, x : x + 8] = True
        shapes.append((int(rng.integers(S, S + T)), box, box))
    # paint back to front so the inmodal masks stay disjoint
    id_map = np.zeros((h, w), dtype=np.int64)
    for k in reversed(range(len(shapes))):
        id_map[shapes[k][1]] = k + 1
    semantic = stuff.copy()
    instances = []
    for k, (cls, _, amodal) in enumerate(shapes):
        inm = id_map == k + 1
        semantic[inm] = cls
        instances.append(predicted_instance(10 + 7 * k, cls, inm, amodal | inm))
    return AmodalPanopticPrediction(semantic, instances)


def id_maps(semantic, instances, n_stuff):
    """Segment-id map with stuff ids offset past every instance id."""
    semantic = semantic.astype(np.int64)
    ids = np.where(semantic < n_stuff, 100_000 + semantic, 0)
    classes = {100_000 + c: c for c in range(n_stuff)}
    for iid, cls, mask in instances:
        ids[mask] = iid
        classes[iid] = cls
    return ids, classes
