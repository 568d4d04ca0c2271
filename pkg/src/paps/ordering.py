"""Relative occlusion ordering layers.

Layer 0 holds every unoccluded instance; an occluded instance sits one layer
below the deepest of its occluders, so the layer index is the length of the
longest occluder chain ending at it. Amodal masks within a layer never overlap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from paps.scenegen import AmodalScene, mass_center


class OrderingError(ValueError):
    """The occlusion graph has a cycle, so no layering exists."""

    def __init__(self, cycle: list[int]):
        super().__init__("occlusion cycle: " + " -> ".join(map(str, cycle + cycle[:1])))
        self.cycle = cycle


class LayerOverlapError(ValueError):
    """Two amodal masks assigned to the same layer overlap."""


@dataclass
class OcclusionGraph:
    nodes: list[int]
    edges: set[tuple[int, int]] = field(default_factory=set)  # (occluder, occludee)

    def occluders(self, node: int) -> list[int]:
        return sorted(u for (u, v) in self.edges if v == node)


@dataclass
class OrderingStack:
    n_layers: int
    layer_masks: np.ndarray  # N x H x W bool
    layer_offsets: np.ndarray  # N x 2 x H x W float32, (dy, dx)
    layer_assignment: dict[int, int]
    truncated: list[int] = field(default_factory=list)


def build_occlusion_graph(scene: AmodalScene) -> OcclusionGraph:
    insts = scene.instances
    edges = set()
    for a in insts:
        for b in insts:
            if a.depth_rank >= b.depth_rank:
                continue
            hidden = b.amodal_mask & ~b.inmodal_mask
            if (a.amodal_mask & hidden).any():
                edges.add((a.instance_id, b.instance_id))
    return OcclusionGraph(nodes=[i.instance_id for i in insts], edges=edges)


def _find_cycle(nodes: list[int], succ: dict[int, list[int]]) -> list[int]:
    color = dict.fromkeys(nodes, 0)
    stack: list[int] = []

    def visit(u: int) -> list[int] | None:
        color[u] = 1
        stack.append(u)
        for v in succ[u]:
            if color[v] == 1:
                return stack[stack.index(v) :]
            if color[v] == 0:
                found = visit(v)
                if found:
                    return found
        stack.pop()
        color[u] = 2
        return None

    for n in nodes:
        if color[n] == 0:
            found = visit(n)
            if found:
                return found
    return []


def assign_layers(graph: OcclusionGraph, n_max: int) -> tuple[dict[int, int], list[int]]:
    """Longest-occluder-chain layering, clamped to ``n_max - 1``.

    Returns the assignment and the ids that had to be clamped. A warning is
    emitted when clamping happens.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    preds = {n: [] for n in graph.nodes}
    succ = {n: [] for n in graph.nodes}
    for u, v in graph.edges:
        if u == v:
            raise OrderingError([u])
        preds[v].append(u)
        succ[u].append(v)
    # Kahn's algorithm; the dp runs in topological order
    indeg = {n: len(preds[n]) for n in graph.nodes}
    ready = sorted(n for n in graph.nodes if indeg[n] == 0)
    depth: dict[int, int] = {}
    while ready:
        u = ready.pop()
        depth[u] = 1 + max((depth[p] for p in preds[u]), default=-1)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
    if len(depth) != len(graph.nodes):
        remaining = [n for n in graph.nodes if n not in depth]
        sub = {n: [v for v in succ[n] if v in remaining] for n in remaining}
        raise OrderingError(_find_cycle(remaining, sub))
    truncated = sorted(n for n, d in depth.items() if d >= n_max)
    if truncated:
        warnings.warn(
            f"{len(truncated)} instance(s) exceed {n_max} ordering layers and were clamped",
            stacklevel=2,
        )
    return {n: min(d, n_max - 1) for n, d in depth.items()}, truncated


def build_ordering_stack(
    scene: AmodalScene, layer_assignment: dict[int, int], n_layers: int
) -> OrderingStack:
    h, w = scene.height, scene.width
    masks = np.zeros((n_layers, h, w), dtype=bool)
    offsets = np.zeros((n_layers, 2, h, w), dtype=np.float32)
    yy, xx = np.mgrid[0:h, 0:w]
    for inst in scene.instances:
        if inst.instance_id not in layer_assignment:
            raise KeyError(f"instance {inst.instance_id} has no layer assignment")
        k = layer_assignment[inst.instance_id]
        if not 0 <= k < n_layers:
            raise ValueError(f"layer {k} out of range for {n_layers} layers")
        m = inst.amodal_mask
        if (masks[k] & m).any():
            raise LayerOverlapError(
                f"instance {inst.instance_id} overlaps another amodal mask in layer {k}"
            )
        masks[k] |= m
        if m.any():
            c = mass_center(m)
            offsets[k, 0][m] = c[0] - yy[m]
            offsets[k, 1][m] = c[1] - xx[m]
    return OrderingStack(n_layers, masks, offsets, dict(layer_assignment))


def ordering_for_scene(scene: AmodalScene, n_layers: int) -> OrderingStack:
    """Graph, layering and target stack in one call."""
    assignment, truncated = assign_layers(build_occlusion_graph(scene), n_layers)
    stack = build_ordering_stack(scene, assignment, n_layers)
    stack.truncated = truncated
    return stack
