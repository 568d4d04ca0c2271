"""Amodal panoptic quality (APQ) and amodal parsing coverage (APC).

Convention (recorded in every report as ``CONVENTION``):

* Thing segments are amodal masks of instances with visible pixels. A
  prediction and a ground-truth segment of the same class match when their
  amodal IoU exceeds 0.5; matching is one-to-one, greedy by descending IoU
  with a content-based tie-break, so it does not depend on instance ids.
* Stuff segments are the per-class regions of the semantic maps.
* APQ per class is ``sum(IoU of matches) / (TP + FP/2 + FN/2)``.
* APC per class is the ground-truth-area weighted mean of matched IoU
  (0 for an unmatched ground-truth segment).
* Per-class sums accumulate over the whole dataset; headline numbers are
  the mean over classes that occur (in ground truth or prediction for APQ,
  in ground truth for APC). A split with no such class scores 1.0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from paps.fusion import AmodalPanopticPrediction
from paps.scenegen import AmodalScene

CONVENTION = "apq-apc/1: amodal IoU>0.5, greedy one-to-one, APC=area-weighted matched IoU"
MATCH_IOU = 0.5


class MetricConfigurationError(ValueError):
    pass


@dataclass
class Segment:
    segment_id: int
    class_id: int
    mask: np.ndarray


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0
    covered: float = 0.0  # sum over GT segments of area * matched IoU
    gt_area: float = 0.0

    def merge(self, other: "ClassStats") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum
        self.covered += other.covered
        self.gt_area += other.gt_area

    @property
    def apq(self) -> float | None:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return None if denom == 0 else self.iou_sum / denom

    @property
    def apc(self) -> float | None:
        return None if self.gt_area == 0 else self.covered / self.gt_area


@dataclass
class Match:
    image: int
    class_id: int
    gt_id: int | None
    pred_id: int | None
    iou: float


@dataclass
class MetricReport:
    APQ: float
    APC: float
    APQ_S: float
    APQ_T: float
    APC_S: float
    APC_T: float
    per_class: dict[int, dict]
    matches: list[Match] = field(default_factory=list)
    n_images: int = 0
    convention: str = CONVENTION

    def to_dict(self) -> dict:
        return {
            "convention": self.convention,
            "n_images": self.n_images,
            "APQ": self.APQ,
            "APC": self.APC,
            "APQ_S": self.APQ_S,
            "APQ_T": self.APQ_T,
            "APC_S": self.APC_S,
            "APC_T": self.APC_T,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "matches": [
                {"image": m.image, "class_id": m.class_id, "gt_id": m.gt_id, "pred_id": m.pred_id, "iou": m.iou}
                for m in self.matches
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return 0.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def match_segments(gts: list[Segment], preds: list[Segment], threshold: float = MATCH_IOU):
    """One-to-one matches with IoU > threshold as ``[(gt_index, pred_index, iou)]``."""
    pairs = []
    for gi, g in enumerate(gts):
        for pi, p in enumerate(preds):
            if g.class_id != p.class_id:
                continue
            v = iou(g.mask, p.mask)
            if v > threshold:
                pairs.append((-v, np.packbits(p.mask).tobytes(), np.packbits(g.mask).tobytes(), gi, pi))
    pairs.sort(key=lambda t: t[:3])
    used_g, used_p, out = set(), set(), []
    for neg, _, _, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        out.append((gi, pi, -neg))
    return out


def _stuff_segments(semantic_map: np.ndarray, n_stuff: int) -> list[Segment]:
    return [Segment(c, c, semantic_map == c) for c in range(n_stuff) if (semantic_map == c).any()]


def scene_segments(scene: AmodalScene, n_stuff: int, amodal: bool = True):
    things = [
        Segment(i.instance_id, i.class_id, i.amodal_mask if amodal else i.inmodal_mask)
        for i in scene.visible_instances
    ]
    return _stuff_segments(scene.semantic_map, n_stuff), things


def prediction_segments(pred: AmodalPanopticPrediction, n_stuff: int, amodal: bool = True):
    things = [Segment(i.instance_id, i.class_id, i.amodal_mask if amodal else i.inmodal_mask) for i in pred.instances]
    # an instance with nothing to evaluate is not a segment
    return _stuff_segments(pred.semantic_map, n_stuff), [s for s in things if s.mask.any()]


def _check_vocabulary(name: str, semantic_map, segments, n_stuff: int, n_thing: int):
    n = n_stuff + n_thing
    if semantic_map.size and (semantic_map.min() < 0 or semantic_map.max() >= n):
        raise MetricConfigurationError(f"{name} semantic map has labels outside 0..{n - 1}")
    for s in segments:
        if not n_stuff <= s.class_id < n:
            raise MetricConfigurationError(f"{name} instance {s.segment_id} has non-thing class {s.class_id}")


class MetricAccumulator:
    """Accumulates per-class statistics over images; merging is associative."""

    def __init__(self, n_stuff: int, n_thing: int):
        self.n_stuff = n_stuff
        self.n_thing = n_thing
        self.stats = {c: ClassStats() for c in range(n_stuff + n_thing)}
        self.matches: list[Match] = []
        self.n_images = 0

    def add_segments(self, gt_stuff, gt_things, pred_stuff, pred_things, shape_gt, shape_pred) -> None:
        if shape_gt != shape_pred:
            raise MetricConfigurationError(f"image size mismatch: {shape_gt} vs {shape_pred}")
        image = self.n_images
        for gts, preds in ((gt_stuff, pred_stuff), (gt_things, pred_things)):
            matched = match_segments(gts, preds)
            mg = {gi: (pi, v) for gi, pi, v in matched}
            mp = {pi for _, pi, _ in matched}
            for gi, g in enumerate(gts):
                st = self.stats[g.class_id]
                area = float(g.mask.sum())
                st.gt_area += area
                if gi in mg:
                    pi, v = mg[gi]
                    st.tp += 1
                    st.iou_sum += v
                    st.covered += area * v
                    self.matches.append(Match(image, g.class_id, g.segment_id, preds[pi].segment_id, v))
                else:
                    st.fn += 1
                    self.matches.append(Match(image, g.class_id, g.segment_id, None, 0.0))
            for pi, p in enumerate(preds):
                if pi not in mp:
                    self.stats[p.class_id].fp += 1
                    self.matches.append(Match(image, p.class_id, None, p.segment_id, 0.0))
        self.n_images += 1

    def add(self, pred: AmodalPanopticPrediction, scene: AmodalScene, amodal: bool = True) -> None:
        gs, gt = scene_segments(scene, self.n_stuff, amodal)
        ps, pt = prediction_segments(pred, self.n_stuff, amodal)
        _check_vocabulary("ground truth", scene.semantic_map, gt, self.n_stuff, self.n_thing)
        _check_vocabulary("prediction", pred.semantic_map, pt, self.n_stuff, self.n_thing)
        self.add_segments(gs, gt, ps, pt, scene.semantic_map.shape, pred.semantic_map.shape)

    def merge(self, other: "MetricAccumulator") -> None:
        if (other.n_stuff, other.n_thing) != (self.n_stuff, self.n_thing):
            raise MetricConfigurationError("cannot merge accumulators with different vocabularies")
        for c, st in other.stats.items():
            self.stats[c].merge(st)
        offset = self.n_images
        self.matches.extend(Match(m.image + offset, m.class_id, m.gt_id, m.pred_id, m.iou) for m in other.matches)
        self.n_images += other.n_images

    def report(self) -> MetricReport:
        stuff = range(self.n_stuff)
        things = range(self.n_stuff, self.n_stuff + self.n_thing)

        def mean(values):
            values = [v for v in values if v is not None]
            return float(np.mean(values)) if values else 1.0

        apq = {c: self.stats[c].apq for c in self.stats}
        apc = {c: self.stats[c].apc for c in self.stats}
        per_class = {
            c: {
                "APQ": apq[c],
                "APC": apc[c],
                "TP": st.tp,
                "FP": st.fp,
                "FN": st.fn,
                "iou_sum": st.iou_sum,
                "kind": "stuff" if c < self.n_stuff else "thing",
            }
            for c, st in self.stats.items()
        }
        return MetricReport(
            APQ=mean(apq.values()),
            APC=mean(apc.values()),
            APQ_S=mean(apq[c] for c in stuff),
            APQ_T=mean(apq[c] for c in things),
            APC_S=mean(apc[c] for c in stuff),
            APC_T=mean(apc[c] for c in things),
            per_class=per_class,
            matches=list(self.matches),
            n_images=self.n_images,
        )


def evaluate(
    pred: AmodalPanopticPrediction, gt: AmodalScene, n_stuff: int, n_thing: int, amodal: bool = True
) -> MetricReport:
    acc = MetricAccumulator(n_stuff, n_thing)
    acc.add(pred, gt, amodal)
    return acc.report()


def evaluate_dataset(preds, scenes, n_stuff: int, n_thing: int, amodal: bool = True) -> MetricReport:
    preds, scenes = list(preds), list(scenes)
    if len(preds) != len(scenes):
        raise MetricConfigurationError(f"{len(preds)} predictions for {len(scenes)} scenes")
    acc = MetricAccumulator(n_stuff, n_thing)
    for p, s in zip(preds, scenes):
        acc.add(p, s, amodal)
    return acc.report()
