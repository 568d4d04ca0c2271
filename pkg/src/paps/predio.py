"""On-disk predictions: the dataset's RLE mask scheme plus a text summary."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from paps.fusion import AmodalPanopticPrediction, PredictedInstance
from paps.scenegen import SceneFormatError, _pack_rle, _Reader

MAGIC = b"APPR"
FORMAT_VERSION = 1


def encode_prediction(pred: AmodalPanopticPrediction) -> bytes:
    h, w = pred.semantic_map.shape
    parts = [
        MAGIC,
        struct.pack("<HHHH", FORMAT_VERSION, h, w, len(pred.instances)),
        np.ascontiguousarray(pred.semantic_map, dtype="<u2").tobytes(),
    ]
    for inst in pred.instances:
        parts.append(
            struct.pack(
                "<HHHdddddd",
                inst.instance_id,
                inst.class_id,
                inst.layer_index,
                *inst.inmodal_center,
                *inst.amodal_center,
                inst.score,
                inst.occlusion_score,
            )
        )
        parts.append(_pack_rle(inst.inmodal_mask))
        parts.append(_pack_rle(inst.amodal_mask))
    return b"".join(parts)


def decode_prediction(data: bytes) -> AmodalPanopticPrediction:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise SceneFormatError("magic", "not an APPR prediction file")
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise SceneFormatError("version", f"unsupported version {version}")
    h, w, n = r.unpack("<HHH", "header")
    semantic = r.array("<u2", h * w, "semantic_map").reshape(h, w).astype(np.int64)
    instances = []
    for k in range(n):
        iid, cls, layer, iy, ix, ay, ax, score, occ = r.unpack("<HHHdddddd", f"instances[{k}].header")
        inmodal = r.rle(h, w, f"instances[{k}].inmodal_mask")
        amodal = r.rle(h, w, f"instances[{k}].amodal_mask")
        instances.append(
            PredictedInstance(
                iid, cls, inmodal, amodal, inmodal.copy(), amodal & ~inmodal, (iy, ix), (ay, ax), layer, score, occ
            )
        )
    if r.pos != len(data):
        raise SceneFormatError("trailer", f"{len(data) - r.pos} unexpected trailing bytes")
    return AmodalPanopticPrediction(semantic, instances)


def write_prediction(pred: AmodalPanopticPrediction, path) -> None:
    Path(path).write_bytes(encode_prediction(pred))


def read_prediction(path) -> AmodalPanopticPrediction:
    return decode_prediction(Path(path).read_bytes())


def summary_lines(name: str, pred: AmodalPanopticPrediction) -> list[str]:
    lines = [f"{name} instances={len(pred.instances)}"]
    for i in pred.instances:
        lines.append(
            f"  id={i.instance_id} class={i.class_id} layer={i.layer_index} score={i.score:.3f} "
            f"inmodal_px={int(i.inmodal_mask.sum())} amodal_px={int(i.amodal_mask.sum())} "
            f"occluded_px={int(i.occluded_mask.sum())}"
        )
    for msg in pred.warnings:
        lines.append(f"  warning: {msg}")
    return lines
