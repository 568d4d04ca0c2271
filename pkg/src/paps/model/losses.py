"""Semantic- and instance-decoder losses.

All functions take batched tensors; ``outputs`` and ``targets`` share spatial
size. Regression terms are L1 over the valid region normalized by the number
of valid pixels, so pixels outside the region contribute exactly nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch.nn import functional as F

ALPHA = 200.0
BETA = 0.01

SEM_TERMS = ("ss", "os", "roo")
INST_TERMS = ("tss", "ico", "icp", "icr", "aco", "rooacr")


class NumericalError(FloatingPointError):
    def __init__(self, term: str):
        super().__init__(f"loss term {term} is not finite")
        self.term = term


@dataclass
class BootstrapConfig:
    top_fraction: float = 0.15
    # hard-example mining starts from every pixel and narrows linearly
    warmup_steps: int = 0

    def fraction(self, step: int) -> float:
        if step >= self.warmup_steps:
            return self.top_fraction
        return 1.0 - (1.0 - self.top_fraction) * step / self.warmup_steps


@dataclass
class LossReport:
    terms: dict[str, torch.Tensor]
    alpha: float
    beta: float

    @property
    def sem(self) -> torch.Tensor:
        t = self.terms
        return t["ss"] + t["os"] + t["roo"]

    @property
    def inst(self) -> torch.Tensor:
        t = self.terms
        return t["tss"] + t["ico"] + self.alpha * t["icp"] + self.beta * (t["icr"] + t["aco"] + t["rooacr"])

    @property
    def total(self) -> torch.Tensor:
        return self.sem + self.inst

    def as_floats(self) -> dict[str, float]:
        out = {f"L_{k}": float(v.detach()) for k, v in self.terms.items()}
        out["L_sem"] = float(self.sem.detach())
        out["L_inst"] = float(self.inst.detach())
        return out


def bootstrapped_ce(
    logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor, top_fraction: float = 0.15
) -> torch.Tensor:
    """Mean of the hardest ``top_fraction`` of per-pixel weighted cross-entropies."""
    pixel = F.cross_entropy(logits, labels, reduction="none") * weights
    flat = pixel.reshape(-1)
    k = max(1, int(math.ceil(top_fraction * flat.numel())))
    return flat.topk(k).values.mean()


def masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Sum of absolute channel errors over masked pixels / number of masked pixels.

    ``pred`` and ``target`` are (B, 2, H, W); ``mask`` is (B, 1, H, W).
    """
    count = mask.sum()
    if count == 0:
        return pred.sum() * 0.0
    return ((pred - target).abs() * mask).sum() / count


def layered_bce(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Sum over layers of the per-layer mean binary cross-entropy."""
    per_layer = F.binary_cross_entropy_with_logits(logits, masks, reduction="none").mean(dim=(0, 2, 3))
    return per_layer.sum()


def layered_l1(pred: torch.Tensor, target: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Sum over layers of masked L1; ``pred``/``target`` are (B, N, 2, H, W)."""
    total = pred.sum() * 0.0
    for k in range(pred.shape[1]):
        total = total + masked_l1(pred[:, k], target[:, k], masks[:, k : k + 1])
    return total


def masked_bce(logits: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    count = mask.sum()
    if count == 0:
        return logits.sum() * 0.0
    return (F.binary_cross_entropy_with_logits(logits, target, reduction="none") * mask).sum() / count


def loss_terms(outputs: dict, targets: dict, bootstrap: BootstrapConfig | None = None) -> dict:
    bootstrap = bootstrap or BootstrapConfig()
    frac = bootstrap.top_fraction
    return {
        "ss": bootstrapped_ce(outputs["sem_logits"], targets["semantic"], targets["pixel_weights"], frac),
        "os": F.binary_cross_entropy_with_logits(outputs["occ_seg_logits"], targets["occlusion_map"]),
        "roo": layered_bce(outputs["roo_seg_logits"], targets["roo_masks"]),
        "tss": bootstrapped_ce(
            outputs["thing_sem_logits"], targets["thing_semantic"], targets["pixel_weights"], frac
        ),
        "ico": masked_bce(outputs["center_occ_logits"], targets["center_occ"], targets["center_occ_mask"]),
        "icp": F.mse_loss(outputs["center_heatmap"], targets["center_heatmap"]),
        "icr": masked_l1(outputs["inmodal_offsets"], targets["inmodal_offsets"], targets["offset_mask"]),
        "aco": masked_l1(outputs["amodal_center_offsets"], targets["amodal_center_offsets"], targets["aco_mask"]),
        "rooacr": layered_l1(outputs["roo_amodal_offsets"], targets["roo_offsets"], targets["roo_masks"]),
    }


def compute_losses(
    outputs: dict,
    targets: dict,
    alpha: float = ALPHA,
    beta: float = BETA,
    bootstrap: BootstrapConfig | None = None,
) -> LossReport:
    terms = loss_terms(outputs, targets, bootstrap)
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NumericalError(name)
    return LossReport(terms, alpha, beta)


def refiner_loss(refined: dict, targets: dict, beta: float = BETA) -> tuple[torch.Tensor, dict]:
    """Same segmentation/regression losses and weights as the instance decoder's layered heads."""
    roo = layered_bce(refined["roo_seg_logits"], targets["roo_masks"])
    rooacr = layered_l1(refined["roo_amodal_offsets"], targets["roo_offsets"], targets["roo_masks"])
    for name, value in (("ref_roo", roo), ("ref_rooacr", rooacr)):
        if not torch.isfinite(value):
            raise NumericalError(name)
    return roo + beta * rooacr, {"L_ref_roo": float(roo.detach()), "L_ref_rooacr": float(rooacr.detach())}
