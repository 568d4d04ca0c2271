"""Two-stage training, inference and evaluation on in-memory scenes."""

from __future__ import annotations

import json
import logging
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from paps.checkpoint import Checkpoint, CheckpointError
from paps.config import RunConfig, config_from_dict
from paps.fusion import FusionConfig, HeadOutputs, fuse, group_instances, occlusion_scores
from paps.metrics import MetricReport, evaluate_dataset
from paps.model.losses import BootstrapConfig, NumericalError, compute_losses, refiner_loss
from paps.model.network import PAPSNet
from paps.model.refiner import build_unoccluded_features
from paps.scenegen import AmodalScene, InstanceGT
from paps.targets import TargetConfig, collate, scene_targets

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, term: str, step: int, checkpoint: Path | None):
        super().__init__(f"loss term {term} became non-finite at step {step}; last good checkpoint: {checkpoint}")
        self.term = term
        self.step = step
        self.checkpoint = checkpoint


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """Learning rate for 0-based ``step`` of ``total_steps``."""
    return base_lr * (1.0 - step / total_steps) ** power


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


# --- augmentation ---------------------------------------------------------


def _nearest_index(n_out: int, scale: float, n_in: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) / scale).astype(np.int64), n_in - 1)


def augment_scene(
    scene: AmodalScene, rng: np.random.Generator, scale_range=(0.5, 2.0), flip: bool = True, crop=None
) -> tuple[AmodalScene, np.ndarray]:
    """Random rescale, crop or pad to ``crop``, and horizontal flip.

    Returns the transformed scene and a mask of pixels that came from the
    source image (padding is excluded from the classification losses).
    """
    h, w = scene.height, scene.width
    ch, cw = crop or (h, w)
    s = float(rng.uniform(*scale_range))
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    ys, xs = _nearest_index(nh, nh / h, h), _nearest_index(nw, nw / w, w)

    img = torch.from_numpy(np.ascontiguousarray(scene.image.transpose(2, 0, 1)))[None]
    img = F.interpolate(img, size=(nh, nw), mode="bilinear", align_corners=False)[0].numpy().transpose(1, 2, 0)

    def window(n_src, n_dst):
        if n_src >= n_dst:
            o = int(rng.integers(0, n_src - n_dst + 1))
            return slice(o, o + n_dst), slice(0, n_dst)
        o = int(rng.integers(0, n_dst - n_src + 1))
        return slice(0, n_src), slice(o, o + n_src)

    (sy, dy), (sx, dx) = window(nh, ch), window(nw, cw)
    do_flip = flip and rng.random() < 0.5

    def place(arr, fill):
        out = np.full((ch, cw) + arr.shape[2:], fill, dtype=arr.dtype)
        out[dy, dx] = arr[sy, sx]
        return out[:, ::-1].copy() if do_flip else out

    image = place(img.astype(np.float32), 0.5)
    semantic = place(scene.semantic_map[ys][:, xs], 0)
    valid = place(np.ones((nh, nw), dtype=bool), False)
    instances = []
    for inst in scene.instances:
        am = place(inst.amodal_mask[ys][:, xs], False)
        if not am.any():
            continue
        im = place(inst.inmodal_mask[ys][:, xs], False)
        instances.append(
            InstanceGT(inst.instance_id, inst.class_id, am, im, inst.depth_rank, bool((am & ~im).any()))
        )
    return AmodalScene(image=image, semantic_map=semantic, instances=instances), valid


# --- data -----------------------------------------------------------------


def image_tensor(scenes: list[AmodalScene]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image.transpose(2, 0, 1) for s in scenes]).astype(np.float32))


def sample_targets(scene: AmodalScene, cfg: RunConfig, valid: np.ndarray | None = None) -> dict:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t = scene_targets(scene, cfg.data.n_stuff, cfg.n_layers, TargetConfig(sigma=cfg.train.sigma, small_instance_area=cfg.train.small_instance_area))
    if valid is not None:
        t["pixel_weights"] = t["pixel_weights"] * torch.from_numpy(valid.astype(np.float32))
    return t


class BatchSampler:
    """Seeded shuffled batches of augmented scenes with their targets."""

    def __init__(self, scenes: list[AmodalScene], cfg: RunConfig, seed: int, augment: bool = True):
        self.scenes = scenes
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.augment = augment
        self.order: list[int] = []

    def next(self):
        b = self.cfg.train.batch_size
        picked = []
        while len(picked) < b:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.scenes)))
            picked.append(self.scenes[self.order.pop()])
        items, targets = [], []
        for scene in picked:
            if self.augment:
                scene, valid = augment_scene(
                    scene, self.rng, self.cfg.train.scale_range, self.cfg.train.flip, self.cfg.crop
                )
            else:
                valid = None
            items.append(scene)
            targets.append(sample_targets(scene, self.cfg, valid))
        return image_tensor(items), collate(targets)


# --- refiner inputs ---------------------------------------------------------


def unoccluded_features(outputs: dict, feats: dict, fusion: FusionConfig | None = None) -> torch.Tensor:
    """Offset features masked to instances the model itself predicts as unoccluded."""
    fusion = fusion or FusionConfig()
    per_image = []
    for i in range(feats["offset_features"].shape[0]):
        head = HeadOutputs.from_batch(outputs, i)
        _, _, id_map, cands, _ = group_instances(head, fusion)
        per_image.append(
            build_unoccluded_features(
                id_map, occlusion_scores(cands), feats["offset_features"][i], fusion.occlusion_threshold
            )
        )
    return torch.stack(per_image)


# --- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: PAPSNet
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)


def build_model(cfg: RunConfig, use_refiner: bool = True) -> PAPSNet:
    return PAPSNet(cfg.model_config(use_refiner=use_refiner))


def _write_history(path: Path | None, rows: list[dict]) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def train_stage1(
    cfg: RunConfig,
    scenes: list[AmodalScene],
    out_dir: Path | None = None,
    eval_scenes: list[AmodalScene] | None = None,
    steps: int | None = None,
) -> TrainResult:
    seed_everything(cfg.seed, cfg.deterministic)
    model = build_model(cfg, use_refiner=True)
    params = [p for _, p in model.stage1_parameters()]
    opt = torch.optim.Adam(params, lr=cfg.train.lr)
    total = steps if steps is not None else cfg.train.stage1_steps
    sampler = BatchSampler(scenes, cfg, seed=cfg.seed + 1, augment=cfg.train.augment)
    history: list[dict] = []
    snapshot = _Snapshot(model)
    mining = BootstrapConfig(warmup_steps=cfg.train.bootstrap_warmup)
    model.train()
    for step in range(total):
        lr = poly_lr(cfg.train.lr, step, total, cfg.train.poly_power)
        for g in opt.param_groups:
            g["lr"] = lr
        images, targets = sampler.next()
        outputs, _ = model(images)
        try:
            report = compute_losses(outputs, targets, bootstrap=BootstrapConfig(mining.fraction(step)))
        except NumericalError as exc:
            last_good = _save_last_good(model, cfg, "stage1", out_dir, snapshot.restore(step))
            raise TrainingDiverged(exc.term, step, last_good) from exc
        if step % cfg.train.log_every == 0:
            snapshot.take(step)
        opt.zero_grad()
        report.total.backward()
        opt.step()
        if step % cfg.train.log_every == 0 or step == total - 1:
            row = {"stage": 1, "step": step, "lr": lr, "loss": float(report.total.detach()), **report.as_floats()}
            history.append(row)
            log.info("stage1 step %d loss %.4f", step, row["loss"])
        if out_dir is not None and cfg.train.checkpoint_every and (step + 1) % cfg.train.checkpoint_every == 0:
            _checkpoint(model, cfg, "stage1", meta={"step": step + 1}).save(out_dir / "stage1.pckp")
        if eval_scenes and cfg.train.eval_every and (step + 1) % cfg.train.eval_every == 0:
            rep = evaluate_model(model, eval_scenes, cfg, use_refiner=False)
            history.append({"stage": 1, "step": step + 1, "APQ": rep.APQ, "APC": rep.APC})
            model.train()
    ckpt = _checkpoint(model, cfg, "stage1", meta={"step": total})
    if out_dir is not None:
        ckpt.save(out_dir / "stage1.pckp")
        _write_history(out_dir / "history_stage1.jsonl", history)
    return TrainResult(model, ckpt, history)


def train_stage2(
    cfg: RunConfig,
    scenes: list[AmodalScene],
    stage1: Checkpoint,
    out_dir: Path | None = None,
    steps: int | None = None,
) -> TrainResult:
    if stage1.stage != "stage1":
        raise CheckpointError(f"stage 2 needs a stage-1 checkpoint, got {stage1.stage!r}")
    seed_everything(cfg.seed + 7, cfg.deterministic)
    model = build_model(cfg, use_refiner=True)
    model.load_state_dict(stage1.state_dict())
    frozen = []
    for name, p in model.stage1_parameters():
        p.requires_grad_(False)
        frozen.append(name)
    opt = torch.optim.Adam([p for _, p in model.refiner_parameters()], lr=cfg.train.lr)
    total = steps if steps is not None else cfg.train.stage2_steps
    sampler = BatchSampler(scenes, cfg, seed=cfg.seed + 2, augment=cfg.train.augment)
    history: list[dict] = []
    snapshot = _Snapshot(model)
    model.eval()
    model.refiner.train()
    for step in range(total):
        lr = poly_lr(cfg.train.lr, step, total, cfg.train.poly_power)
        for g in opt.param_groups:
            g["lr"] = lr
        images, targets = sampler.next()
        with torch.no_grad():
            outputs, feats = model(images)
            unocc = unoccluded_features(outputs, feats)
        refined = model.refine(feats["amodal_features"], unocc)
        try:
            loss, parts = refiner_loss(refined, targets)
        except NumericalError as exc:
            last_good = _save_last_good(model, cfg, "stage2", out_dir, snapshot.restore(step), frozen)
            raise TrainingDiverged(exc.term, step, last_good) from exc
        if step % cfg.train.log_every == 0:
            snapshot.take(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % cfg.train.log_every == 0 or step == total - 1:
            history.append({"stage": 2, "step": step, "lr": lr, "loss": float(loss.detach()), **parts})
            log.info("stage2 step %d loss %.4f", step, float(loss.detach()))
    ckpt = _checkpoint(model, cfg, "stage2", frozen=frozen, meta={"step": total})
    if out_dir is not None:
        ckpt.save(out_dir / "stage2.pckp")
        _write_history(out_dir / "history_stage2.jsonl", history)
    return TrainResult(model, ckpt, history)


def _checkpoint(model, cfg: RunConfig, stage: str, frozen=(), meta=None) -> Checkpoint:
    return Checkpoint.from_model(model, cfg.to_dict(), stage, frozen, meta)


class _Snapshot:
    """Copy of the weights at the last step whose loss was finite."""

    def __init__(self, model):
        self.model = model
        self.step = 0
        self.state = None

    def take(self, step: int) -> None:
        self.step = step
        self.state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def restore(self, step: int) -> int:
        """Step of the weights now in the model: the current ones when finite, else the copy."""
        if all(torch.isfinite(p).all() for p in self.model.parameters()) or self.state is None:
            return step
        self.model.load_state_dict(self.state)
        return self.step


def _save_last_good(model, cfg, stage, out_dir, step, frozen=()) -> Path | None:
    if out_dir is None:
        return None
    return _checkpoint(model, cfg, stage, frozen, {"step": step, "diverged": True}).save(
        out_dir / f"{stage}_last_good.pckp"
    )


# --- inference ----------------------------------------------------------------


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[PAPSNet, RunConfig]:
    cfg = config_from_dict(ckpt.config)
    model = build_model(cfg, use_refiner=True)
    model.load_state_dict(ckpt.state_dict())
    model.eval()
    return model, cfg


@torch.no_grad()
def predict(
    model: PAPSNet,
    scenes: list[AmodalScene],
    use_refiner: bool = False,
    batch_size: int = 8,
    fusion: FusionConfig | None = None,
):
    fusion = fusion or FusionConfig()
    model.eval()
    preds = []
    for s in range(0, len(scenes), batch_size):
        chunk = scenes[s : s + batch_size]
        outputs, feats = model(image_tensor(chunk))
        refined = None
        if use_refiner:
            refined = model.refine(feats["amodal_features"], unoccluded_features(outputs, feats, fusion))
        for i in range(len(chunk)):
            head = HeadOutputs.from_batch(outputs, i)
            if refined is not None:
                head = head.with_refined(refined, i)
            preds.append(fuse(head, fusion))
    return preds


def evaluate_model(model, scenes, cfg: RunConfig, use_refiner: bool = False) -> MetricReport:
    preds = predict(model, scenes, use_refiner=use_refiner)
    return evaluate_dataset(preds, scenes, cfg.data.n_stuff, cfg.data.n_thing)
