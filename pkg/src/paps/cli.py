"""Command line entry point: ``paps generate|train|infer|eval|render-overlay``.

Exit codes: 0 success, 1 user error (bad config, bad input files,
vocabulary mismatch), 2 internal error. Failures print one line of the form
``error[CODE] message`` on stderr.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import yaml

from paps.checkpoint import Checkpoint, CheckpointError
from paps.config import ConfigError, load_config
from paps.fusion import FusionConfig
from paps.ideal import scene_to_prediction
from paps.metrics import MetricConfigurationError, evaluate_dataset
from paps.ordering import LayerOverlapError, OrderingError
from paps.predio import read_prediction, summary_lines, write_prediction
from paps.scenegen import (
    SceneFormatError,
    SceneGenerationError,
    SceneValidationError,
    load_dataset,
    read_manifest,
    read_scene,
    write_dataset,
)

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


USER_ERRORS = {
    ConfigError: "CONFIG",
    CheckpointError: "CHECKPOINT",
    SceneFormatError: "FORMAT",
    SceneValidationError: "DATA",
    SceneGenerationError: "GENERATE",
    MetricConfigurationError: "VOCABULARY",
    LayerOverlapError: "DATA",
    OrderingError: "DATA",
    FileNotFoundError: "NOT_FOUND",
}


def _out(path: str | None, cfg_dir: Path) -> Path:
    return Path(path) if path else cfg_dir


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML run config.")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config key.")
preset_option = click.option("--preset", type=click.Choice(["toy", "paper-shape"]), default=None)


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def cli(verbose):
    """Proposal-free amodal panoptic segmentation on synthetic scenes."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@cli.command()
@config_option
@set_option
@preset_option
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--num-scenes", type=int, default=None)
@click.option("--seed", type=int, default=None)
def generate(config_path, overrides, preset, out, num_scenes, seed):
    """Write a synthetic dataset directory."""
    cfg = load_config(config_path, overrides, preset)
    n = num_scenes if num_scenes is not None else cfg.data.num_scenes
    out_dir = _out(out, cfg.output_path() / "data")
    manifest = write_dataset(out_dir, cfg.data.scene_config(cfg.n_layers), n, cfg.seed if seed is None else seed)
    click.echo(f"wrote {len(manifest.scene_files)} scenes to {out_dir}")


def _check_vocabulary(cfg_n_stuff, cfg_n_thing, manifest, what):
    if (manifest.n_stuff, manifest.n_thing) != (cfg_n_stuff, cfg_n_thing):
        raise UserError(
            "VOCABULARY",
            f"{what} has {cfg_n_stuff}+{cfg_n_thing} classes, dataset has {manifest.n_stuff}+{manifest.n_thing}",
        )


@cli.command()
@config_option
@set_option
@preset_option
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--stage", type=click.Choice(["1", "2", "both"]), default="both")
@click.option("--stage1-checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--steps", type=int, default=None, help="Override the step count of every stage run.")
def train(config_path, overrides, preset, data_dir, out, stage, stage1_checkpoint, steps):
    """Two-stage training; stage 2 freezes everything but the refiner."""
    from paps.train import train_stage1, train_stage2

    cfg = load_config(config_path, overrides, preset)
    manifest = read_manifest(data_dir)
    _check_vocabulary(cfg.data.n_stuff, cfg.data.n_thing, manifest, "config")
    if stage == "2" and stage1_checkpoint is None:
        raise UserError("CONFIG", "stage 2 requires --stage1-checkpoint")
    _, scenes = load_dataset(data_dir)
    if scenes and (scenes[0].height, scenes[0].width) != tuple(cfg.crop):
        raise UserError("CONFIG", f"scene size {(scenes[0].height, scenes[0].width)} != crop {tuple(cfg.crop)}")
    out_dir = _out(out, cfg.output_path())
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    if stage in ("1", "both"):
        s1 = train_stage1(cfg, scenes, out_dir, steps=steps).checkpoint
        click.echo(f"stage 1 checkpoint: {out_dir / 'stage1.pckp'}")
    else:
        s1 = Checkpoint.load(stage1_checkpoint)
    if stage in ("2", "both"):
        train_stage2(cfg, scenes, s1, out_dir, steps=steps)
        click.echo(f"stage 2 checkpoint: {out_dir / 'stage2.pckp'}")


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--no-refiner", is_flag=True, help="Skip the refiner even for a stage-2 checkpoint.")
@click.option("--conf-threshold", type=float, default=FusionConfig.conf_threshold)
@click.option("--top-k", type=int, default=FusionConfig.top_k)
def infer(checkpoint, data_dir, out, no_refiner, conf_threshold, top_k):
    """Predict every scene of a dataset; stage-1 checkpoints run without the refiner."""
    from paps.train import model_from_checkpoint, predict

    ckpt = Checkpoint.load(checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    manifest = read_manifest(data_dir)
    _check_vocabulary(cfg.data.n_stuff, cfg.data.n_thing, manifest, "checkpoint")
    use_refiner = ckpt.stage == "stage2" and not no_refiner
    _, scenes = load_dataset(data_dir)
    if use_refiner and scenes and (scenes[0].height, scenes[0].width) != tuple(cfg.crop):
        raise UserError("CONFIG", f"refiner expects {tuple(cfg.crop)} images")
    preds = predict(model, scenes, use_refiner, fusion=FusionConfig(conf_threshold=conf_threshold, top_k=top_k))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"checkpoint={checkpoint} stage={ckpt.stage} refiner={use_refiner}"]
    files = []
    for name, pred in zip(manifest.scene_files, preds):
        stem = Path(name).stem
        write_prediction(pred, out_dir / f"{stem}.appr")
        files.append(f"{stem}.appr")
        lines += summary_lines(stem, pred)
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    (out_dir / "predictions.json").write_text(
        json.dumps({"scene_files": manifest.scene_files, "prediction_files": files, "refiner": use_refiner}, indent=2)
    )
    click.echo(f"wrote {len(preds)} predictions to {out_dir}")


@cli.command("eval")
@click.option("--pred", "pred_dir", type=click.Path(file_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report path (JSON).")
def eval_cmd(pred_dir, data_dir, out):
    """Score predictions against ground truth."""
    manifest, scenes = load_dataset(data_dir)
    listing = Path(pred_dir) / "predictions.json"
    if not listing.exists():
        raise FileNotFoundError(f"no predictions.json in {pred_dir}")
    info = json.loads(listing.read_text())
    if info["scene_files"] != manifest.scene_files:
        raise UserError("DATA", "predictions were made for a different scene list")
    preds = [read_prediction(Path(pred_dir) / f) for f in info["prediction_files"]]
    report = evaluate_dataset(preds, scenes, manifest.n_stuff, manifest.n_thing)
    text = report.to_json()
    if out:
        Path(out).write_text(text)
    click.echo(
        f"APQ={report.APQ:.4f} APC={report.APC:.4f} APQ_S={report.APQ_S:.4f} APQ_T={report.APQ_T:.4f} "
        f"APC_S={report.APC_S:.4f} APC_T={report.APC_T:.4f}"
    )


@cli.command("render-overlay")
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--pred", "pred_dir", type=click.Path(file_okay=False), default=None)
@click.option("--index", type=int, default=0)
@click.option("--n-layers", type=int, default=4)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def render_overlay_cmd(data_dir, pred_dir, index, n_layers, out):
    """PNG panels: image, semantic, inmodal instances, amodal masks by layer."""
    from paps.overlay import render_overlay

    manifest = read_manifest(data_dir)
    if not 0 <= index < len(manifest.scene_files):
        raise UserError("DATA", f"index {index} out of range for {len(manifest.scene_files)} scenes")
    name = manifest.scene_files[index]
    scene = read_scene(Path(data_dir) / name)
    gt = scene_to_prediction(scene, n_layers)
    n_classes = manifest.n_stuff + manifest.n_thing
    if pred_dir:
        pred = read_prediction(Path(pred_dir) / f"{Path(name).stem}.appr")
        render_overlay(out, scene.image, pred, n_classes, n_layers, gt=gt)
    else:
        render_overlay(out, scene.image, gt, n_classes, n_layers)
    click.echo(f"wrote {out}")


def _fail(code: str, message: str, status: int) -> int:
    first = str(message).strip().splitlines()[0] if str(message).strip() else code.lower()
    click.echo(f"error[{code}] {first}", err=True)
    return status


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="paps", standalone_mode=False)
    except UserError as exc:
        return _fail(exc.code, str(exc), EXIT_USER)
    except click.exceptions.Abort:
        return _fail("ABORTED", "aborted", EXIT_USER)
    except click.ClickException as exc:
        return _fail("USAGE", exc.format_message(), EXIT_USER)
    except tuple(USER_ERRORS) as exc:
        code = next(c for t, c in USER_ERRORS.items() if isinstance(exc, t))
        return _fail(code, str(exc), EXIT_USER)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports everything
        from paps.train import TrainingDiverged

        if isinstance(exc, TrainingDiverged):
            return _fail("DIVERGED", str(exc), EXIT_INTERNAL)
        return _fail("INTERNAL", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
