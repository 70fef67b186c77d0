"""Command-line entry point wiring all pipeline stages through file artifacts."""

from __future__ import annotations

import json
import subprocess
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .annotations import (
    AnnotationError,
    SplitError,
    VARIANTS,
    build_split,
    load_annotation_table,
    load_split_manifest,
    save_split_manifest,
)
from .config import ConfigError, TrainConfig, load_config, with_loss_switches
from .evaluation import (
    EvaluationError,
    aggregate_folds,
    confusion_matrix,
    per_class_metrics,
    render_table,
    save_report,
)
from .explain import ExplainError, embed_projection, grad_cam, quadrant_mass_fraction, save_heatmap_png, save_projection
from .fixtures import gen_fixture, patch_path_for
from .losses import LossError
from .preprocessing import PreprocessError, extract_patch, load_patch, save_patch
from .training import (
    CheckpointError,
    TrainingError,
    load_checkpoint,
    load_split_tensors,
    predict_logits,
    train,
)

VALIDATION_ERRORS = (
    AnnotationError, SplitError, PreprocessError, ConfigError,
    LossError, EvaluationError, ExplainError, CheckpointError,
    click.UsageError, FileNotFoundError, ValueError,
)


def _version_string() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        if described.returncode == 0:
            return f"{__version__}+{described.stdout.strip()}"
    except OSError:
        pass
    return __version__


def write_manifest(out_dir, command: str, config: TrainConfig | None, seed, t0: float) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": _version_string(),
        "seed": seed,
        "config_hash": config.config_hash() if config else None,
        "config": config.as_dict() if config else None,
        "wall_seconds": round(time.monotonic() - t0, 3),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n",
                                           encoding="utf-8")


class PipelineGroup(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except VALIDATION_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except click.exceptions.Exit:
            raise
        except Exception as exc:  # runtime failure
            click.echo(f"runtime failure: {exc}", err=True)
            sys.exit(2)


@click.group(cls=PipelineGroup)
@click.version_option(version=__version__)
def main():
    """Lung-nodule malignancy training and evaluation pipeline."""


@main.command("gen-fixtures")
@click.option("--n", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--quadrant-lesion", is_flag=True, help="Offset blobs into a known patch quadrant.")
def gen_fixtures_cmd(n, seed, out_dir, quadrant_lesion):
    """Generate a synthetic nodule dataset (volumes, annotation table, patches)."""
    t0 = time.monotonic()
    records = gen_fixture(n, seed, out_dir, quadrant_lesion=quadrant_lesion)
    write_manifest(out_dir, "gen-fixtures", None, seed, t0)
    click.echo(f"wrote {len(records)} nodules to {out_dir}")


@main.command("prepare-data")
@click.option("--annotations", "table", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--spacing", default="1,1,1", show_default=True,
              help="Voxel spacing in mm as z,y,x.")
def prepare_data_cmd(table, out_dir, seed, spacing):
    """Crop, resample, and normalize patches; emit split manifests for all variants."""
    t0 = time.monotonic()
    out_dir = Path(out_dir)
    spacing = tuple(float(s) for s in spacing.split(","))
    if len(spacing) != 3:
        raise ConfigError(f"spacing must have 3 components, got {spacing}")
    records = load_annotation_table(table)
    patches_dir = out_dir / "patches"
    patches_dir.mkdir(parents=True, exist_ok=True)
    table_dir = Path(table).parent
    for record in records:
        volume_path = Path(record.volume_path)
        if not volume_path.is_absolute():
            volume_path = table_dir / volume_path
        volume = np.load(volume_path)
        patch = extract_patch(volume, spacing, record.center_voxel, record.equiv_diameter_mm)
        save_patch(patch, patches_dir / f"{record.nodule_id}.bin", record.nodule_id)
    splits_dir = out_dir / "splits"
    splits_dir.mkdir(parents=True, exist_ok=True)
    for variant in VARIANTS:
        for fold in range(5):
            split = build_split(records, variant, fold, seed)
            save_split_manifest(split, splits_dir / f"{variant}-fold{fold}.json")
    write_manifest(out_dir, "prepare-data", None, seed, t0)
    click.echo(f"prepared {len(records)} patches and split manifests in {out_dir}")


def _config_from_options(config_path, **overrides) -> TrainConfig:
    return load_config(config_path, overrides)


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--annotations", "table", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True),
              help="Directory holding patches/ from prepare-data or gen-fixtures.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--variant", type=click.Choice(["A", "B", "C"]))
@click.option("--fold", type=int)
@click.option("--seed", type=int)
@click.option("--epochs", type=int)
@click.option("--batch-size", type=int)
def train_cmd(config_path, table, data_dir, out_dir, variant, fold, seed, epochs, batch_size):
    """Train one fold and write checkpoint.pt plus step logs."""
    t0 = time.monotonic()
    overrides = {
        "variant": f"LIDC-{variant}" if variant else None,
        "fold": fold, "seed": seed, "epochs": epochs, "batch_size": batch_size,
    }
    config = _config_from_options(config_path, **overrides)
    records = load_annotation_table(table)
    split = build_split(records, config.variant, config.fold, config.seed)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    save_split_manifest(split, Path(out_dir) / "split.json")
    ckpt_path, history = train(config, split, data_dir, out_dir)
    write_manifest(out_dir, "train", config, config.seed, t0)
    click.echo(f"checkpoint: {ckpt_path} (final mean loss {history[-1]['mean_total']:.4f})")


def _evaluate_checkpoint(ckpt_path, split, data_dir):
    model, payload = load_checkpoint(ckpt_path)
    images = load_split_tensors(split.test, data_dir)
    labels = [split.label_of(r) for r in split.test]
    preds = predict_logits(model, images).argmax(dim=1).tolist()
    cm = confusion_matrix(preds, labels, payload["num_classes"])
    return per_class_metrics(cm), payload


@main.command("evaluate")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", required=True, type=click.Path(exists=True))
@click.option("--annotations", "table", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def evaluate_cmd(ckpt_path, split_path, table, data_dir, out_dir):
    """Evaluate a checkpoint on a split manifest and write a metrics report."""
    t0 = time.monotonic()
    records = load_annotation_table(table)
    split = load_split_manifest(split_path, records)
    metrics, payload = _evaluate_checkpoint(ckpt_path, split, data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = aggregate_folds([metrics], split.variant, allow_partial=True)
    save_report(report, out_dir / "report.json")
    config = TrainConfig(**payload["config"])
    click.echo(render_table(report, config.class_names(payload["num_classes"])))
    write_manifest(out_dir, "evaluate", config, payload["seed"], t0)


@main.command("ablate")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--annotations", "table", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--epochs", type=int)
def ablate_cmd(config_path, table, data_dir, out_dir, epochs):
    """Run the loss-switch ablation grid and tabulate test accuracy per row."""
    t0 = time.monotonic()
    base = _config_from_options(config_path, epochs=epochs)
    records = load_annotation_table(table)
    split = build_split(records, base.variant, base.fold, base.seed)
    grid = [  # (ic, ia, ca) rows of the ablation table
        (True, False, False),
        (True, True, False),
        (False, True, True),
        (True, False, True),
        (True, True, True),
    ]
    out_dir = Path(out_dir)
    results = []
    for ic, ia, ca in grid:
        config = with_loss_switches(base, ic, ia, ca)
        row_dir = out_dir / f"ic{int(ic)}_ia{int(ia)}_ca{int(ca)}"
        ckpt_path, _ = train(config, split, data_dir, row_dir)
        metrics, _ = _evaluate_checkpoint(ckpt_path, split, data_dir)
        results.append({"ic": ic, "ia": ia, "ca": ca, "accuracy": metrics.accuracy})
        click.echo(f"ic={int(ic)} ia={int(ia)} ca={int(ca)} accuracy={metrics.accuracy:.1f}")
    (out_dir / "ablation.json").write_text(json.dumps(results, indent=2) + "\n",
                                           encoding="utf-8")
    write_manifest(out_dir, "ablate", base, base.seed, t0)


@main.command("explain")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--nodule", "nodule_id", required=True)
@click.option("--class", "target_class", required=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
def explain_cmd(ckpt_path, data_dir, nodule_id, target_class, out_dir):
    """Write a Grad-CAM heatmap PNG for one nodule."""
    t0 = time.monotonic()
    model, payload = load_checkpoint(ckpt_path)
    patch = load_patch(Path(data_dir) / "patches" / f"{nodule_id}.bin")
    image = torch.from_numpy(patch).float()
    heatmap = grad_cam(model, image, target_class)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "nodule_id": nodule_id,
        "target_class": target_class,
        "quadrant_mass": {str(q): quadrant_mass_fraction(heatmap, q) for q in range(4)},
    }
    save_heatmap_png(heatmap, patch[patch.shape[0] // 2], out_dir / f"{nodule_id}_cam.png", meta)
    np.save(out_dir / f"{nodule_id}_cam.npy", heatmap)
    write_manifest(out_dir, "explain", None, payload["seed"], t0)
    click.echo(f"heatmap written to {out_dir / f'{nodule_id}_cam.png'}")


@main.command("project")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--split", "split_path", required=True, type=click.Path(exists=True))
@click.option("--annotations", "table", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
def project_cmd(ckpt_path, split_path, table, data_dir, out_dir, seed):
    """t-SNE scatter of pooled test features colored by class."""
    t0 = time.monotonic()
    model, payload = load_checkpoint(ckpt_path)
    records = load_annotation_table(table)
    split = load_split_manifest(split_path, records)
    images = load_split_tensors(split.test, data_dir)
    with torch.no_grad():
        _, pooled, _ = model.image_encoder(images)
    labels = [split.label_of(r) for r in split.test]
    coords, params = embed_projection(pooled.numpy(), labels, seed=seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = TrainConfig(**payload["config"])
    save_projection(coords, labels, config.class_names(payload["num_classes"]),
                    out_dir / "projection.png", params)
    write_manifest(out_dir, "project", config, seed, t0)
    click.echo(f"projection written to {out_dir / 'projection.png'}")


if __name__ == "__main__":
    main()
