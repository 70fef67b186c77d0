"""Training loop: SGD with cosine decay, loss switches, checkpointing, determinism."""

from __future__ import annotations

import copy
import json
import math
import random
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .annotations import DatasetSplit, NoduleRecord
from .ccp import GroupProjector, PromptBuilder
from .config import TrainConfig
from .encoders import AttributeFeatureCache, ImageEncoder, make_text_encoder
from .fixtures import patch_path_for
from .losses import (
    Temperature,
    class_attribute_loss,
    image_attribute_loss,
    image_class_loss,
    total_loss,
)
from .preprocessing import load_patch

FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def lr_schedule(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


class CLIPLungModel(nn.Module):
    """Image encoder + CCP prompt branch + shared temperature.

    The text encoder is frozen (buffers only for the stub); inference uses the
    image encoder and classifier head exclusively.
    """

    def __init__(self, config: TrainConfig, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.image_encoder = ImageEncoder(num_classes)
        self.projector = GroupProjector(config.num_groups)
        self.text_encoder = make_text_encoder(
            config.encoder, seed=config.seed,
            weights_path=config.encoder_weights or None,
        )
        self.prompt_builder = PromptBuilder(
            config.class_names(num_classes), self.text_encoder, config.num_groups
        )
        self.temperature = Temperature(config.tau_init)

    def trainable_parameters(self):
        frozen = {id(p) for p in self.text_encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    def forward(self, images: torch.Tensor):
        return self.image_encoder(images)


def compute_batch_loss(model: CLIPLungModel, images, labels, weights, config: TrainConfig):
    """One forward pass; returns (total tensor, LossBreakdown)."""
    maps, pooled, logits = model.image_encoder(images)
    ce = F.cross_entropy(logits, labels)

    need_class_feats = config.loss_ic or config.loss_ca
    need_grouped = need_class_feats or config.loss_ia
    grouped = model.projector(maps) if need_grouped else None
    class_feats = (
        model.prompt_builder.class_features(grouped, model.text_encoder)
        if need_class_feats else None
    )
    attr_feats = None
    if config.loss_ia or config.loss_ca:
        attr_feats = encode_attribute_features(model).to(images.dtype)

    zero = torch.zeros((), dtype=ce.dtype)
    ic = (
        image_class_loss(grouped, class_feats, labels, model.temperature)
        if config.loss_ic else zero
    )
    ia = (
        image_attribute_loss(grouped, attr_feats, weights, model.temperature,
                             mode=config.attribute_weighting)
        if config.loss_ia else zero
    )
    ca = (
        class_attribute_loss(class_feats, attr_feats, weights, model.temperature,
                             mode=config.attribute_weighting)
        if config.loss_ca else zero
    )
    return total_loss(ce, ic, ia, ca, alpha=config.alpha, beta=config.beta)


_ATTR_CACHE = AttributeFeatureCache()


def encode_attribute_features(model: CLIPLungModel) -> torch.Tensor:
    return _ATTR_CACHE.get(model.text_encoder)


def load_split_tensors(split_records: list[NoduleRecord], data_dir):
    """Stack patch files into (N, 32, 32, 32) images, labels deferred to caller."""
    patches = [load_patch(patch_path_for(r, data_dir)) for r in split_records]
    return torch.from_numpy(np.stack(patches)).float()


def _carve_validation(split: DatasetSplit, fraction: float, seed: int):
    patients = sorted({r.patient_id for r in split.train})
    rng = random.Random(seed + 1)
    rng.shuffle(patients)
    n_val = max(1, int(round(len(patients) * fraction))) if fraction > 0 else 0
    val_patients = set(patients[:n_val])
    train = [r for r in split.train if r.patient_id not in val_patients]
    val = [r for r in split.train if r.patient_id in val_patients]
    if not train:
        raise TrainingError("validation carve left no training records")
    return train, val


@torch.no_grad()
def predict_logits(model, images: torch.Tensor) -> torch.Tensor:
    """Inference path: image encoder and classifier head only."""
    was_training = model.training
    model.eval()
    encoder = model.image_encoder if isinstance(model, CLIPLungModel) else model
    _, _, logits = encoder(images)
    if was_training:
        model.train()
    return logits


def _accuracy(model, images, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    preds = predict_logits(model, images).argmax(dim=1)
    return float((preds == labels).float().mean())


def train(config: TrainConfig, split: DatasetSplit, data_dir, out_dir):
    """Run the full optimization and write checkpoint.pt, logs.jsonl, and history.

    Deterministic given config + seed. The best-by-validation-accuracy state is
    what ends up in the checkpoint; a non-finite loss aborts after saving the
    last finite-state checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(config.seed)

    train_records, val_records = _carve_validation(split, config.val_fraction, config.seed)
    present = {split.label_of(r) for r in train_records}
    if present != set(range(split.num_classes)):
        raise TrainingError(
            f"classes {sorted(set(range(split.num_classes)) - present)} absent from train set"
        )

    images = load_split_tensors(train_records, data_dir)
    labels = torch.tensor([split.label_of(r) for r in train_records], dtype=torch.long)
    weights = torch.tensor([r.weights for r in train_records], dtype=torch.float32)
    val_images = (
        load_split_tensors(val_records, data_dir) if val_records else torch.empty(0)
    )
    val_labels = torch.tensor([split.label_of(r) for r in val_records], dtype=torch.long)

    model = CLIPLungModel(config, split.num_classes)
    text_checksum_before = model.text_encoder.checksum()
    params = model.trainable_parameters()
    optimizer = torch.optim.SGD(
        params, lr=config.lr0, momentum=config.momentum, weight_decay=config.weight_decay
    )

    n = len(train_records)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    gen = torch.Generator().manual_seed(config.seed)

    log_path = out_dir / "logs.jsonl"
    history = []
    best = {"val_accuracy": -1.0, "state": None, "epoch": -1}
    last_good_state = copy.deepcopy(model.state_dict())
    step = 0
    t0 = time.monotonic()

    with log_path.open("w", encoding="utf-8") as log:
        for epoch in range(config.epochs):
            model.train()
            order = torch.randperm(n, generator=gen)
            epoch_total = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                batch_images = images[idx]
                if config.augment_flips:
                    flips = torch.rand(2, generator=gen)
                    if flips[0] < 0.5:
                        batch_images = batch_images.flip(2)
                    if flips[1] < 0.5:
                        batch_images = batch_images.flip(3)
                lr = lr_schedule(step, total_steps, config.lr0)
                for group in optimizer.param_groups:
                    group["lr"] = lr

                optimizer.zero_grad()
                total, breakdown = compute_batch_loss(
                    model, batch_images, labels[idx], weights[idx], config
                )
                if not math.isfinite(breakdown.total):
                    save_checkpoint(
                        out_dir / "last_good.pt", config, split, last_good_state,
                        text_checksum_before, history,
                    )
                    raise TrainingError(
                        f"non-finite loss at step {step}: {breakdown.as_dict()}; "
                        f"last good state saved to {out_dir / 'last_good.pt'}"
                    )
                total.backward()
                optimizer.step()
                last_good_state = copy.deepcopy(model.state_dict())

                record = {
                    "step": step, "epoch": epoch, "lr": lr,
                    "tau": float(model.temperature.value.detach()),
                    **breakdown.as_dict(),
                }
                log.write(json.dumps(record) + "\n")
                epoch_total += breakdown.total
                step += 1

            val_acc = _accuracy(model, val_images, val_labels) if val_records else None
            epoch_rec = {
                "epoch": epoch,
                "mean_total": epoch_total / steps_per_epoch,
                "val_accuracy": val_acc,
            }
            history.append(epoch_rec)
            log.write(json.dumps({"epoch_summary": epoch_rec}) + "\n")
            score = val_acc if val_acc is not None else -epoch_rec["mean_total"]
            if score >= best["val_accuracy"]:
                best = {
                    "val_accuracy": score,
                    "state": copy.deepcopy(model.state_dict()),
                    "epoch": epoch,
                }

    text_checksum_after = model.text_encoder.checksum()
    if text_checksum_after != text_checksum_before:
        raise TrainingError("frozen text encoder changed during training")

    model.load_state_dict(best["state"])
    ckpt_path = out_dir / "checkpoint.pt"
    save_checkpoint(ckpt_path, config, split, model.state_dict(),
                    text_checksum_after, history,
                    extra={"best_epoch": best["epoch"],
                           "wall_seconds": time.monotonic() - t0})
    return ckpt_path, history


def save_checkpoint(path, config: TrainConfig, split, state_dict, text_checksum,
                    history=None, extra=None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "config": config.as_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "variant": split.variant if split is not None else None,
        "fold_index": split.fold_index if split is not None else None,
        "num_classes": split.num_classes if split is not None else None,
        "text_encoder_checksum": text_checksum,
        "model_state": state_dict,
        "history": history or [],
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_checkpoint(path, *, force: bool = False, expect: dict | None = None):
    """Rebuild the model from a checkpoint; returns (model, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = TrainConfig(**payload["config"])
    if not force and config.config_hash() != payload["config_hash"]:
        raise CheckpointError(
            f"{path}: config hash mismatch (stored {payload['config_hash'][:12]}, "
            f"recomputed {config.config_hash()[:12]}); pass force=True to override"
        )
    for key, expected in (expect or {}).items():
        actual = payload["config"].get(key, payload.get(key))
        if actual != expected:
            raise CheckpointError(
                f"{path}: checkpoint {key}={actual!r} does not match expected {expected!r}"
            )
    model = CLIPLungModel(config, payload["num_classes"])
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload


def strip_text_branch(payload: dict) -> dict:
    """Image-only checkpoint: encoder + classifier head, nothing from the text branch."""
    prefix = "image_encoder."
    state = {
        key[len(prefix):]: value
        for key, value in payload["model_state"].items()
        if key.startswith(prefix)
    }
    return {
        "format_version": payload["format_version"],
        "num_classes": payload["num_classes"],
        "image_state": state,
    }


def load_image_only(payload: dict) -> ImageEncoder:
    encoder = ImageEncoder(payload["num_classes"])
    encoder.load_state_dict(payload["image_state"])
    encoder.eval()
    return encoder
