"""Grad-CAM heatmaps and 2-D embedding projections of pooled features."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .preprocessing import PATCH_SIDE


class ExplainError(ValueError):
    pass


def grad_cam(encoder, image: torch.Tensor, target_class: int) -> np.ndarray:
    """Class-gradient-weighted activation map over the last conv stage.

    Returns a 32x32 float array in [0, 1] (all zeros when activations vanish).
    Only the image branch participates.
    """
    if image.ndim == 3:
        image = image.unsqueeze(0)
    encoder = encoder.image_encoder if hasattr(encoder, "image_encoder") else encoder
    encoder.eval()
    if not 0 <= target_class < encoder.num_classes:
        raise ExplainError(
            f"target class {target_class} outside 0..{encoder.num_classes - 1}"
        )
    image = image.clone().requires_grad_(False)
    maps, _, logits = encoder(image)
    grads = torch.autograd.grad(logits[0, target_class], maps)[0]
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * maps).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=(PATCH_SIDE, PATCH_SIDE), mode="bilinear",
                        align_corners=False)
    cam = cam[0, 0].detach().cpu().numpy()
    lo, hi = float(cam.min()), float(cam.max())
    if hi <= lo:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def save_heatmap_png(heatmap: np.ndarray, slice_2d: np.ndarray, path, meta: dict) -> None:
    """Overlay the heatmap on the central axial slice and write a PNG + sidecar."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(slice_2d, cmap="gray", interpolation="nearest")
    ax.imshow(heatmap, cmap="jet", alpha=0.45, interpolation="bilinear")
    ax.axis("off")
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def embed_projection(pooled: np.ndarray, labels, seed: int = 0, perplexity: float = 15.0):
    """t-SNE projection of pooled features to 2-D, deterministic for a fixed seed.

    Returns (coords (N, 2), params dict recorded in the output sidecar).
    """
    pooled = np.asarray(pooled, dtype=np.float64)
    labels = np.asarray(labels)
    if pooled.ndim != 2 or pooled.shape[0] < 10:
        raise ExplainError(f"need at least 10 samples, got shape {pooled.shape}")
    from sklearn.manifold import TSNE

    effective_perplexity = min(perplexity, (pooled.shape[0] - 1) / 3.0)
    tsne = TSNE(
        n_components=2,
        perplexity=effective_perplexity,
        random_state=seed,
        init="pca",
    )
    coords = tsne.fit_transform(pooled)
    params = {
        "method": "t-SNE",
        "perplexity": effective_perplexity,
        "seed": seed,
        "n_samples": int(pooled.shape[0]),
    }
    return coords, params


def save_projection(coords: np.ndarray, labels, class_names, path, params: dict) -> None:
    """Scatter PNG colored by class, plus a coordinate table and parameter sidecar."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(4, 4))
    labels = np.asarray(labels)
    for k, name in enumerate(class_names):
        mask = labels == k
        ax.scatter(coords[mask, 0], coords[mask, 1], s=12, label=name, alpha=0.8)
    ax.legend(fontsize=7)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)

    table = path.with_suffix(".csv")
    rows = ["x,y,label"] + [f"{x:.6f},{y:.6f},{int(l)}" for (x, y), l in zip(coords, labels)]
    table.write_text("\n".join(rows) + "\n", encoding="utf-8")
    Path(str(path) + ".json").write_text(json.dumps(params, indent=2) + "\n", encoding="utf-8")


def quadrant_mass_fraction(heatmap: np.ndarray, quadrant: int = 0, decile: float = 0.9) -> float:
    """Fraction of top-decile heatmap mass inside one quadrant (0 = low-y/low-x)."""
    h, w = heatmap.shape
    threshold = np.quantile(heatmap, decile)
    top = np.where(heatmap >= threshold, heatmap, 0.0)
    total = top.sum()
    if total == 0:
        return 0.0
    ys = slice(0, h // 2) if quadrant in (0, 1) else slice(h // 2, h)
    xs = slice(0, w // 2) if quadrant in (0, 2) else slice(w // 2, w)
    return float(top[ys, xs].sum() / total)
