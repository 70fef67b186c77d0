"""Deterministic synthetic nodule generator for desk-scale runs and tests."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .annotations import CSV_COLUMNS, NoduleRecord, load_annotation_table
from .preprocessing import extract_patch, save_patch

VOLUME_SIDE = 64
SPACING = (1.0, 1.0, 1.0)
BACKGROUND_HU = -900.0
NODULES_PER_PATIENT = 3


def _clamp(x, lo, hi):
    return float(min(max(x, lo), hi))


def _synthesize_volume(rng, center, radius, peak_hu, n_spikes, edge_sharpness):
    """Gaussian ellipsoid blob plus radial spikes on a noisy lung-like background."""
    grid = np.indices((VOLUME_SIDE,) * 3, dtype=np.float64)
    delta = grid - np.asarray(center, dtype=np.float64).reshape(3, 1, 1, 1)
    dist = np.sqrt((delta ** 2).sum(axis=0))
    axes = radius * (1.0 + rng.uniform(-0.15, 0.15, size=3))
    ellip = np.sqrt(((delta / axes.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
    blob = np.exp(-0.5 * (ellip * edge_sharpness) ** 2)

    spikes = np.zeros_like(blob)
    if n_spikes > 0:
        directions = rng.standard_normal((n_spikes, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        unit = np.divide(delta, np.maximum(dist, 1e-9), out=np.zeros_like(delta), where=dist > 0)
        for d in directions:
            align = (unit * d.reshape(3, 1, 1, 1)).sum(axis=0)
            ray = np.exp(-0.5 * ((1.0 - align) / 0.02) ** 2)
            radial = np.exp(-0.5 * ((dist - 1.4 * radius) / (0.5 * radius)) ** 2)
            spikes = np.maximum(spikes, 0.7 * ray * radial)

    intensity = np.maximum(blob, spikes)
    volume = BACKGROUND_HU + rng.normal(0.0, 20.0, size=intensity.shape)
    return (volume + (peak_hu - BACKGROUND_HU) * intensity).astype(np.float32)


def gen_fixture(n: int, seed: int, out_dir, *, quadrant_lesion: bool = False):
    """Generate n synthetic nodules: volumes, annotation table, and patch files.

    Malignancy score drives blob size, brightness, spike count, and edge
    sharpness, so the patches carry real learnable signal; the eight attribute
    values are sampled around score-linked means. With quadrant_lesion the
    annotated center is offset so the blob lands in the low-y/low-x patch
    quadrant, recorded per nodule in the sidecar.

    Returns the parsed records (re-read through the CSV loader, so the fixture
    always passes schema validation).
    """
    if n < 30:
        raise ValueError(f"fixture needs n >= 30, got {n}")
    out_dir = Path(out_dir)
    volumes_dir = out_dir / "volumes"
    patches_dir = out_dir / "patches"
    volumes_dir.mkdir(parents=True, exist_ok=True)
    patches_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        u = rng.uniform()
        if u < 0.4:  # benign
            score = rng.uniform(1.0, 2.4)
        elif u < 0.7:  # unsure
            score = rng.uniform(2.5, 3.5)
        else:  # malignant
            score = rng.uniform(3.6, 5.0)

        radius = 2.5 + 1.3 * (score - 1.0) + rng.uniform(-0.3, 0.3)
        peak_hu = -450.0 + 160.0 * (score - 1.0) + rng.normal(0.0, 30.0)
        spiculation = _clamp(1.0 + 0.85 * (score - 1.0) + rng.normal(0.0, 0.35), 1.0, 5.0)
        lobulation = _clamp(1.0 + 0.8 * (score - 1.0) + rng.normal(0.0, 0.35), 1.0, 5.0)
        n_spikes = int(round((spiculation - 1.0) * 2.0))
        # benign: sharp compact core; malignant: diffuse halo filling the crop
        edge_sharpness = _clamp(3.0 - 0.5 * (score - 1.0), 1.0, 3.0)

        attrs = {
            "subtlety": _clamp(1.5 + 0.6 * (score - 1.0) + rng.normal(0.0, 0.4), 1.0, 5.0),
            "internal_structure": _clamp(1.0 + rng.normal(0.3, 0.3), 1.0, 5.0),
            "calcification": _clamp(6.0 - 0.4 * (score - 1.0) + rng.normal(0.0, 0.5), 1.0, 6.0),
            "sphericity": _clamp(4.5 - 0.4 * (score - 1.0) + rng.normal(0.0, 0.4), 1.0, 5.0),
            "margin": _clamp(5.0 - 0.7 * (score - 1.0) + rng.normal(0.0, 0.4), 1.0, 5.0),
            "lobulation": lobulation,
            "spiculation": spiculation,
            "texture": _clamp(3.0 + 0.4 * (score - 1.0) + rng.normal(0.0, 0.4), 1.0, 5.0),
        }

        # keep the whole crop inside the scan: zero padding reads as 0 HU,
        # brighter than lung background, and would dominate the patch
        safe = int(np.ceil(2.0 * radius + (1.5 * radius if quadrant_lesion else 0.0))) + 2
        blob_center = rng.integers(safe, VOLUME_SIDE - safe, size=3)
        if quadrant_lesion:
            # annotated center sits +1.5r in y and x so the blob (radius 8 px in
            # patch space, center at (4, 4)) stays inside the low-y/low-x quadrant
            offset = int(round(1.5 * radius))
            annotated = (
                int(blob_center[0]),
                min(int(blob_center[1]) + offset, VOLUME_SIDE - 1),
                min(int(blob_center[2]) + offset, VOLUME_SIDE - 1),
            )
        else:
            annotated = tuple(int(c) for c in blob_center)

        volume = _synthesize_volume(rng, blob_center, radius, peak_hu, n_spikes, edge_sharpness)
        nodule_id = f"N{i:04d}"
        patient_id = f"P{i // NODULES_PER_PATIENT:04d}"
        volume_path = volumes_dir / f"{nodule_id}.npy"
        np.save(volume_path, volume)
        rel_volume_path = f"volumes/{nodule_id}.npy"  # relative to the table, keeps outputs byte-identical

        equiv_diameter = 2.0 * radius
        rows.append({
            "nodule_id": nodule_id,
            "patient_id": patient_id,
            "volume_path": rel_volume_path,
            "center_z": annotated[0],
            "center_y": annotated[1],
            "center_x": annotated[2],
            "equiv_diameter_mm": round(equiv_diameter, 3),
            "malignancy": round(score, 3),
            "subtlety": round(attrs["subtlety"], 3),
            "internal_structure": round(attrs["internal_structure"], 3),
            "calcification": round(attrs["calcification"], 3),
            "sphericity": round(attrs["sphericity"], 3),
            "margin": round(attrs["margin"], 3),
            "lobulation": round(attrs["lobulation"], 3),
            "spiculation": round(attrs["spiculation"], 3),
            "texture": round(attrs["texture"], 3),
        })

        patch = extract_patch(volume, SPACING, annotated, equiv_diameter)
        meta = {"lesion_quadrant": 0} if quadrant_lesion else {}
        save_patch(patch, patches_dir / f"{nodule_id}.bin", nodule_id, meta=meta)

    table_path = out_dir / "annotations.csv"
    with table_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    return load_annotation_table(table_path)


def patch_path_for(record: NoduleRecord, data_dir) -> Path:
    return Path(data_dir) / "patches" / f"{record.nodule_id}.bin"
