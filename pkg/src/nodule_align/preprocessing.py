"""Nodule patch extraction: crop at 2x equivalent diameter, resample to 32^3, normalize."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

PATCH_SIDE = 32
HU_WINDOW = (-1000.0, 400.0)  # standard lung window


class PreprocessError(ValueError):
    pass


def apply_lung_window(volume: np.ndarray, window=HU_WINDOW) -> np.ndarray:
    """Clip Hounsfield units to the lung window and rescale to [0, 1]."""
    lo, hi = window
    return (np.clip(volume.astype(np.float64), lo, hi) - lo) / (hi - lo)


def crop_nodule(
    ct: np.ndarray,
    spacing: tuple[float, float, float],
    center_voxel: tuple[int, int, int],
    equiv_diameter_mm: float,
) -> np.ndarray:
    """Extract a cube of side 2x equivalent diameter centered at the nodule.

    Side length is converted to voxels per axis using the spacing; regions
    outside the scan are zero padded.
    """
    if equiv_diameter_mm <= 0:
        raise PreprocessError(f"equiv_diameter_mm must be positive, got {equiv_diameter_mm}")
    ct = np.asarray(ct)
    if ct.ndim != 3:
        raise PreprocessError(f"expected 3-D volume, got shape {ct.shape}")
    for axis, (c, n) in enumerate(zip(center_voxel, ct.shape)):
        if not 0 <= c < n:
            raise PreprocessError(
                f"center {center_voxel} outside volume shape {ct.shape} on axis {axis}"
            )

    side_mm = 2.0 * equiv_diameter_mm
    sides = [max(2, int(round(side_mm / s))) for s in spacing]
    out = np.zeros(sides, dtype=ct.dtype)
    starts = [c - side // 2 for c, side in zip(center_voxel, sides)]
    for_src = []
    for_dst = []
    for start, side, n in zip(starts, sides, ct.shape):
        src_lo = max(start, 0)
        src_hi = min(start + side, n)
        if src_lo >= src_hi:
            return out
        for_src.append(slice(src_lo, src_hi))
        for_dst.append(slice(src_lo - start, src_hi - start))
    out[tuple(for_dst)] = ct[tuple(for_src)]
    return out


def trilinear_resize(cube: np.ndarray, out_shape: tuple[int, int, int]) -> np.ndarray:
    """Trilinear resampling with endpoint-aligned coordinates.

    Output index i on an axis of input length n and output length m samples
    the input at i * (n - 1) / (m - 1).
    """
    cube = np.asarray(cube, dtype=np.float64)
    if cube.ndim != 3:
        raise PreprocessError(f"expected 3-D cube, got shape {cube.shape}")
    if any(n < 2 for n in cube.shape):
        raise PreprocessError(f"degenerate cube shape {cube.shape}: every axis needs >= 2 voxels")

    out = cube
    for axis, m in enumerate(out_shape):
        n = out.shape[axis]
        coords = np.arange(m, dtype=np.float64) * (n - 1) / (m - 1)
        lo = np.minimum(coords.astype(np.int64), n - 2)
        frac = coords - lo
        a = np.take(out, lo, axis=axis)
        b = np.take(out, lo + 1, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = m
        frac = frac.reshape(shape)
        out = a * (1.0 - frac) + b * frac
    return out


def resize_to_cube32(cube: np.ndarray) -> np.ndarray:
    """Resample a cropped cube to 32^3 and min-max normalize to [0, 1].

    Constant cubes are returned constant (value clamped to [0, 1]) instead of
    dividing by a zero range.
    """
    resized = trilinear_resize(cube, (PATCH_SIDE,) * 3)
    vmin = float(resized.min())
    vmax = float(resized.max())
    if not np.isfinite([vmin, vmax]).all():
        raise PreprocessError("non-finite values in resampled cube")
    if vmax == vmin:
        return np.full_like(resized, min(max(vmin, 0.0), 1.0))
    return (resized - vmin) / (vmax - vmin)


def to_channel_layout(volume: np.ndarray) -> np.ndarray:
    """Reinterpret a 32^3 volume as a 32-channel 32x32 image (axial slices as channels)."""
    volume = np.asarray(volume)
    if volume.shape != (PATCH_SIDE,) * 3:
        raise PreprocessError(f"expected {(PATCH_SIDE,) * 3} volume, got {volume.shape}")
    return volume.copy()  # channel z is volume[z, :, :] by construction


def from_channel_layout(image: np.ndarray) -> np.ndarray:
    return np.asarray(image).copy()


def save_patch(volume: np.ndarray, path, nodule_id: str, meta: dict | None = None) -> None:
    """Write a patch as 32768 little-endian float32 (z-major) plus a JSON sidecar.

    Writes are atomic (temp file then rename) so parallel workers never expose
    a partial patch.
    """
    volume = np.ascontiguousarray(volume, dtype="<f4")
    if volume.shape != (PATCH_SIDE,) * 3:
        raise PreprocessError(f"patch must be {(PATCH_SIDE,) * 3}, got {volume.shape}")
    path = Path(path)
    sidecar = {"nodule_id": nodule_id, "shape": list(volume.shape), "dtype": "<f4"}
    if meta:
        sidecar.update(meta)
    for target, data in (
        (path, volume.tobytes()),
        (path.with_suffix(path.suffix + ".json"), (json.dumps(sidecar, indent=2) + "\n").encode()),
    ):
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=target.name + ".")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def load_patch(path) -> np.ndarray:
    raw = np.fromfile(Path(path), dtype="<f4")
    if raw.size != PATCH_SIDE ** 3:
        raise PreprocessError(f"{path}: expected {PATCH_SIDE ** 3} floats, got {raw.size}")
    return raw.reshape((PATCH_SIDE,) * 3)


def extract_patch(
    ct: np.ndarray,
    spacing: tuple[float, float, float],
    center_voxel: tuple[int, int, int],
    equiv_diameter_mm: float,
    *,
    hu_input: bool = True,
) -> np.ndarray:
    """crop -> (optional lung window) -> resample -> normalize, in one call."""
    cube = crop_nodule(ct, spacing, center_voxel, equiv_diameter_mm)
    if hu_input:
        cube = apply_lung_window(cube)
    return resize_to_cube32(cube)
