"""Geometric and intensity normalization of volumes into model inputs.

The pipeline is resample -> center crop / symmetric pad -> percentile
normalization, applied to canonical-orientation volumes. Conventions the
target spacing and shape do not pin down:

* output dimension per axis is max(1, round(n_in * s_in / s_out)) with
  round = floor(x + 0.5) for platform stability;
* voxel index i sits at physical offset i * spacing from the origin, so
  output index i samples input fractional index i * s_out / s_in;
* samples outside the input grid clamp to the edge voxel;
* percentiles use linear interpolation on the sorted flattened voxels,
  and the clamped window is rescaled to [0, 1]; a constant volume (equal
  window edges) maps to all zeros;
* odd crop/pad remainders go to the trailing side.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import SeriesVolume

INTERPOLATIONS = ("trilinear", "nearest")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class PreprocessConfig:
    target_spacing: tuple[float, float, float] = (1.5, 1.5, 7.8)
    target_shape: tuple[int, int, int] = (256, 256, 36)  # (X, Y, Z)
    percentile_window: tuple[float, float] = (1.0, 99.0)
    pad_value: float = 0.0
    interpolation: str = "trilinear"

    def __post_init__(self):
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.target_shape = tuple(int(n) for n in self.target_shape)
        self.percentile_window = tuple(float(p) for p in self.percentile_window)
        if len(self.target_spacing) != 3 or any(s <= 0 for s in self.target_spacing):
            raise ValueError(f"target_spacing must be 3 positive reals, got {self.target_spacing}")
        if len(self.target_shape) != 3 or any(n < 1 for n in self.target_shape):
            raise ValueError(f"target_shape entries must be >= 1, got {self.target_shape}")
        p_low, p_high = self.percentile_window
        if not (0.0 <= p_low < p_high <= 100.0):
            raise ValueError(f"percentile_window must satisfy 0 <= low < high <= 100, "
                             f"got {self.percentile_window}")
        if self.interpolation not in INTERPOLATIONS:
            raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")
        self.pad_value = float(self.pad_value)

    def to_dict(self) -> dict:
        return {
            "target_spacing": list(self.target_spacing),
            "target_shape": list(self.target_shape),
            "percentile_window": list(self.percentile_window),
            "pad_value": self.pad_value,
            "interpolation": self.interpolation,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PreprocessConfig":
        return cls(**doc)

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def desk_preprocess_config() -> PreprocessConfig:
    """Reduced-resolution config sized for the synthetic phantom datasets."""
    return PreprocessConfig(target_spacing=(4.0, 4.0, 8.0), target_shape=(32, 32, 12))


def resample(volume: SeriesVolume, target_spacing) -> SeriesVolume:
    """Resample onto target spacing by trilinear interpolation at voxel centers."""
    return _resample(volume, target_spacing, "trilinear")


def _resample(volume: SeriesVolume, target_spacing, interpolation: str) -> SeriesVolume:
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")

    data = np.asarray(volume.voxels, dtype=np.float64)
    out_dims = [
        max(1, _round_half_up(n * s_in / s_out))
        for n, s_in, s_out in zip(data.shape, volume.spacing, target_spacing)
    ]
    # trilinear interpolation is separable: one linear pass per axis
    for axis in range(3):
        n_in = data.shape[axis]
        n_out = out_dims[axis]
        ratio = target_spacing[axis] / volume.spacing[axis]
        coords = np.clip(np.arange(n_out, dtype=np.float64) * ratio, 0.0, n_in - 1)
        if interpolation == "nearest":
            idx = np.floor(coords + 0.5).astype(np.intp)
            data = np.take(data, np.minimum(idx, n_in - 1), axis=axis)
            continue
        if n_in == 1:
            lo = np.zeros(n_out, dtype=np.intp)
            frac = np.zeros(n_out)
        else:
            lo = np.minimum(np.floor(coords).astype(np.intp), n_in - 2)
            frac = coords - lo
        shape = [1, 1, 1]
        shape[axis] = n_out
        w = frac.reshape(shape)
        data = np.take(data, lo, axis=axis) * (1.0 - w) + np.take(data, lo + 1, axis=axis) * w

    return SeriesVolume(
        data.astype(volume.voxels.dtype, copy=False),
        spacing=target_spacing,
        origin=volume.origin,
        axis_codes=volume.axis_codes,
    )


def crop_or_pad(volume: SeriesVolume, target_shape, pad_value: float = 0.0) -> SeriesVolume:
    """Center-crop or symmetrically pad each axis independently to target_shape.

    The origin follows the retained voxels so their physical positions are
    unchanged.
    """
    target_shape = tuple(int(n) for n in target_shape)
    if len(target_shape) != 3 or any(n < 1 for n in target_shape):
        raise ValueError(f"target_shape entries must be >= 1, got {target_shape}")

    data = volume.voxels
    origin = list(volume.origin)
    slices = []
    pads = []
    for axis, (n_in, n_target) in enumerate(zip(data.shape, target_shape)):
        if n_in > n_target:
            offset = (n_in - n_target) // 2
            slices.append(slice(offset, offset + n_target))
            pads.append((0, 0))
            origin[axis] += offset * volume.spacing[axis]
        elif n_in < n_target:
            lead = (n_target - n_in) // 2
            slices.append(slice(None))
            pads.append((lead, n_target - n_in - lead))
            origin[axis] -= lead * volume.spacing[axis]
        else:
            slices.append(slice(None))
            pads.append((0, 0))
    data = data[tuple(slices)]
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads, mode="constant", constant_values=pad_value)
    return SeriesVolume(
        data.copy(), spacing=volume.spacing, origin=tuple(origin), axis_codes=volume.axis_codes
    )


def normalize_percentile(volume: SeriesVolume, p_low: float, p_high: float) -> SeriesVolume:
    """Clamp to the [p_low, p_high] percentile window and rescale to [0, 1]."""
    if not (0.0 <= p_low < p_high <= 100.0):
        raise ValueError(f"need 0 <= p_low < p_high <= 100, got ({p_low}, {p_high})")
    data = np.asarray(volume.voxels, dtype=np.float64)
    a, b = np.percentile(data, [p_low, p_high])
    if b == a:
        out = np.zeros_like(data)
    else:
        out = np.clip((data - a) / (b - a), 0.0, 1.0)
    return SeriesVolume(
        out.astype(np.float32),
        spacing=volume.spacing,
        origin=volume.origin,
        axis_codes=volume.axis_codes,
    )


def preprocess_pipeline(volume: SeriesVolume, cfg: PreprocessConfig) -> np.ndarray:
    """Full pipeline; returns a (1, Z, Y, X) float32 tensor with values in [0, 1]."""
    resampled = _resample(volume, cfg.target_spacing, cfg.interpolation)
    shaped = crop_or_pad(resampled, cfg.target_shape, cfg.pad_value)
    normalized = normalize_percentile(shaped, *cfg.percentile_window)
    tensor = np.ascontiguousarray(normalized.voxels.transpose(2, 1, 0)[np.newaxis])
    return tensor.astype(np.float32, copy=False)


def dump_debug_tensor(tensor: np.ndarray, path, cfg: PreprocessConfig, series_uid: str) -> Path:
    """Write a preprocessed tensor back out as a volume plus a JSON sidecar."""
    from . import nifti

    path = Path(path)
    voxels = np.ascontiguousarray(tensor[0].transpose(2, 1, 0))
    vol = SeriesVolume(voxels, spacing=cfg.target_spacing)
    nifti.write_volume(path, vol)
    sidecar = path.with_name(path.name.split(".")[0] + "_meta.json")
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "series_uid": series_uid,
                "preprocess_fingerprint": cfg.fingerprint(),
                "preprocess_config": cfg.to_dict(),
            },
            fh,
            indent=2,
        )
    return path
