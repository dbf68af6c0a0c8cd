"""Voxel volume container and orientation canonicalization.

All volumes in the package live in a single canonical axis convention,
code triple ("R", "A", "S"): axis 0 grows toward the patient's right,
axis 1 toward anterior, axis 2 toward superior. Loaders reorient at read
time so preprocessing never has to reason about orientation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CANONICAL_AXES = ("R", "A", "S")

# code for the positive / negative direction of each world axis
_POS_CODES = ("R", "A", "S")
_NEG_CODES = ("L", "P", "I")


@dataclass
class SeriesVolume:
    """A 3D scalar grid with physical spacing (mm), origin, and orientation."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis_codes: tuple[str, str, str] = CANONICAL_AXES

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be rank 3, got rank {self.voxels.ndim}")
        if any(n < 1 for n in self.voxels.shape):
            raise ValueError(f"all dimensions must be >= 1, got {self.voxels.shape}")
        if not np.issubdtype(self.voxels.dtype, np.floating):
            self.voxels = self.voxels.astype(np.float32)
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("voxel values must all be finite")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.origin) != 3 or any(not np.isfinite(o) for o in self.origin):
            raise ValueError(f"origin must be three finite reals, got {self.origin}")
        self.axis_codes = tuple(self.axis_codes)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def affine(self) -> np.ndarray:
        """4x4 voxel-index-to-physical map (canonical volumes are axis aligned)."""
        out = np.eye(4)
        out[:3, :3] = np.diag(self.spacing)
        out[:3, 3] = self.origin
        return out


def axis_codes_from_affine(mat: np.ndarray) -> tuple[str, str, str]:
    """Nearest-canonical orientation codes for the 3x3 direction part."""
    _, codes = _dominant_axes(np.asarray(mat, dtype=float)[:3, :3])
    return codes


def _dominant_axes(m: np.ndarray):
    """Assign each voxel axis a distinct world axis, greedily by |cosine|.

    Returns (assignment, codes) where assignment[j] = (world_axis, sign)
    for voxel axis j.
    """
    norms = np.linalg.norm(m, axis=0)
    if np.any(norms == 0) or not np.all(np.isfinite(m)):
        raise ValueError("affine direction matrix is degenerate")
    cosines = m / norms
    candidates = sorted(
        ((abs(cosines[k, j]), k, j) for k in range(3) for j in range(3)),
        reverse=True,
    )
    assignment: dict[int, tuple[int, int]] = {}
    used_world = set()
    for _, k, j in candidates:
        if j in assignment or k in used_world:
            continue
        sign = 1 if cosines[k, j] >= 0 else -1
        assignment[j] = (k, sign)
        used_world.add(k)
        if len(assignment) == 3:
            break
    codes = []
    for j in range(3):
        k, sign = assignment[j]
        codes.append(_POS_CODES[k] if sign > 0 else _NEG_CODES[k])
    return assignment, tuple(codes)


def canonicalize(voxels: np.ndarray, affine: np.ndarray) -> SeriesVolume:
    """Reorient a voxel grid with an arbitrary affine into canonical RAS axes.

    Axes are permuted and flipped so each voxel axis tracks the closest
    world axis in the positive direction. Off-axis (oblique) residue is
    dropped: downstream code consumes only spacing, shape, and origin.
    """
    voxels = np.asarray(voxels)
    affine = np.asarray(affine, dtype=float)
    m = affine[:3, :3].copy()
    origin = affine[:3, 3].copy()
    assignment, _ = _dominant_axes(m)

    work = voxels
    for j in range(3):
        _, sign = assignment[j]
        if sign < 0:
            work = np.flip(work, axis=j)
            origin = origin + m[:, j] * (voxels.shape[j] - 1)
            m[:, j] = -m[:, j]
    # permute voxel axes so axis k of the output follows world axis k
    perm = [0, 0, 0]
    for j in range(3):
        k, _ = assignment[j]
        perm[k] = j
    work = np.ascontiguousarray(np.transpose(work, perm))
    m = m[:, perm]
    spacing = tuple(float(np.linalg.norm(m[:, k])) for k in range(3))
    return SeriesVolume(work, spacing, tuple(float(o) for o in origin), CANONICAL_AXES)
