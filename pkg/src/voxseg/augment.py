"""Training-time volumetric augmentation.

Two transforms, applied to the intensity grid and (for the deformation)
identically to the label grid:

* additive Gaussian noise with a standard deviation drawn uniformly per
  call;
* elastic deformation: a per-voxel uniform random displacement field,
  smoothed by a separable Gaussian kernel and scaled, then resampled by
  nearest neighbor (floor(coord + 0.5)) for both intensities and labels.

Everything is a pure function of (input, params, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .volumes import LabelVolume, Volume


@dataclass(frozen=True)
class NoiseParams:
    """Additive Gaussian noise; sigma ~ U(sigma_range) per call."""

    sigma_range: tuple = (0.0, 0.1)

    def __post_init__(self):
        lo, hi = self.sigma_range
        if not (0.0 <= lo <= hi):
            raise ConfigError(f"invalid noise sigma_range {self.sigma_range}")


@dataclass(frozen=True)
class DeformParams:
    """Elastic deformation parameters.

    ``sigma_range`` is the smoothing kernel width drawn per axis, expressed
    as a fraction of that axis extent (set ``sigma_in_voxels`` for absolute
    units).  ``alpha`` scales the smoothed field to displacement voxels.
    The kernel is truncated at 3 sigma and normalized to unit sum.
    """

    sigma_range: tuple = (0.04, 0.06)
    alpha: float = 8.0
    sigma_in_voxels: bool = False
    oob_mode: str = "background"  # or "clamp"

    def __post_init__(self):
        lo, hi = self.sigma_range
        if not (0.0 < lo <= hi):
            raise ConfigError(f"invalid deform sigma_range {self.sigma_range}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.oob_mode not in ("background", "clamp"):
            raise ConfigError(f"unknown oob_mode {self.oob_mode!r}")


class DeformField:
    """Per-voxel displacement triplets, shape (3, H, W, D), in voxels."""

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise ShapeError(f"deform field must have shape (3, H, W, D), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ShapeError("deform field contains non-finite values")
        self.data = arr

    @property
    def dims(self):
        return self.data.shape[1:]


def _rng(seed) -> np.random.Generator:
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.PCG64(seed))


def gaussian_noise(x: Volume, params: NoiseParams, seed) -> Volume:
    """Add i.i.d. zero-mean Gaussian noise; labels are never touched."""
    rng = _rng(seed)
    lo, hi = params.sigma_range
    sigma = float(rng.uniform(lo, hi))
    if sigma == 0.0:
        return x.copy()
    noise = rng.normal(0.0, sigma, size=x.data.shape).astype(np.float32)
    return Volume(x.data + noise, x.spacing)


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(3.0 * sigma + 0.5))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)


def _smooth_axis(field: np.ndarray, axis: int, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' 1-D convolution along one axis."""
    radius = (len(kernel) - 1) // 2
    moved = np.moveaxis(field, axis, 0)
    n = moved.shape[0]
    padded = np.zeros((n + 2 * radius,) + moved.shape[1:], dtype=np.float32)
    padded[radius : radius + n] = moved
    out = np.zeros_like(moved)
    for i, w in enumerate(kernel):
        out += w * padded[i : i + n]
    return np.moveaxis(out, 0, axis)


def make_deform_field(dims, params: DeformParams, seed) -> DeformField:
    """Sample, smooth and scale a random displacement field.

    Raw displacements are U(-1, 1) per voxel per axis.  Each axis component
    draws its own kernel sigma; a large sigma averages the uniform noise
    toward zero, a small one leaves it nearly unsmoothed.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 2 for d in dims):
        raise ShapeError(f"deform field needs dims >= 2 per axis, got {dims}")
    if params.alpha == 0.0:
        return DeformField(np.zeros((3,) + dims, dtype=np.float32))
    rng = _rng(seed)
    lo, hi = params.sigma_range
    field = np.empty((3,) + dims, dtype=np.float32)
    for j in range(3):
        frac = float(rng.uniform(lo, hi))
        raw = rng.uniform(-1.0, 1.0, size=dims).astype(np.float32)
        comp = raw
        for axis in range(3):
            sigma = frac if params.sigma_in_voxels else frac * dims[axis]
            comp = _smooth_axis(comp, axis, _gauss_kernel(sigma))
        field[j] = params.alpha * comp
    return DeformField(field)


def elastic_deform(x: Volume, y: LabelVolume, field: DeformField, oob_mode="background"):
    """Warp intensities and labels by the same field, nearest neighbor.

    For each target voxel the source coordinate is target + displacement;
    both grids sample floor(coord + 0.5).  Out-of-bounds sources yield
    intensity 0 and label 0 by default, or the nearest edge voxel with
    ``oob_mode="clamp"``.
    """
    if x.dims != y.dims or x.dims != field.dims:
        raise ShapeError(
            f"elastic_deform: dims mismatch x={x.dims} y={y.dims} field={field.dims}"
        )
    if oob_mode not in ("background", "clamp"):
        raise ConfigError(f"unknown oob_mode {oob_mode!r}")
    if not field.data.any():
        return x.copy(), y.copy()
    h, w, d = x.dims
    grid = np.indices((h, w, d), dtype=np.float32)
    src = grid + field.data
    idx = np.floor(src + 0.5).astype(np.int64)
    clamped = [np.clip(idx[a], 0, x.dims[a] - 1) for a in range(3)]
    xi = x.data[clamped[0], clamped[1], clamped[2]]
    yi = y.data[clamped[0], clamped[1], clamped[2]]
    if oob_mode == "background":
        inside = (
            (idx[0] >= 0)
            & (idx[0] < h)
            & (idx[1] >= 0)
            & (idx[1] < w)
            & (idx[2] >= 0)
            & (idx[2] < d)
        )
        xi = np.where(inside, xi, np.float32(0.0))
        yi = np.where(inside, yi, np.int32(0))
    return (
        Volume(xi, x.spacing),
        LabelVolume(yi, num_classes=y.num_classes, spacing=y.spacing),
    )


def augment_pair(x, y, deform: DeformParams, noise: NoiseParams, seed):
    """Elastic deformation then additive noise, with seeds derived from one."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_field, s_noise = ss.spawn(2)
    field = make_deform_field(x.dims, deform, s_field)
    x2, y2 = elastic_deform(x, y, field, oob_mode=deform.oob_mode)
    x3 = gaussian_noise(x2, noise, s_noise)
    return x3, y2
