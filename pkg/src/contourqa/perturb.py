"""Structured noise fields and SDF perturbation.

White noise is drawn from a Philox counter-based generator, smoothed with a
separable Gaussian (sigma in mm converted per axis to voxels) and rescaled so
that its empirical standard deviation equals the target exactly.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .grid import GridError, Volume, _Grid

TRUNCATE = 4.0


@dataclass(frozen=True)
class NoiseConfig:
    kernel_sigma_mm: float = 7.5
    target_std_mm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.kernel_sigma_mm > 0:
            raise ValueError(f"kernel_sigma_mm must be > 0, got {self.kernel_sigma_mm}")
        if not self.target_std_mm > 0:
            raise ValueError(f"target_std_mm must be > 0, got {self.target_std_mm}")

    def to_dict(self) -> dict:
        return asdict(self)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def smooth(field: np.ndarray, sigma_vox) -> np.ndarray:
    out = np.asarray(field, dtype=np.float64)
    for axis, s in enumerate(sigma_vox):
        out = gaussian_filter1d(out, s, axis=axis, mode="reflect", truncate=TRUNCATE)
    return out


def structured_noise(grid: _Grid, cfg: NoiseConfig, seed: int | None = None) -> Volume:
    """Gaussian-smoothed white noise with std exactly ``cfg.target_std_mm``.

    ``seed`` overrides ``cfg.seed`` (used for per-perturbation seeds).
    """
    dims = grid.dims
    if np.prod(dims) == 0:
        raise GridError("zero-volume grid")
    sigma_vox = [cfg.kernel_sigma_mm / s for s in grid.spacing]
    for n, s in zip(dims, sigma_vox):
        if n < 2 * TRUNCATE * s:
            warnings.warn(
                f"grid dimension {n} is below twice the kernel radius ({2 * TRUNCATE * s:.1f} voxels)",
                stacklevel=2,
            )
    rng = make_rng(cfg.seed if seed is None else seed)
    white = rng.standard_normal(dims)
    field = smooth(white, sigma_vox)
    field *= cfg.target_std_mm / field.std()
    return Volume(field, grid.spacing, grid.origin)


def perturb_sdf(sdf: Volume, noise: Volume) -> Volume:
    """Voxel-wise sum.  The result is generally no longer 1-Lipschitz."""
    bad = sdf.grid_mismatch(noise)
    if bad is not None:
        raise GridError(f"grid mismatch between SDF and noise: {bad} differs")
    return sdf.with_data(sdf.data.astype(np.float64) + noise.data)


def autocorrelation(field: np.ndarray, lag: int, axis: int = 0) -> float:
    """Pearson correlation between the field and itself shifted by ``lag`` voxels."""
    n = field.shape[axis]
    a = np.take(field, np.arange(0, n - lag), axis=axis).ravel()
    b = np.take(field, np.arange(lag, n), axis=axis).ravel()
    return float(np.corrcoef(a, b)[0, 1])
